//! Patch-token flow-matching denoiser with Teamwork adapters on every
//! linear layer.

pub mod net;
pub mod optim;
pub mod sample;
pub mod train;

pub use net::{BaseNet, DenoiserNet, FactorGrads, ForwardCache, NetConfig, LAYER_COUNT};
pub use optim::{Adam, AdamConfig};
pub use sample::{evaluate, sample, sample_observed, EvalMask, EvalReport, NoiseSchedule, Observer, SamplerStep};
pub use train::{
    draw_mask, flow_matching_eval, flow_matching_loss, loss_and_grads, pretrain_base, train_adapter, train_net, velocity_loss,
    LossEval, MaskPolicy, MetricRecord, MetricsLog, PretrainConfig, TeamSample, TrainConfig,
};
