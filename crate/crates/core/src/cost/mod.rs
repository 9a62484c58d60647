pub mod ledger;
pub mod model;

pub use model::{measure_all, predict_attention_cost, predict_linear_cost, scaling_sweep, CostReport, CostScheme, SweepConfig, SweepResult};
