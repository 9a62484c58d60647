//! Flow-matching objectives and the two training loops: base pretraining
//! on single planes and adapter training on team samples.
//!
//! Output planes follow `z_t = (1 - t) x0 + t eps` and the net regresses the
//! velocity `eps - x0`. Input planes are fed clean, at time 0, and carry no
//! loss term.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use log::debug;

use crate::adapter::{ActivationMask, AdapterMode};
use crate::diffusion::net::{BaseNet, DenoiserNet, FactorGrads, ForwardCache, NetConfig};
use crate::diffusion::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::Role;
use crate::tensor::{DenseMatrix, Rng};

/// One training example: a plane per teammate, encoded to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamSample {
    pub planes: Vec<Image>,
    pub roles: Vec<Role>,
}

impl TeamSample {
    pub fn new(planes: Vec<Image>, roles: Vec<Role>) -> Result<Self> {
        if planes.is_empty() || planes.len() != roles.len() {
            return Err(Error::shape(format!("{} planes for {} roles", planes.len(), roles.len())));
        }
        if !roles.contains(&Role::Output) {
            return Err(Error::param("a team sample needs at least one output teammate"));
        }
        if planes.iter().any(|p| !p.same_shape(&planes[0])) {
            return Err(Error::shape("team planes differ in size"));
        }
        Ok(TeamSample { planes, roles })
    }

    /// Builds a sample from `[0, 1]` planes, encoding them.
    pub fn from_unit(planes: &[Image], roles: &[Role]) -> Result<Self> {
        Self::new(planes.iter().map(Image::encode).collect(), roles.to_vec())
    }

    pub fn team_size(&self) -> usize {
        self.planes.len()
    }
}

/// Squared-error velocity loss averaged over every element of `preds`,
/// with its gradient per prediction.
pub fn velocity_loss(preds: &[Image], targets: &[Image]) -> Result<(f64, Vec<Image>)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::shape("prediction and target counts differ"));
    }
    let count: usize = preds.iter().map(|p| p.data().len()).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        if !p.same_shape(t) {
            return Err(Error::shape("prediction and target sizes differ"));
        }
        let mut g = p.clone();
        for (gv, tv) in g.data_mut().iter_mut().zip(t.data()) {
            let d = *gv - tv;
            loss += d * d;
            *gv = 2.0 * d / count as f64;
        }
        grads.push(g);
    }
    Ok((loss / count as f64, grads))
}

/// A forward pass of the flow-matching objective, ready for backprop.
pub struct LossEval {
    pub loss: f64,
    /// Upstream gradients on the net's output tokens, one per active teammate.
    pub output_grads: Vec<DenseMatrix>,
    /// Velocity predictions, one per active teammate.
    pub predictions: Vec<Image>,
    /// Planes fed to the net, one per active teammate.
    pub net_inputs: Vec<Image>,
    cache: ForwardCache,
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::param(format!("diffusion time must lie in (0, 1), got {t}")));
    }
    Ok(())
}

/// Evaluates the loss for one team sample at time `t`. `noise` holds one
/// plane per teammate; entries for input teammates are ignored.
pub fn flow_matching_eval(net: &DenoiserNet, sample: &TeamSample, t: f64, noise: &[Image], mask: &ActivationMask) -> Result<LossEval> {
    check_time(t)?;
    let team = sample.team_size();
    if net.team_size() != team || mask.team_size() != team || noise.len() != team {
        return Err(Error::shape(format!(
            "team of {team} vs net {} / mask {} / noise {}",
            net.team_size(),
            mask.team_size(),
            noise.len()
        )));
    }
    let active = mask.active_indices();
    for (i, role) in sample.roles.iter().enumerate() {
        if *role == Role::Input && !mask.is_active(i) {
            return Err(Error::param(format!("input teammate {i} must be active")));
        }
    }
    if !active.iter().any(|&i| sample.roles[i] == Role::Output) {
        return Err(Error::param("no active output teammate"));
    }
    let mut net_inputs = Vec::with_capacity(active.len());
    let mut times = Vec::with_capacity(active.len());
    for &i in &active {
        let x0 = &sample.planes[i];
        match sample.roles[i] {
            Role::Input => {
                net_inputs.push(x0.clone());
                times.push(0.0);
            }
            Role::Output => {
                let eps = &noise[i];
                let zt = Image::new(
                    x0.height(),
                    x0.width(),
                    x0.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect(),
                )?;
                net_inputs.push(zt);
                times.push(t);
            }
        }
    }
    let (out, cache) = net.forward_train(&net_inputs, &times, mask)?;
    let predictions = out.iter().map(|o| net.config.untokenize(o)).collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (k, &i) in active.iter().enumerate() {
        if sample.roles[i] == Role::Output {
            preds.push(predictions[k].clone());
            let x0 = &sample.planes[i];
            targets.push(Image::new(
                x0.height(),
                x0.width(),
                noise[i].data().iter().zip(x0.data()).map(|(e, a)| e - a).collect(),
            )?);
        }
    }
    let (loss, grads) = velocity_loss(&preds, &targets)?;
    let mut grads = grads.into_iter();
    let output_grads = active
        .iter()
        .map(|&i| match sample.roles[i] {
            Role::Output => net.config.image_to_patches(&grads.next().expect("one gradient per output")),
            Role::Input => Ok(DenseMatrix::zeros(net.config.tokens(), net.config.patch_features())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossEval {
        loss,
        output_grads,
        predictions,
        net_inputs,
        cache,
    })
}

pub fn flow_matching_loss(net: &DenoiserNet, sample: &TeamSample, t: f64, noise: &[Image], mask: &ActivationMask) -> Result<f64> {
    Ok(flow_matching_eval(net, sample, t, noise, mask)?.loss)
}

/// Loss and factor gradients for one micro-batch.
pub fn loss_and_grads(net: &DenoiserNet, sample: &TeamSample, t: f64, noise: &[Image], mask: &ActivationMask) -> Result<(f64, FactorGrads)> {
    let eval = flow_matching_eval(net, sample, t, noise, mask)?;
    let grads = net.backward(&eval.cache, &eval.output_grads, mask)?;
    Ok((eval.loss, grads))
}

fn draw_time(rng: &mut Rng) -> f64 {
    loop {
        let t = rng.uniform(0.0, 1.0);
        if t > 0.0 {
            return t;
        }
    }
}

fn noise_like(img: &Image, rng: &mut Rng) -> Image {
    Image::new(img.height(), img.width(), rng.normal_vec(img.data().len())).expect("same size")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub net: NetConfig,
    pub steps: usize,
    pub accumulation: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            net: NetConfig::default(),
            steps: 2000,
            accumulation: 8,
            adam: AdamConfig::default(),
        }
    }
}

/// Trains a single-teammate denoiser on `[-1, 1]` planes. Returns the net
/// and the loss of every optimizer step.
pub fn pretrain_base(dataset: &[Image], config: &PretrainConfig, rng: &mut Rng) -> Result<(BaseNet, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::param("pretraining needs a non-empty dataset"));
    }
    if config.accumulation == 0 {
        return Err(Error::param("accumulation must be at least 1"));
    }
    let mut base = BaseNet::init(config.net, rng.seed())?;
    let mut opt = Adam::new(config.adam);
    let mut draws = rng.stream(0x5052_4554);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut total: Option<Vec<DenseMatrix>> = None;
        let mut step_loss = 0.0;
        for _ in 0..config.accumulation {
            let x0 = &dataset[draws.below(dataset.len())];
            let t = draw_time(&mut draws);
            let eps = noise_like(x0, &mut draws);
            let zt = Image::new(
                x0.height(),
                x0.width(),
                x0.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect(),
            )?;
            let target = Image::new(
                x0.height(),
                x0.width(),
                eps.data().iter().zip(x0.data()).map(|(e, a)| e - a).collect(),
            )?;
            let (out, cache) = base.forward_tokens(vec![config.net.tokenize(&zt, t)?])?;
            let pred = config.net.untokenize(&out[0])?;
            let (loss, grads) = velocity_loss(&[pred], &[target])?;
            let g = base.backward(&cache, &[config.net.image_to_patches(&grads[0])?])?;
            step_loss += loss;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let inv = 1.0 / config.accumulation as f64;
        for (slot, (w, g)) in base.weights.iter_mut().zip(total.expect("accumulation >= 1")).enumerate() {
            opt.update(slot, w, &g.scaled(inv))?;
        }
        losses.push(step_loss * inv);
        if step % 100 == 0 {
            debug!("pretrain step {step} loss {:.5}", step_loss * inv);
        }
    }
    Ok((base, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Every teammate active on every micro-batch.
    Full,
    /// Each output teammate dropped independently, never all of them.
    Dropout,
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskPolicy::Full),
            "dropout" => Ok(MaskPolicy::Dropout),
            other => Err(Error::param(format!("unknown mask policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub accumulation: usize,
    pub dropout_prob: f64,
    pub rank: usize,
    pub mode: AdapterMode,
    pub mask_policy: MaskPolicy,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            accumulation: 16,
            dropout_prob: 0.0,
            rank: 16,
            mode: AdapterMode::Teamwork,
            mask_policy: MaskPolicy::Full,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            return Err(Error::param("accumulation must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::param(format!("dropout probability must be in [0, 1), got {}", self.dropout_prob)));
        }
        if self.rank == 0 {
            return Err(Error::param("rank must be at least 1"));
        }
        if self.mode == AdapterMode::FrozenOnly {
            return Err(Error::param("nothing to train in frozen-only mode"));
        }
        Ok(())
    }
}

/// Mask for one micro-batch. Inputs stay active; under dropout each output
/// is dropped with `p`, and if that drops them all one is revived at random.
pub fn draw_mask(roles: &[Role], policy: MaskPolicy, p: f64, rng: &mut Rng) -> ActivationMask {
    let mut active: Vec<bool> = vec![true; roles.len()];
    if policy == MaskPolicy::Dropout && p > 0.0 {
        let outputs: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == Role::Output).collect();
        for &o in &outputs {
            active[o] = !rng.bernoulli(p);
        }
        if outputs.iter().all(|&o| !active[o]) {
            active[outputs[rng.below(outputs.len())]] = true;
        }
    }
    ActivationMask::new(active).expect("inputs or a revived output are active")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    /// Masks of the micro-batches in this step, in order.
    pub masks: Vec<ActivationMask>,
    pub wall_ms: u64,
}

/// Per-step training log. One record per line:
/// `step=<n> loss=<f64> mask=<bits>[,<bits>...] wall_ms=<n>`, where each
/// mask is one `0`/`1` character per teammate and the loss is written in
/// shortest round-trip form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    /// The log without wall-clock fields; identical across runs with the same seed.
    pub fn deterministic_text(&self) -> String {
        self.render(false)
    }

    fn render(&self, wall: bool) -> String {
        let mut s = String::new();
        for r in &self.records {
            let masks: Vec<String> = r.masks.iter().map(ToString::to_string).collect();
            let _ = write!(s, "step={} loss={:?} mask={}", r.step, r.loss, masks.join(","));
            if wall {
                let _ = write!(s, " wall_ms={}", r.wall_ms);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format(format!("metrics line {}: {line:?}", ln + 1));
            let mut rec = MetricRecord {
                step: 0,
                loss: 0.0,
                masks: Vec::new(),
                wall_ms: 0,
            };
            for field in line.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(bad)?;
                match k {
                    "step" => rec.step = v.parse().map_err(|_| bad())?,
                    "loss" => rec.loss = v.parse().map_err(|_| bad())?,
                    "wall_ms" => rec.wall_ms = v.parse().map_err(|_| bad())?,
                    "mask" => {
                        rec.masks = v
                            .split(',')
                            .map(|bits| ActivationMask::new(bits.chars().map(|c| c == '1').collect()).map_err(|_| bad()))
                            .collect::<Result<_>>()?
                    }
                    _ => return Err(bad()),
                }
            }
            records.push(rec);
        }
        Ok(MetricsLog { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Builds adapters around `base` and trains them on `dataset`.
pub fn train_adapter(base: &BaseNet, dataset: &[TeamSample], config: &TrainConfig, rng: &mut Rng) -> Result<(DenoiserNet, MetricsLog)> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::param("training needs a non-empty dataset"))?;
    let mut init_rng = rng.stream(0x494e_4954);
    let mut net = DenoiserNet::from_base(base, first.team_size(), config.rank, config.mode, &mut init_rng)?;
    let log = train_net(&mut net, dataset, config, rng)?;
    Ok((net, log))
}

/// Micro-batch-1 training with gradient accumulation; only factors change.
pub fn train_net(net: &mut DenoiserNet, dataset: &[TeamSample], config: &TrainConfig, rng: &mut Rng) -> Result<MetricsLog> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::param("training needs a non-empty dataset"))?;
    let roles = first.roles.clone();
    if dataset.iter().any(|s| s.roles != roles) {
        return Err(Error::param("all samples must share one team topology"));
    }
    if first.team_size() != net.team_size() {
        return Err(Error::shape(format!(
            "samples have {} teammates, net has {}",
            first.team_size(),
            net.team_size()
        )));
    }
    let team = net.team_size();
    let mut opt = Adam::new(config.adam);
    let mut draws = rng.stream(0x5452_4149);
    let mut log = MetricsLog::default();
    for step in 0..config.steps {
        let started = Instant::now();
        let mut total = FactorGrads::new(net.layers().len(), team);
        let mut masks = Vec::with_capacity(config.accumulation);
        let mut step_loss = 0.0;
        for _ in 0..config.accumulation {
            let sample = &dataset[draws.below(dataset.len())];
            let mask = draw_mask(&roles, config.mask_policy, config.dropout_prob, &mut draws);
            let t = draw_time(&mut draws);
            let noise: Vec<Image> = sample.planes.iter().map(|p| noise_like(p, &mut draws)).collect();
            let (loss, grads) = loss_and_grads(net, sample, t, &noise, &mask)?;
            total.add(&grads)?;
            step_loss += loss;
            masks.push(mask);
        }
        total.scale(1.0 / config.accumulation as f64);
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            for i in 0..team {
                if let Some(g) = &total.a[l][i] {
                    opt.update((l * team + i) * 2, layer.factor_a_mut(i), g)?;
                }
                if let Some(g) = &total.b[l][i] {
                    opt.update((l * team + i) * 2 + 1, layer.factor_b_mut(i), g)?;
                }
            }
        }
        let loss = step_loss / config.accumulation as f64;
        if step % 100 == 0 {
            debug!("adapter step {step} loss {loss:.5}");
        }
        log.records.push(MetricRecord {
            step,
            loss,
            masks,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> NetConfig {
        NetConfig {
            height: 8,
            width: 8,
            patch: 4,
            model_dim: 8,
            hidden_dim: 12,
            heads: 1,
        }
    }

    fn tiny_sample(seed: u64, roles: Vec<Role>) -> TeamSample {
        let mut rng = Rng::new(seed);
        let planes = roles
            .iter()
            .map(|_| Image::from_fn(8, 8, |_, _, _| rng.uniform(-1.0, 1.0)))
            .collect();
        TeamSample::new(planes, roles).unwrap()
    }

    fn decomposition_roles() -> Vec<Role> {
        vec![Role::Input, Role::Output, Role::Output]
    }

    fn generic_net(seed: u64) -> DenoiserNet {
        let base = BaseNet::init(tiny_net(), seed).unwrap();
        let mut rng = Rng::new(seed + 1);
        let mut net = DenoiserNet::from_base(&base, 3, 2, AdapterMode::Teamwork, &mut rng).unwrap();
        for l in net.layers_mut() {
            for i in 0..3 {
                let n = l.in_dim();
                *l.factor_b_mut(i) = crate::tensor::gaussian(2, n, &mut rng, 0.3).unwrap();
            }
        }
        net
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let img = Image::from_fn(8, 8, |c, y, x| (c + y * x) as f64 * 0.01);
        let (loss, grads) = velocity_loss(&[img.clone()], &[img]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_slots_carry_no_loss_gradient() {
        let net = generic_net(1);
        let sample = tiny_sample(2, decomposition_roles());
        let mut rng = Rng::new(3);
        let noise: Vec<Image> = sample.planes.iter().map(|p| noise_like(p, &mut rng)).collect();
        let eval = flow_matching_eval(&net, &sample, 0.4, &noise, &ActivationMask::all(3)).unwrap();
        assert!(eval.output_grads[0].is_zero());
        assert!(!eval.output_grads[1].is_zero());
        assert_eq!(eval.net_inputs[0], sample.planes[0]);
    }

    #[test]
    fn input_teammate_factors_receive_gradient() {
        let net = generic_net(4);
        let sample = tiny_sample(5, decomposition_roles());
        let mut rng = Rng::new(6);
        let noise: Vec<Image> = sample.planes.iter().map(|p| noise_like(p, &mut rng)).collect();
        let (_, grads) = loss_and_grads(&net, &sample, 0.5, &noise, &ActivationMask::all(3)).unwrap();
        assert!(grads.teammate_max_abs(0) > 1e-8);
    }

    #[test]
    fn loss_rejects_bad_time_and_masks() {
        let net = generic_net(7);
        let sample = tiny_sample(8, decomposition_roles());
        let noise = sample.planes.clone();
        let all = ActivationMask::all(3);
        for t in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(flow_matching_loss(&net, &sample, t, &noise, &all).is_err());
        }
        let no_input = ActivationMask::from_indices(3, &[1, 2]).unwrap();
        assert!(flow_matching_loss(&net, &sample, 0.5, &noise, &no_input).is_err());
        let no_output = ActivationMask::from_indices(3, &[0]).unwrap();
        assert!(flow_matching_loss(&net, &sample, 0.5, &noise, &no_output).is_err());
    }

    #[test]
    fn dropout_mask_never_drops_inputs_or_all_outputs() {
        let roles = decomposition_roles();
        let mut rng = Rng::new(9);
        let mut dropped = 0;
        for _ in 0..2000 {
            let m = draw_mask(&roles, MaskPolicy::Dropout, 0.9, &mut rng);
            assert!(m.is_active(0));
            assert!(m.is_active(1) || m.is_active(2));
            dropped += usize::from(!m.is_full());
        }
        assert!(dropped > 1000);
        for _ in 0..100 {
            assert!(draw_mask(&roles, MaskPolicy::Dropout, 0.0, &mut rng).is_full());
            assert!(draw_mask(&roles, MaskPolicy::Full, 0.9, &mut rng).is_full());
        }
    }

    #[test]
    fn zero_pretraining_steps_returns_initial_net() {
        let data = vec![Image::filled(8, 8, 0.1)];
        let cfg = PretrainConfig {
            net: tiny_net(),
            steps: 0,
            ..PretrainConfig::default()
        };
        let (base, losses) = pretrain_base(&data, &cfg, &mut Rng::new(42)).unwrap();
        assert!(losses.is_empty());
        assert_eq!(base, BaseNet::init(tiny_net(), 42).unwrap());
        assert_eq!(base.seed, 42);
        assert!(pretrain_base(&[], &cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn training_touches_only_factors_and_is_deterministic() {
        let base = BaseNet::init(tiny_net(), 10).unwrap();
        let data: Vec<TeamSample> = (0..4).map(|s| tiny_sample(s, decomposition_roles())).collect();
        let cfg = TrainConfig {
            steps: 3,
            accumulation: 2,
            rank: 2,
            mask_policy: MaskPolicy::Dropout,
            dropout_prob: 0.5,
            ..TrainConfig::default()
        };
        let (net, log) = train_adapter(&base, &data, &cfg, &mut Rng::new(11)).unwrap();
        let (net2, log2) = train_adapter(&base, &data, &cfg, &mut Rng::new(11)).unwrap();
        assert_eq!(net, net2);
        assert_eq!(log.deterministic_text(), log2.deterministic_text());
        for (layer, w) in net.layers().iter().zip(&base.weights) {
            assert_eq!(layer.weight(), w);
            assert!(layer.factors_b().iter().any(|b| !b.is_zero()));
        }
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.records[0].masks.len(), 2);
        assert!(train_adapter(&base, &data, &TrainConfig { accumulation: 0, ..cfg }, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn metrics_log_round_trips() {
        let log = MetricsLog {
            records: vec![MetricRecord {
                step: 0,
                loss: 0.1 + 0.2,
                masks: vec![ActivationMask::all(3), ActivationMask::from_indices(3, &[0, 2]).unwrap()],
                wall_ms: 17,
            }],
        };
        let text = log.to_text();
        assert_eq!(text, "step=0 loss=0.30000000000000004 mask=111,101 wall_ms=17\n");
        assert_eq!(MetricsLog::parse(&text).unwrap(), log);
        assert!(MetricsLog::parse("step=x").is_err());
    }
}
