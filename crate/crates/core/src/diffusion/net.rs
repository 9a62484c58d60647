//! Patch-token denoiser whose every linear layer is an adapted layer.
//!
//! Per teammate: patchify -> embed -> MLP block -> self-attention block ->
//! MLP block -> unpatchify, with residual connections around each block.
//! Linear layers couple teammates token-by-token through the adapters;
//! attention and the nonlinearities act on each teammate separately.

use crate::adapter::{ActivationMask, AdapterMode, Checkpoint, TeamworkAdapter};
use crate::attention::{attend, attend_backward, AttentionCache};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::{gaussian, matmul, matmul_transa, matmul_transb, DenseMatrix, Rng};

pub const EMBED: usize = 0;
pub const MLP1_UP: usize = 1;
pub const MLP1_DOWN: usize = 2;
pub const QUERY: usize = 3;
pub const KEY: usize = 4;
pub const VALUE: usize = 5;
pub const ATTN_OUT: usize = 6;
pub const MLP2_UP: usize = 7;
pub const MLP2_DOWN: usize = 8;
pub const UNEMBED: usize = 9;
pub const LAYER_COUNT: usize = 10;

/// Extra per-token features after the patch pixels: time, constant 1, y, x.
const EXTRA_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            height: 16,
            width: 16,
            patch: 2,
            model_dim: 64,
            hidden_dim: 128,
            heads: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::param(format!(
                "patch {} must divide the {}x{} frame",
                self.patch, self.height, self.width
            )));
        }
        if self.model_dim == 0 || self.hidden_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "model dim {} must be a positive multiple of {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gy, gx) = self.grid();
        gy * gx
    }

    pub fn patch_features(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn token_features(&self) -> usize {
        self.patch_features() + EXTRA_FEATURES
    }

    /// `(out, in)` shape of every linear layer, in layer order.
    pub fn layer_shapes(&self) -> [(usize, usize); LAYER_COUNT] {
        let (d, h) = (self.model_dim, self.hidden_dim);
        [
            (d, self.token_features()),
            (h, d),
            (d, h),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (h, d),
            (d, h),
            (self.patch_features(), d),
        ]
    }

    /// Token matrix for one plane: patch pixels in (channel, dy, dx) order,
    /// then the time, a constant 1 and the patch center in `[-1, 1]^2`.
    pub fn tokenize(&self, img: &Image, t: f64) -> Result<DenseMatrix> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::shape(format!(
                "plane is {}x{}, net expects {}x{}",
                img.height(),
                img.width(),
                self.height,
                self.width
            )));
        }
        let (gy, gx) = self.grid();
        let p = self.patch;
        let pf = self.patch_features();
        Ok(DenseMatrix::from_fn(self.tokens(), self.token_features(), |tok, f| {
            let (ty, tx) = (tok / gx, tok % gx);
            if f < pf {
                let (c, rest) = (f / (p * p), f % (p * p));
                img.get(c, ty * p + rest / p, tx * p + rest % p)
            } else {
                match f - pf {
                    0 => t,
                    1 => 1.0,
                    2 => (ty as f64 + 0.5) / gy as f64 * 2.0 - 1.0,
                    _ => (tx as f64 + 0.5) / gx as f64 * 2.0 - 1.0,
                }
            }
        }))
    }

    /// Inverse of the pixel part of [`tokenize`](Self::tokenize).
    pub fn untokenize(&self, tokens: &DenseMatrix) -> Result<Image> {
        if tokens.shape() != (self.tokens(), self.patch_features()) {
            return Err(Error::shape("token block does not match the patch grid"));
        }
        let (_, gx) = self.grid();
        let p = self.patch;
        Ok(Image::from_fn(self.height, self.width, |c, y, x| {
            let tok = (y / p) * gx + x / p;
            tokens[(tok, c * p * p + (y % p) * p + x % p)]
        }))
    }

    /// Pixel part of [`tokenize`](Self::tokenize), used to route image-space
    /// gradients onto output tokens.
    pub fn image_to_patches(&self, img: &Image) -> Result<DenseMatrix> {
        let full = self.tokenize(img, 0.0)?;
        let pf = self.patch_features();
        Ok(DenseMatrix::from_fn(self.tokens(), pf, |i, j| full[(i, j)]))
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("patch", self.patch.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("heads", self.heads.to_string()),
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Source of the linear maps inside the net.
pub(crate) trait LinearStack {
    type Grads;

    fn forward(&self, layer: usize, xs: &[DenseMatrix]) -> Result<Vec<DenseMatrix>>;

    /// Returns input gradients and accumulates parameter gradients into `grads`.
    fn backward(&self, layer: usize, xs: &[DenseMatrix], gs: &[DenseMatrix], grads: &mut Self::Grads) -> Result<Vec<DenseMatrix>>;
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Vec<DenseMatrix>>,
    pre_mlp1: Vec<DenseMatrix>,
    pre_mlp2: Vec<DenseMatrix>,
    qkv: [Vec<DenseMatrix>; 3],
    attention: Vec<AttentionCache>,
}

fn add_all(a: &mut [DenseMatrix], b: &[DenseMatrix]) -> Result<()> {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y)?;
    }
    Ok(())
}

pub(crate) fn run_forward<S: LinearStack>(
    cfg: &NetConfig,
    stack: &S,
    tokens: Vec<DenseMatrix>,
) -> Result<(Vec<DenseMatrix>, ForwardCache)> {
    let mut layer_inputs: Vec<Vec<DenseMatrix>> = Vec::with_capacity(LAYER_COUNT);
    let mut apply = |layer: usize, xs: Vec<DenseMatrix>| -> Result<Vec<DenseMatrix>> {
        debug_assert_eq!(layer_inputs.len(), layer);
        let ys = stack.forward(layer, &xs)?;
        layer_inputs.push(xs);
        Ok(ys)
    };

    let embedded = apply(EMBED, tokens)?;
    let pre_mlp1 = apply(MLP1_UP, embedded.clone())?;
    let act1 = pre_mlp1.iter().map(|a| a.map(gelu)).collect();
    let mut h1 = embedded;
    add_all(&mut h1, &apply(MLP1_DOWN, act1)?)?;

    let q = apply(QUERY, h1.clone())?;
    let k = apply(KEY, h1.clone())?;
    let v = apply(VALUE, h1.clone())?;
    let mut mixed = Vec::with_capacity(q.len());
    let mut attention = Vec::with_capacity(q.len());
    for ((qi, ki), vi) in q.iter().zip(&k).zip(&v) {
        let (o, c) = attend(qi, ki, vi, cfg.heads)?;
        mixed.push(o);
        attention.push(c);
    }
    let mut h2 = h1;
    add_all(&mut h2, &apply(ATTN_OUT, mixed)?)?;

    let pre_mlp2 = apply(MLP2_UP, h2.clone())?;
    let act2 = pre_mlp2.iter().map(|a| a.map(gelu)).collect();
    let mut h3 = h2;
    add_all(&mut h3, &apply(MLP2_DOWN, act2)?)?;

    let out = apply(UNEMBED, h3)?;
    Ok((
        out,
        ForwardCache {
            layer_inputs,
            pre_mlp1,
            pre_mlp2,
            qkv: [q, k, v],
            attention,
        },
    ))
}

fn gelu_backward(grads: Vec<DenseMatrix>, pre: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
    grads
        .iter()
        .zip(pre)
        .map(|(g, a)| g.hadamard(&a.map(gelu_grad)))
        .collect()
}

pub(crate) fn run_backward<S: LinearStack>(
    stack: &S,
    cache: &ForwardCache,
    grad_out: &[DenseMatrix],
    grads: &mut S::Grads,
) -> Result<()> {
    let inputs = &cache.layer_inputs;
    let mut back = |layer: usize, gs: &[DenseMatrix]| stack.backward(layer, &inputs[layer], gs, grads);

    let g_h3 = back(UNEMBED, grad_out)?;
    let g_act2 = back(MLP2_DOWN, &g_h3)?;
    let g_pre2 = gelu_backward(g_act2, &cache.pre_mlp2)?;
    let mut g_h2 = g_h3;
    add_all(&mut g_h2, &back(MLP2_UP, &g_pre2)?)?;

    let g_mixed = back(ATTN_OUT, &g_h2)?;
    let mut dq = Vec::new();
    let mut dk = Vec::new();
    let mut dv = Vec::new();
    for (i, g) in g_mixed.iter().enumerate() {
        let (q, k, v) = (&cache.qkv[0][i], &cache.qkv[1][i], &cache.qkv[2][i]);
        let (a, b, c) = attend_backward(q, k, v, &cache.attention[i], g)?;
        dq.push(a);
        dk.push(b);
        dv.push(c);
    }
    let mut g_h1 = g_h2;
    add_all(&mut g_h1, &back(QUERY, &dq)?)?;
    add_all(&mut g_h1, &back(KEY, &dk)?)?;
    add_all(&mut g_h1, &back(VALUE, &dv)?)?;

    let g_act1 = back(MLP1_DOWN, &g_h1)?;
    let g_pre1 = gelu_backward(g_act1, &cache.pre_mlp1)?;
    let mut g_embedded = g_h1;
    add_all(&mut g_embedded, &back(MLP1_UP, &g_pre1)?)?;
    back(EMBED, &g_embedded)?;
    Ok(())
}

/// Trainable dense weights of the unadapted base model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNet {
    pub config: NetConfig,
    pub weights: Vec<DenseMatrix>,
    /// Seed the weights were initialized from.
    pub seed: u64,
}

impl BaseNet {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let weights = config
            .layer_shapes()
            .iter()
            .map(|&(m, n)| gaussian(m, n, &mut rng, 1.0 / (n as f64).sqrt()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BaseNet { config, weights, seed })
    }

    /// One velocity prediction per plane; planes are handled independently.
    pub fn predict(&self, planes: &[Image], times: &[f64]) -> Result<Vec<Image>> {
        let tokens = planes
            .iter()
            .zip(times)
            .map(|(p, &t)| self.config.tokenize(p, t))
            .collect::<Result<Vec<_>>>()?;
        let (out, _) = run_forward(&self.config, &BaseStack { weights: &self.weights }, tokens)?;
        out.iter().map(|o| self.config.untokenize(o)).collect()
    }

    pub(crate) fn forward_tokens(&self, tokens: Vec<DenseMatrix>) -> Result<(Vec<DenseMatrix>, ForwardCache)> {
        run_forward(&self.config, &BaseStack { weights: &self.weights }, tokens)
    }

    /// Weight gradients for upstream `grad_out`, one matrix per layer.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        let mut grads: Vec<DenseMatrix> = self
            .config
            .layer_shapes()
            .iter()
            .map(|&(m, n)| DenseMatrix::zeros(m, n))
            .collect();
        run_backward(&BaseStack { weights: &self.weights }, cache, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Frozen-only single-teammate checkpoint of the base weights.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let layers = self
            .weights
            .iter()
            .map(|w| {
                TeamworkAdapter::new(
                    w.clone(),
                    vec![DenseMatrix::zeros(w.rows(), 1)],
                    vec![DenseMatrix::zeros(1, w.cols())],
                    AdapterMode::FrozenOnly,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Checkpoint::new(layers)
    }

    pub fn from_checkpoint(config: NetConfig, ckpt: &Checkpoint, seed: u64) -> Result<Self> {
        check_layer_shapes(&config, &ckpt.layers)?;
        Ok(BaseNet {
            config,
            weights: ckpt.layers.iter().map(|l| l.weight().clone()).collect(),
            seed,
        })
    }
}

fn check_layer_shapes(config: &NetConfig, layers: &[TeamworkAdapter]) -> Result<()> {
    config.validate()?;
    let shapes = config.layer_shapes();
    if layers.len() != LAYER_COUNT {
        return Err(Error::shape(format!("expected {LAYER_COUNT} layers, got {}", layers.len())));
    }
    for (i, (l, s)) in layers.iter().zip(shapes).enumerate() {
        if l.weight().shape() != s {
            return Err(Error::shape(format!(
                "layer {i} is {}x{}, net config wants {}x{}",
                l.out_dim(),
                l.in_dim(),
                s.0,
                s.1
            )));
        }
    }
    Ok(())
}

struct BaseStack<'a> {
    weights: &'a [DenseMatrix],
}

impl LinearStack for BaseStack<'_> {
    type Grads = Vec<DenseMatrix>;

    fn forward(&self, layer: usize, xs: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        xs.iter().map(|x| matmul_transb(x, &self.weights[layer])).collect()
    }

    fn backward(&self, layer: usize, xs: &[DenseMatrix], gs: &[DenseMatrix], grads: &mut Vec<DenseMatrix>) -> Result<Vec<DenseMatrix>> {
        for (x, g) in xs.iter().zip(gs) {
            grads[layer].add_assign(&matmul_transa(g, x)?)?;
        }
        gs.iter().map(|g| matmul(g, &self.weights[layer])).collect()
    }
}

/// Accumulated factor gradients: `[layer][teammate]`, `None` where a
/// teammate was never active.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads {
    pub a: Vec<Vec<Option<DenseMatrix>>>,
    pub b: Vec<Vec<Option<DenseMatrix>>>,
}

impl FactorGrads {
    pub fn new(layers: usize, team_size: usize) -> Self {
        FactorGrads {
            a: vec![vec![None; team_size]; layers],
            b: vec![vec![None; team_size]; layers],
        }
    }

    fn accumulate(slot: &mut Option<DenseMatrix>, g: &DenseMatrix) -> Result<()> {
        match slot {
            Some(acc) => acc.add_assign(g),
            None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn add(&mut self, other: &FactorGrads) -> Result<()> {
        for (mine, theirs) in self.a.iter_mut().chain(self.b.iter_mut()).zip(other.a.iter().chain(&other.b)) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                if let Some(t) = t {
                    Self::accumulate(m, t)?;
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.a.iter_mut().chain(self.b.iter_mut()).flatten().flatten() {
            g.scale(alpha);
        }
    }

    /// Largest absolute entry over every gradient of `teammate`.
    pub fn teammate_max_abs(&self, teammate: usize) -> f64 {
        self.a
            .iter()
            .chain(&self.b)
            .filter_map(|l| l[teammate].as_ref())
            .map(DenseMatrix::max_abs)
            .fold(0.0, f64::max)
    }
}

struct AdaptedStack<'a> {
    layers: &'a [TeamworkAdapter],
    mask: &'a ActivationMask,
}

impl LinearStack for AdaptedStack<'_> {
    type Grads = FactorGrads;

    fn forward(&self, layer: usize, xs: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        self.layers[layer].forward(xs, self.mask)
    }

    fn backward(&self, layer: usize, xs: &[DenseMatrix], gs: &[DenseMatrix], grads: &mut FactorGrads) -> Result<Vec<DenseMatrix>> {
        let g = self.layers[layer].backward_tokens(xs, gs, self.mask)?;
        for (k, &t) in g.teammates.iter().enumerate() {
            if let Some(ga) = g.grad_a.get(k) {
                FactorGrads::accumulate(&mut grads.a[layer][t], ga)?;
            }
            if let Some(gb) = g.grad_b.get(k) {
                FactorGrads::accumulate(&mut grads.b[layer][t], gb)?;
            }
        }
        Ok(g.grad_x)
    }
}

/// The adapted team denoiser: frozen base weights inside one adapter per
/// linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub config: NetConfig,
    layers: Vec<TeamworkAdapter>,
}

impl DenoiserNet {
    /// Wraps every base layer in an adapter with fresh factors.
    pub fn from_base(base: &BaseNet, team_size: usize, rank: usize, mode: AdapterMode, rng: &mut Rng) -> Result<Self> {
        let layers = base
            .weights
            .iter()
            .map(|w| TeamworkAdapter::init(w.clone(), team_size, rank, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenoiserNet {
            config: base.config,
            layers,
        })
    }

    pub fn from_layers(config: NetConfig, layers: Vec<TeamworkAdapter>) -> Result<Self> {
        check_layer_shapes(&config, &layers)?;
        let t = layers[0].team_size();
        if layers.iter().any(|l| l.team_size() != t) {
            return Err(Error::shape("layers disagree on team size"));
        }
        Ok(DenoiserNet { config, layers })
    }

    pub fn from_checkpoint(config: NetConfig, ckpt: Checkpoint) -> Result<Self> {
        Self::from_layers(config, ckpt.layers)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.layers.clone())
    }

    pub fn layers(&self) -> &[TeamworkAdapter] {
        &self.layers
    }

    /// Mutable adapters; the frozen weights stay read-only.
    pub fn layers_mut(&mut self) -> &mut [TeamworkAdapter] {
        &mut self.layers
    }

    pub fn team_size(&self) -> usize {
        self.layers[0].team_size()
    }

    pub fn rank(&self) -> usize {
        self.layers[0].rank()
    }

    pub fn mode(&self) -> AdapterMode {
        self.layers[0].mode()
    }

    fn tokens_for(&self, planes: &[Image], times: &[f64], mask: &ActivationMask) -> Result<Vec<DenseMatrix>> {
        if planes.len() != mask.active_count() || times.len() != planes.len() {
            return Err(Error::shape(format!(
                "{} planes and {} times for {} active teammates",
                planes.len(),
                times.len(),
                mask.active_count()
            )));
        }
        planes
            .iter()
            .zip(times)
            .map(|(p, &t)| self.config.tokenize(p, t))
            .collect()
    }

    /// Velocity predictions for the active teammates, in index order.
    pub fn predict(&self, planes: &[Image], times: &[f64], mask: &ActivationMask) -> Result<Vec<Image>> {
        let (out, _) = self.forward_tokens(self.tokens_for(planes, times, mask)?, mask)?;
        out.iter().map(|o| self.config.untokenize(o)).collect()
    }

    pub fn forward_tokens(&self, tokens: Vec<DenseMatrix>, mask: &ActivationMask) -> Result<(Vec<DenseMatrix>, ForwardCache)> {
        let stack = AdaptedStack {
            layers: &self.layers,
            mask,
        };
        run_forward(&self.config, &stack, tokens)
    }

    /// Forward pass that keeps what [`backward`](Self::backward) needs.
    pub fn forward_train(&self, planes: &[Image], times: &[f64], mask: &ActivationMask) -> Result<(Vec<DenseMatrix>, ForwardCache)> {
        self.forward_tokens(self.tokens_for(planes, times, mask)?, mask)
    }

    /// Factor gradients for upstream output-token gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[DenseMatrix], mask: &ActivationMask) -> Result<FactorGrads> {
        let mut grads = FactorGrads::new(LAYER_COUNT, self.team_size());
        let stack = AdaptedStack {
            layers: &self.layers,
            mask,
        };
        run_backward(&stack, cache, grad_out, &mut grads)?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            height: 8,
            width: 8,
            patch: 4,
            model_dim: 8,
            hidden_dim: 12,
            heads: 2,
        }
    }

    fn random_image(cfg: &NetConfig, rng: &mut Rng) -> Image {
        Image::from_fn(cfg.height, cfg.width, |_, _, _| rng.normal())
    }

    #[test]
    fn tokenize_round_trips_pixels() {
        let cfg = tiny();
        let mut rng = Rng::new(1);
        let img = random_image(&cfg, &mut rng);
        let tok = cfg.tokenize(&img, 0.25).unwrap();
        assert_eq!(tok.shape(), (4, 3 * 16 + 4));
        assert_eq!(tok[(3, 48)], 0.25);
        assert_eq!(tok[(3, 49)], 1.0);
        let back = cfg.untokenize(&cfg.image_to_patches(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    /// Finite differences on a scalar loss `sum(out * w)` over factor entries.
    #[test]
    fn factor_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let base = BaseNet::init(cfg, 3).unwrap();
        let mut net = DenoiserNet::from_base(&base, 3, 2, AdapterMode::Teamwork, &mut rng).unwrap();
        for l in net.layers_mut() {
            for i in 0..3 {
                *l.factor_b_mut(i) = gaussian(2, l.in_dim(), &mut rng, 0.3).unwrap();
            }
        }
        let mask = ActivationMask::from_indices(3, &[0, 2]).unwrap();
        let planes = vec![random_image(&cfg, &mut rng), random_image(&cfg, &mut rng)];
        let times = [0.0, 0.6];
        let weights: Vec<DenseMatrix> = (0..2).map(|_| gaussian(4, 48, &mut rng, 1.0).unwrap()).collect();
        let loss = |n: &DenoiserNet| -> f64 {
            let (out, _) = n.forward_train(&planes, &times, &mask).unwrap();
            out.iter().zip(&weights).map(|(o, w)| o.hadamard(w).unwrap().sum()).sum()
        };
        let (_, cache) = net.forward_train(&planes, &times, &mask).unwrap();
        let grads = net.backward(&cache, &weights, &mask).unwrap();
        assert!(grads.a[0][1].is_none());
        let h = 1e-5;
        for layer in [EMBED, MLP1_DOWN, KEY, ATTN_OUT, UNEMBED] {
            for teammate in [0, 2] {
                for which in 0..2 {
                    let g = if which == 0 { &grads.a[layer][teammate] } else { &grads.b[layer][teammate] };
                    let g = g.as_ref().unwrap();
                    for idx in [0, g.data().len() / 2, g.data().len() - 1] {
                        let mut p = net.clone();
                        let mut m = net.clone();
                        let (pf, mf) = if which == 0 {
                            (p.layers_mut()[layer].factor_a_mut(teammate), m.layers_mut()[layer].factor_a_mut(teammate))
                        } else {
                            (p.layers_mut()[layer].factor_b_mut(teammate), m.layers_mut()[layer].factor_b_mut(teammate))
                        };
                        pf.data_mut()[idx] += h;
                        mf.data_mut()[idx] -= h;
                        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                        let an = g.data()[idx];
                        assert!(
                            (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                            "layer {layer} teammate {teammate} {which} idx {idx}: fd {fd} vs {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn base_weight_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = Rng::new(4);
        let base = BaseNet::init(cfg, 5).unwrap();
        let plane = random_image(&cfg, &mut rng);
        let w = gaussian(4, 48, &mut rng, 1.0).unwrap();
        let tokens = vec![cfg.tokenize(&plane, 0.3).unwrap()];
        let loss = |b: &BaseNet| b.forward_tokens(tokens.clone()).unwrap().0[0].hadamard(&w).unwrap().sum();
        let (_, cache) = base.forward_tokens(tokens.clone()).unwrap();
        let grads = base.backward(&cache, &[w.clone()]).unwrap();
        for layer in [EMBED, QUERY, MLP2_UP, UNEMBED] {
            for idx in [0, 7, 20] {
                let mut p = base.clone();
                p.weights[layer].data_mut()[idx] += 1e-5;
                let mut m = base.clone();
                m.weights[layer].data_mut()[idx] -= 1e-5;
                let fd = (loss(&p) - loss(&m)) / 2e-5;
                let an = grads[layer].data()[idx];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{layer}/{idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn fresh_adapters_reproduce_the_base() {
        let cfg = tiny();
        let mut rng = Rng::new(6);
        let base = BaseNet::init(cfg, 7).unwrap();
        let net = DenoiserNet::from_base(&base, 2, 2, AdapterMode::Teamwork, &mut rng).unwrap();
        let planes = vec![random_image(&cfg, &mut rng), random_image(&cfg, &mut rng)];
        let teamed = net.predict(&planes, &[0.2, 0.9], &ActivationMask::all(2)).unwrap();
        let alone = base.predict(&planes, &[0.2, 0.9]).unwrap();
        for (a, b) in teamed.iter().zip(&alone) {
            assert!(a.rmse(b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_restore_nets() {
        let cfg = tiny();
        let base = BaseNet::init(cfg, 8).unwrap();
        let ckpt = base.to_checkpoint().unwrap();
        assert_eq!(BaseNet::from_checkpoint(cfg, &ckpt, 8).unwrap(), base);
        let other = NetConfig { model_dim: 16, ..cfg };
        assert!(BaseNet::from_checkpoint(other, &ckpt, 8).is_err());
        let net = DenoiserNet::from_base(&base, 3, 2, AdapterMode::PerInstanceLora, &mut Rng::new(0)).unwrap();
        assert_eq!(DenoiserNet::from_checkpoint(cfg, net.to_checkpoint().unwrap()).unwrap(), net);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig { patch: 3, ..tiny() }.validate().is_err());
        assert!(NetConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
        assert_eq!(NetConfig::default().tokens(), 64);
    }
}
