//! Coordinated low-rank adaptation of a single linear layer.
//!
//! A team of `T` instances shares one frozen weight `W` (m x n). Each
//! teammate `i` owns factors `A_i` (m x r) and `B_i` (r x n). The joint
//! offset over the concatenated team is the dense rank-r matrix
//! `[A_1; ...; A_T] [B_1 ... B_T]`, so output `i` reads every input `j`
//! through the block `A_i B_j`. Evaluation never forms that matrix: the
//! shared code `s = sum_j B_j x_j` is computed once and each teammate adds
//! `A_i s` to its frozen product, which keeps the cost linear in `T`.

mod checkpoint;
mod forward;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{gaussian, DenseMatrix, Rng};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::TeamGrads;

/// Team geometry shared by every adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeamConfig {
    pub channels: usize,
    pub team_size: usize,
    pub rank: usize,
}

impl TeamConfig {
    /// One teammate per triplet of channels.
    pub fn new(channels: usize, rank: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channel count must be positive"));
        }
        if rank == 0 {
            return Err(Error::param("rank must be at least 1"));
        }
        Ok(TeamConfig {
            channels,
            team_size: channels.div_ceil(3),
            rank,
        })
    }

    pub fn with_team_size(team_size: usize, rank: usize) -> Result<Self> {
        Self::new(team_size * 3, rank)
    }
}

/// How the factor lists enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterMode {
    /// Dense cross-teammate offset `[A_i] [B_j]`.
    Teamwork,
    /// Independent LoRA per teammate: block-diagonal `A_i B_i`.
    PerInstanceLora,
    /// Frozen weight only; factors are ignored.
    FrozenOnly,
}

impl AdapterMode {
    pub fn tag(self) -> u8 {
        match self {
            AdapterMode::Teamwork => 0,
            AdapterMode::PerInstanceLora => 1,
            AdapterMode::FrozenOnly => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(AdapterMode::Teamwork),
            1 => Ok(AdapterMode::PerInstanceLora),
            2 => Ok(AdapterMode::FrozenOnly),
            t => Err(Error::format(format!("unknown adapter mode tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::Teamwork => "teamwork",
            AdapterMode::PerInstanceLora => "per-instance",
            AdapterMode::FrozenOnly => "frozen",
        }
    }
}

impl std::fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teamwork" => Ok(AdapterMode::Teamwork),
            "per-instance" | "per-instance-lora" | "lora" => Ok(AdapterMode::PerInstanceLora),
            "frozen" => Ok(AdapterMode::FrozenOnly),
            other => Err(Error::param(format!("unknown adapter mode {other:?} (expected teamwork, per-instance or frozen)"))),
        }
    }
}

/// Which teammates take part in a pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationMask {
    active: Vec<bool>,
}

impl ActivationMask {
    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::param("activation mask has no active teammate"));
        }
        Ok(ActivationMask { active })
    }

    pub fn all(team_size: usize) -> Self {
        assert!(team_size > 0);
        ActivationMask {
            active: vec![true; team_size],
        }
    }

    pub fn only(team_size: usize, index: usize) -> Result<Self> {
        Self::from_indices(team_size, &[index])
    }

    pub fn from_indices(team_size: usize, indices: &[usize]) -> Result<Self> {
        let mut active = vec![false; team_size];
        for &i in indices {
            if i >= team_size {
                return Err(Error::param(format!("teammate {i} out of range for team of {team_size}")));
            }
            active[i] = true;
        }
        Self::new(active)
    }

    pub fn team_size(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active.get(i).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    /// Active teammate indices in increasing order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }
}

impl std::fmt::Display for ActivationMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &a in &self.active {
            f.write_str(if a { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Frozen weight plus one pair of low-rank factors per teammate.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamworkAdapter {
    weight: DenseMatrix,
    factors_a: Vec<DenseMatrix>,
    factors_b: Vec<DenseMatrix>,
    mode: AdapterMode,
    scale: f64,
}

impl TeamworkAdapter {
    pub fn new(
        weight: DenseMatrix,
        factors_a: Vec<DenseMatrix>,
        factors_b: Vec<DenseMatrix>,
        mode: AdapterMode,
    ) -> Result<Self> {
        let (m, n) = weight.shape();
        if factors_a.is_empty() || factors_a.len() != factors_b.len() {
            return Err(Error::shape(format!(
                "need one A and one B per teammate, got {} and {}",
                factors_a.len(),
                factors_b.len()
            )));
        }
        let r = factors_a[0].cols();
        for (i, (a, b)) in factors_a.iter().zip(&factors_b).enumerate() {
            if a.shape() != (m, r) || b.shape() != (r, n) {
                return Err(Error::shape(format!(
                    "teammate {i}: A is {}x{}, B is {}x{}, expected {m}x{r} and {r}x{n}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        if r >= m.min(n) {
            warn!("rank {r} is not below min(m, n) = {} for a {m}x{n} layer", m.min(n));
        }
        Ok(TeamworkAdapter {
            weight,
            factors_a,
            factors_b,
            mode,
            scale: 1.0,
        })
    }

    /// LoRA-style start: `A_i ~ N(0, 1/r)`, `B_i = 0`, so the adapted layer
    /// initially reproduces the frozen one.
    pub fn init(weight: DenseMatrix, team_size: usize, rank: usize, mode: AdapterMode, rng: &mut Rng) -> Result<Self> {
        if team_size == 0 || rank == 0 {
            return Err(Error::param("team size and rank must be positive"));
        }
        let (m, n) = weight.shape();
        let std = (1.0 / rank as f64).sqrt();
        let factors_a = (0..team_size)
            .map(|_| gaussian(m, rank, rng, std))
            .collect::<Result<Vec<_>>>()?;
        let factors_b = vec![DenseMatrix::zeros(rank, n); team_size];
        Self::new(weight, factors_a, factors_b, mode)
    }

    /// Multiplier on the offset term; 1 unless set.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn factors_a(&self) -> &[DenseMatrix] {
        &self.factors_a
    }

    pub fn factors_b(&self) -> &[DenseMatrix] {
        &self.factors_b
    }

    pub fn factor_a_mut(&mut self, i: usize) -> &mut DenseMatrix {
        &mut self.factors_a[i]
    }

    pub fn factor_b_mut(&mut self, i: usize) -> &mut DenseMatrix {
        &mut self.factors_b[i]
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: AdapterMode) {
        self.mode = mode;
    }

    pub fn team_size(&self) -> usize {
        self.factors_a.len()
    }

    pub fn rank(&self) -> usize {
        self.factors_a[0].cols()
    }

    /// Output width `m`.
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Input width `n`.
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn check_mask(&self, mask: &ActivationMask) -> Result<Vec<usize>> {
        if mask.team_size() != self.team_size() {
            return Err(Error::shape(format!(
                "mask covers {} teammates, adapter has {}",
                mask.team_size(),
                self.team_size()
            )));
        }
        let active = mask.active_indices();
        if active.is_empty() {
            return Err(Error::param("activation mask has no active teammate"));
        }
        Ok(active)
    }

    /// Adapter holding only the active teammates' factors, in index order.
    /// Any pass under `mask` is the same computation as the full-mask pass
    /// of the returned adapter.
    pub fn restrict(&self, mask: &ActivationMask) -> Result<Self> {
        let active = self.check_mask(mask)?;
        Ok(TeamworkAdapter {
            weight: self.weight.clone(),
            factors_a: active.iter().map(|&i| self.factors_a[i].clone()).collect(),
            factors_b: active.iter().map(|&i| self.factors_b[i].clone()).collect(),
            mode: self.mode,
            scale: self.scale,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.team_size() * self.rank() * (self.out_dim() + self.in_dim())
    }
}
