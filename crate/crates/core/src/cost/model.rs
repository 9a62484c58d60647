//! Closed-form MAC predictions and instrumented scaling sweeps.
//!
//! Linear-layer schemes are predicted exactly. Attention predictions count
//! only the two token-mixing products (`2 N^2 d`); the measured value also
//! carries the softmax normalization, so the two differ by `heads / (2 d)`.
//! Training cost is reported as three times the forward cost.

use std::fmt;
use std::str::FromStr;

use crate::adapter::{ActivationMask, AdapterMode, TeamworkAdapter};
use crate::baselines::{AttentionBaseline, AttentionSpec};
use crate::cost::ledger::{measure, MacCounts};
use crate::error::{Error, Result};
use crate::tensor::{gaussian, DenseMatrix, Rng};

/// Multiplier from forward MACs to forward + backward MACs.
pub const TRAINING_FACTOR: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostScheme {
    TeamworkUnmat,
    TeamworkMat,
    PerInstanceLora,
    SelfAttention,
    JointAttention,
}

impl CostScheme {
    pub const ALL: [CostScheme; 5] = [
        CostScheme::TeamworkUnmat,
        CostScheme::TeamworkMat,
        CostScheme::PerInstanceLora,
        CostScheme::SelfAttention,
        CostScheme::JointAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostScheme::TeamworkUnmat => "teamwork-unmat",
            CostScheme::TeamworkMat => "teamwork-mat",
            CostScheme::PerInstanceLora => "per-instance-lora",
            CostScheme::SelfAttention => "self-attention",
            CostScheme::JointAttention => "joint-attention",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, CostScheme::SelfAttention | CostScheme::JointAttention)
    }
}

impl fmt::Display for CostScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teamwork-unmat" | "teamwork" | "unmaterialized" => Ok(CostScheme::TeamworkUnmat),
            "teamwork-mat" | "materialized" => Ok(CostScheme::TeamworkMat),
            "per-instance-lora" | "per-instance" | "lora" => Ok(CostScheme::PerInstanceLora),
            "self-attention" | "batching" => Ok(CostScheme::SelfAttention),
            "joint-attention" | "joint" => Ok(CostScheme::JointAttention),
            other => Err(Error::param(format!("unknown cost scheme {other:?}"))),
        }
    }
}

fn positive(dims: &[(&str, usize)]) -> Result<()> {
    for (name, v) in dims {
        if *v == 0 {
            return Err(Error::param(format!("{name} must be positive")));
        }
    }
    Ok(())
}

/// Forward MACs of one adapted `m x n` layer applied to one feature vector
/// per teammate.
pub fn predict_linear_cost(scheme: CostScheme, team_size: usize, m: usize, n: usize, rank: usize) -> Result<u64> {
    positive(&[("T", team_size), ("m", m), ("n", n), ("r", rank)])?;
    let (t, m, n, r) = (team_size as u64, m as u64, n as u64, rank as u64);
    match scheme {
        CostScheme::TeamworkUnmat | CostScheme::PerInstanceLora => Ok(t * m * n + t * r * (m + n)),
        CostScheme::TeamworkMat => Ok(t * t * m * n),
        other => Err(Error::param(format!("{other} is not a linear-layer scheme"))),
    }
}

/// Token-mixing MACs of one attention layer (scores plus weighted values).
pub fn predict_attention_cost(scheme: CostScheme, team_size: usize, tokens: usize, dim: usize) -> Result<u64> {
    positive(&[("T", team_size), ("tokens", tokens), ("dim", dim)])?;
    let (t, n, d) = (team_size as u64, tokens as u64, dim as u64);
    match scheme {
        CostScheme::SelfAttention => Ok(t * 2 * n * n * d),
        CostScheme::JointAttention => Ok(2 * (t * n) * (t * n) * d),
        other => Err(Error::param(format!("{other} is not an attention scheme"))),
    }
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub scheme: CostScheme,
    pub team_size: usize,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Closed-form forward MACs.
    pub predicted: u64,
    /// Ledger MACs of the category the closed form describes.
    pub measured: u64,
    /// Everything the ledger saw, projections included.
    pub counts: MacCounts,
}

impl CostReport {
    pub fn training_predicted(&self) -> u64 {
        TRAINING_FACTOR * self.predicted
    }

    pub fn relative_error(&self) -> f64 {
        (self.measured as f64 - self.predicted as f64).abs() / self.predicted as f64
    }

    /// Line-delimited record, `key=value` pairs separated by single spaces.
    pub fn to_record(&self) -> String {
        format!(
            "scheme={} T={} m={} n={} r={} tokens={} dim={} predicted_macs={} measured_macs={} total_macs={} flops={} train_macs={}",
            self.scheme,
            self.team_size,
            self.m,
            self.n,
            self.rank,
            self.tokens,
            self.dim,
            self.predicted,
            self.measured,
            self.counts.total(),
            2 * self.counts.total(),
            self.training_predicted()
        )
    }
}

fn random_team_adapter(mode: AdapterMode, t: usize, m: usize, n: usize, r: usize, rng: &mut Rng) -> Result<TeamworkAdapter> {
    let w = gaussian(m, n, rng, 1.0)?;
    let a = (0..t).map(|_| gaussian(m, r, rng, 1.0)).collect::<Result<Vec<_>>>()?;
    let b = (0..t).map(|_| gaussian(r, n, rng, 1.0)).collect::<Result<Vec<_>>>()?;
    TeamworkAdapter::new(w, a, b, mode)
}

/// Runs one instrumented linear-layer forward over `tokens` tokens per teammate.
pub fn measure_linear(
    scheme: CostScheme,
    team_size: usize,
    m: usize,
    n: usize,
    rank: usize,
    tokens: usize,
    rng: &mut Rng,
) -> Result<CostReport> {
    let predicted = predict_linear_cost(scheme, team_size, m, n, rank)? * tokens as u64;
    let mode = match scheme {
        CostScheme::PerInstanceLora => AdapterMode::PerInstanceLora,
        _ => AdapterMode::Teamwork,
    };
    let adapter = random_team_adapter(mode, team_size, m, n, rank, rng)?;
    let xs = (0..team_size).map(|_| gaussian(tokens, n, rng, 1.0)).collect::<Result<Vec<_>>>()?;
    let mask = ActivationMask::all(team_size);
    let (out, counts) = measure(|| match scheme {
        CostScheme::TeamworkMat => adapter.forward_materialized_tokens(&xs, &mask),
        _ => adapter.forward(&xs, &mask),
    });
    out?;
    Ok(CostReport {
        scheme,
        team_size,
        m,
        n,
        rank,
        tokens,
        dim: n,
        predicted,
        measured: counts.linear(),
        counts,
    })
}

/// Runs one instrumented attention baseline forward.
pub fn measure_attention(scheme: CostScheme, team_size: usize, spec: AttentionSpec, rng: &mut Rng) -> Result<CostReport> {
    let predicted = predict_attention_cost(scheme, team_size, spec.token_count, spec.model_dim)?;
    let baseline = AttentionBaseline::new(spec, rng)?;
    let xs: Vec<DenseMatrix> = (0..team_size)
        .map(|_| gaussian(spec.token_count, spec.model_dim, rng, 1.0))
        .collect::<Result<_>>()?;
    let (out, counts) = measure(|| match scheme {
        CostScheme::JointAttention => baseline.joint_attention(&xs),
        _ => baseline.self_attention(&xs),
    });
    out?;
    Ok(CostReport {
        scheme,
        team_size,
        m: spec.model_dim,
        n: spec.model_dim,
        rank: 0,
        tokens: spec.token_count,
        dim: spec.model_dim,
        predicted,
        measured: counts.attention,
        counts,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::param("slope fit needs at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::param("log-log fit needs positive coordinates"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::param("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub team_sizes: Vec<usize>,
    pub schemes: Vec<CostScheme>,
    /// Linear layers are `dim x dim`; attention uses `dim` as model width.
    pub dim: usize,
    pub rank: usize,
    pub tokens: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            team_sizes: vec![1, 2, 4, 8, 16],
            schemes: vec![CostScheme::TeamworkUnmat, CostScheme::SelfAttention, CostScheme::JointAttention],
            dim: 32,
            rank: 16,
            tokens: 64,
            heads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub reports: Vec<CostReport>,
    /// Fitted log-log slope of measured MACs against `T`, per scheme.
    pub slopes: Vec<(CostScheme, f64)>,
}

impl SweepResult {
    pub fn slope(&self, scheme: CostScheme) -> Option<f64> {
        self.slopes.iter().find(|(s, _)| *s == scheme).map(|p| p.1)
    }

    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&r.to_record());
            out.push('\n');
        }
        for (s, slope) in &self.slopes {
            out.push_str(&format!("slope scheme={s} value={slope:.4}\n"));
        }
        out
    }

    /// Two-column `T measured_macs` blocks, one per scheme, separated by
    /// blank lines (gnuplot `index` layout).
    pub fn gnuplot_table(&self) -> String {
        let mut out = String::new();
        for (s, _) in &self.slopes {
            out.push_str(&format!("# {s}\n"));
            for r in self.reports.iter().filter(|r| r.scheme == *s) {
                out.push_str(&format!("{} {}\n", r.team_size, r.measured));
            }
            out.push_str("\n\n");
        }
        out
    }
}

/// Instrumented forwards for every scheme and team size, without fits.
pub fn measure_all(config: &SweepConfig) -> Result<Vec<CostReport>> {
    if config.team_sizes.is_empty() || config.team_sizes.contains(&0) {
        return Err(Error::param("team sizes must be positive"));
    }
    let spec = AttentionSpec::new(config.tokens, config.dim, config.heads)?;
    let mut rng = Rng::new(config.seed);
    let mut reports = Vec::new();
    for &scheme in &config.schemes {
        for &t in &config.team_sizes {
            reports.push(if scheme.is_attention() {
                measure_attention(scheme, t, spec, &mut rng)?
            } else {
                measure_linear(scheme, t, config.dim, config.dim, config.rank, config.tokens, &mut rng)?
            });
        }
    }
    Ok(reports)
}

/// [`measure_all`] plus a log-log slope per scheme.
pub fn scaling_sweep(config: &SweepConfig) -> Result<SweepResult> {
    let mut distinct = config.team_sizes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::param(format!(
            "scaling sweep needs at least 4 distinct team sizes, got {}",
            distinct.len()
        )));
    }
    let reports = measure_all(config)?;
    let slopes = config
        .schemes
        .iter()
        .map(|&scheme| {
            let points: Vec<(f64, f64)> = reports
                .iter()
                .filter(|r| r.scheme == scheme)
                .map(|r| (r.team_size as f64, r.measured as f64))
                .collect();
            Ok((scheme, loglog_slope(&points)?))
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult { reports, slopes })
}
