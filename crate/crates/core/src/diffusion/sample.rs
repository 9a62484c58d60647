//! Euler sampling of the flow ODE and evaluation against ground truth.

use std::fmt;
use std::str::FromStr;

use crate::adapter::ActivationMask;
use crate::diffusion::net::DenoiserNet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{recomposition_error, Planes, Role, Task};
use crate::tensor::Rng;

/// Uniform time grid from 1 down to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSchedule {
    steps: usize,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("sampling needs at least one step"));
        }
        Ok(NoiseSchedule { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Time at the start of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        1.0 - k as f64 / self.steps as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// The grid `0 = t_0 < ... < t_S = 1`; the sampler walks it backwards.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 / self.steps as f64).collect()
    }
}

/// What the sampler did in one Euler step.
#[derive(Debug)]
pub struct SamplerStep<'a> {
    pub step: usize,
    /// Time the velocity was evaluated at.
    pub time: f64,
    /// Active teammates in index order.
    pub active: &'a [usize],
    /// Planes fed to the net, one per active teammate.
    pub net_inputs: &'a [Image],
    /// Times fed to the net, one per active teammate.
    pub net_times: &'a [f64],
    /// Output-teammate states after the update.
    pub states: &'a [Image],
}

pub type Observer<'a> = dyn FnMut(&SamplerStep<'_>) + 'a;

fn check_inputs(net: &DenoiserNet, roles: &[Role], inputs: &[Option<Image>], mask: &ActivationMask) -> Result<()> {
    let team = net.team_size();
    if roles.len() != team || inputs.len() != team || mask.team_size() != team {
        return Err(Error::shape(format!(
            "net has {team} teammates, got {} roles, {} inputs, mask of {}",
            roles.len(),
            inputs.len(),
            mask.team_size()
        )));
    }
    for (i, role) in roles.iter().enumerate() {
        if *role == Role::Input && mask.is_active(i) && inputs[i].is_none() {
            return Err(Error::param(format!("active input teammate {i} has no plane")));
        }
    }
    if !(0..team).any(|i| roles[i] == Role::Output && mask.is_active(i)) {
        return Err(Error::param("no active output teammate to sample"));
    }
    Ok(())
}

/// Generates every active output teammate from noise, conditioned on the
/// active input planes (encoded to `[-1, 1]`). The result has one slot per
/// teammate; only active outputs are filled.
pub fn sample(
    net: &DenoiserNet,
    roles: &[Role],
    inputs: &[Option<Image>],
    schedule: NoiseSchedule,
    mask: &ActivationMask,
    rng: &mut Rng,
) -> Result<Vec<Option<Image>>> {
    sample_observed(net, roles, inputs, schedule, mask, rng, &mut |_| {})
}

pub fn sample_observed(
    net: &DenoiserNet,
    roles: &[Role],
    inputs: &[Option<Image>],
    schedule: NoiseSchedule,
    mask: &ActivationMask,
    rng: &mut Rng,
    observer: &mut Observer<'_>,
) -> Result<Vec<Option<Image>>> {
    check_inputs(net, roles, inputs, mask)?;
    let (h, w) = (net.config.height, net.config.width);
    let active = mask.active_indices();
    let outputs: Vec<usize> = active.iter().copied().filter(|&i| roles[i] == Role::Output).collect();
    let mut states: Vec<Image> = outputs
        .iter()
        .map(|_| Image::new(h, w, rng.normal_vec(3 * h * w)))
        .collect::<Result<_>>()?;
    let dt = schedule.dt();
    for k in 0..schedule.steps() {
        let t = schedule.time(k);
        let mut planes = Vec::with_capacity(active.len());
        let mut times = Vec::with_capacity(active.len());
        let mut next_out = 0;
        for &i in &active {
            match roles[i] {
                Role::Input => {
                    planes.push(inputs[i].clone().expect("checked above"));
                    times.push(0.0);
                }
                Role::Output => {
                    planes.push(states[next_out].clone());
                    times.push(t);
                    next_out += 1;
                }
            }
        }
        let velocities = net.predict(&planes, &times, mask)?;
        let mut next_out = 0;
        for (v, &i) in velocities.iter().zip(&active) {
            if roles[i] == Role::Output {
                let z = &mut states[next_out];
                for (zv, vv) in z.data_mut().iter_mut().zip(v.data()) {
                    *zv -= dt * vv;
                }
                next_out += 1;
            }
        }
        observer(&SamplerStep {
            step: k,
            time: t,
            active: &active,
            net_inputs: &planes,
            net_times: &times,
            states: &states,
        });
    }
    let mut result = vec![None; roles.len()];
    for (state, &i) in states.into_iter().zip(&outputs) {
        result[i] = Some(state);
    }
    Ok(result)
}

/// Which teammates run together at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMask {
    /// Every teammate in one joint pass.
    All,
    /// A single output teammate with all inputs.
    Only(usize),
    /// A chosen set; inputs are always added.
    Subset(Vec<usize>),
    /// Each output teammate sampled in its own pass with all inputs.
    Each,
}

impl EvalMask {
    /// Masks to sample with, in order. Each pass contributes the outputs it
    /// activates.
    pub fn passes(&self, roles: &[Role]) -> Result<Vec<ActivationMask>> {
        let team = roles.len();
        let inputs: Vec<usize> = (0..team).filter(|&i| roles[i] == Role::Input).collect();
        let with_inputs = |extra: &[usize]| -> Result<ActivationMask> {
            let mut idx = inputs.clone();
            for &e in extra {
                if e >= team {
                    return Err(Error::param(format!("teammate {e} out of range for a team of {team}")));
                }
                if !idx.contains(&e) {
                    idx.push(e);
                }
            }
            idx.sort_unstable();
            ActivationMask::from_indices(team, &idx)
        };
        let passes = match self {
            EvalMask::All => vec![ActivationMask::all(team)],
            EvalMask::Only(i) => vec![with_inputs(&[*i])?],
            EvalMask::Subset(list) => vec![with_inputs(list)?],
            EvalMask::Each => (0..team)
                .filter(|&i| roles[i] == Role::Output)
                .map(|i| with_inputs(&[i]))
                .collect::<Result<_>>()?,
        };
        for p in &passes {
            if !(0..team).any(|i| roles[i] == Role::Output && p.is_active(i)) {
                return Err(Error::param(format!("mask {self} activates no output teammate")));
            }
        }
        Ok(passes)
    }

    /// Parses `all`, `each`, `only:<name|idx>` or `subset:<a,b,...>`, where
    /// names come from `task`.
    pub fn parse(spec: &str, task: Task) -> Result<Self> {
        let names = task.plane_names();
        let index = |tok: &str| -> Result<usize> {
            let tok = tok.trim();
            tok.parse::<usize>()
                .ok()
                .or_else(|| names.iter().position(|n| *n == tok))
                .filter(|&i| i < names.len())
                .ok_or_else(|| {
                    Error::param(format!(
                        "unknown teammate {tok:?}; valid teammates: {} (or 0..{})",
                        names.join(", "),
                        names.len() - 1
                    ))
                })
        };
        match spec.split_once(':') {
            None if spec == "all" => Ok(EvalMask::All),
            None if spec == "each" => Ok(EvalMask::Each),
            Some(("only", who)) => Ok(EvalMask::Only(index(who)?)),
            Some(("subset", list)) => Ok(EvalMask::Subset(list.split(',').map(index).collect::<Result<_>>()?)),
            _ => Err(Error::param(format!("bad mask spec {spec:?}"))),
        }
    }
}

impl fmt::Display for EvalMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMask::All => write!(f, "all"),
            EvalMask::Each => write!(f, "each"),
            EvalMask::Only(i) => write!(f, "only:{i}"),
            EvalMask::Subset(list) => {
                let s: Vec<String> = list.iter().map(ToString::to_string).collect();
                write!(f, "subset:{}", s.join(","))
            }
        }
    }
}

impl FromStr for EvalMask {
    type Err = Error;

    /// Index-only form; use [`EvalMask::parse`] to accept plane names.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "all" => Ok(EvalMask::All),
            None if s == "each" => Ok(EvalMask::Each),
            Some(("only", i)) => i.parse().map(EvalMask::Only).map_err(|_| Error::param(format!("bad mask spec {s:?}"))),
            Some(("subset", l)) => l
                .split(',')
                .map(|i| i.trim().parse().map_err(|_| Error::param(format!("bad mask spec {s:?}"))))
                .collect::<Result<_>>()
                .map(EvalMask::Subset),
            _ => Err(Error::param(format!("bad mask spec {s:?}"))),
        }
    }
}

/// Errors averaged over the evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub samples: usize,
    /// Pixel RMSE in `[0, 1]` units per teammate; `None` when not generated.
    pub rmse: Vec<Option<f64>>,
    /// Mean recomposition error for decomposition runs that produced both factors.
    pub recomposition: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("task={} samples={}\n", self.task, self.samples);
        for (name, r) in self.task.plane_names().iter().zip(&self.rmse) {
            if let Some(r) = r {
                s.push_str(&format!("rmse.{name}={r:?}\n"));
            }
        }
        if let Some(r) = self.recomposition {
            s.push_str(&format!("recomposition={r:?}\n"));
        }
        s
    }
}

/// Samples outputs for every ground-truth sample (planes in `[0, 1]`) and
/// scores them. Predictions are decoded and clipped to `[0, 1]`.
pub fn evaluate(
    net: &DenoiserNet,
    task: Task,
    samples: &[Planes],
    eval_mask: &EvalMask,
    schedule: NoiseSchedule,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let roles = task.roles();
    let passes = eval_mask.passes(&roles)?;
    let team = roles.len();
    let mut sums = vec![0.0; team];
    let mut produced = vec![false; team];
    let mut recomposition = 0.0;
    let mut recomposed = false;
    if samples.is_empty() {
        return Err(Error::param("evaluation needs at least one sample"));
    }
    for (s, planes) in samples.iter().enumerate() {
        if planes.len() != team {
            return Err(Error::shape(format!("sample {s} has {} planes, task needs {team}", planes.len())));
        }
        let inputs: Vec<Option<Image>> = (0..team)
            .map(|i| (roles[i] == Role::Input).then(|| planes[i].encode()))
            .collect();
        let mut preds: Vec<Option<Image>> = vec![None; team];
        for (p, mask) in passes.iter().enumerate() {
            let mut pass_rng = rng.stream(((s as u64) << 8) | p as u64);
            let out = sample(net, &roles, &inputs, schedule, mask, &mut pass_rng)?;
            for (i, o) in out.into_iter().enumerate() {
                if let Some(img) = o {
                    preds[i] = Some(img.decode().map(|v| v.clamp(0.0, 1.0)));
                }
            }
        }
        for i in 0..team {
            if let Some(p) = &preds[i] {
                sums[i] += p.rmse(&planes[i])?;
                produced[i] = true;
            }
        }
        if task == Task::Decompose {
            if let (Some(a), Some(sh)) = (&preds[1], &preds[2]) {
                recomposition += recomposition_error(a, sh, &planes[0])?;
                recomposed = true;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        task,
        samples: samples.len(),
        rmse: (0..team).map(|i| produced[i].then(|| sums[i] / n)).collect(),
        recomposition: recomposed.then(|| recomposition / n),
    })
}
