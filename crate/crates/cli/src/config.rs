//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep their defaults. Serialization writes every
//! key in a fixed order, so a saved config parses back to the same value.

use std::fs;
use std::path::{Path, PathBuf};

use teamwork::adapter::AdapterMode;
use teamwork::diffusion::{AdamConfig, MaskPolicy, NetConfig, PretrainConfig, TrainConfig};
use teamwork::synth::{GenSpec, Role, Task};

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub roles: Vec<Role>,
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub regions: usize,
    pub light_smoothness: f64,
    pub patch: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub pretrain_steps: usize,
    pub rank: usize,
    pub mode: AdapterMode,
    pub steps: usize,
    pub accumulation: usize,
    pub dropout_prob: f64,
    pub mask_policy: MaskPolicy,
    pub lr: f64,
    pub sample_steps: usize,
    pub eval_count: usize,
    pub eval_seed: u64,
    pub data: PathBuf,
    pub base: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = Task::Decompose;
        RunConfig {
            task,
            roles: task.roles(),
            seed: 0,
            count: 1000,
            height: 16,
            width: 16,
            regions: GenSpec::default().num_regions,
            light_smoothness: GenSpec::default().light_smoothness,
            patch: 2,
            model_dim: 64,
            hidden_dim: 128,
            heads: 2,
            pretrain_steps: 2000,
            rank: 16,
            mode: AdapterMode::Teamwork,
            steps: 1000,
            accumulation: 16,
            dropout_prob: 0.0,
            mask_policy: MaskPolicy::Full,
            lr: 1e-3,
            sample_steps: 20,
            eval_count: 64,
            eval_seed: 1_000_000,
            data: PathBuf::from("data"),
            base: PathBuf::from("base.twrk"),
            checkpoint: PathBuf::from("adapter.twrk"),
        }
    }
}

fn role_list(roles: &[Role]) -> String {
    roles.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")
}

fn policy_name(p: MaskPolicy) -> &'static str {
    match p {
        MaskPolicy::Full => "full",
        MaskPolicy::Dropout => "dropout",
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::config(format!("bad value {value:?} for key {key}")))
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("roles", role_list(&self.roles)),
            ("seed", self.seed.to_string()),
            ("count", self.count.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("regions", self.regions.to_string()),
            ("light_smoothness", format!("{:?}", self.light_smoothness)),
            ("patch", self.patch.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("rank", self.rank.to_string()),
            ("mode", self.mode.to_string()),
            ("steps", self.steps.to_string()),
            ("accumulation", self.accumulation.to_string()),
            ("dropout_prob", format!("{:?}", self.dropout_prob)),
            ("mask_policy", policy_name(self.mask_policy).to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("sample_steps", self.sample_steps.to_string()),
            ("eval_count", self.eval_count.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("data", self.data.display().to_string()),
            ("base", self.base.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
        ]
    }

    /// Sets one key. Changing `task` resets `roles` to that task's topology.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        match key.trim() {
            "task" => {
                self.task = value.parse().map_err(|e: teamwork::Error| CliError::config(e.to_string()))?;
                self.roles = self.task.roles();
            }
            "roles" => {
                self.roles = value
                    .split(',')
                    .map(|r| match r.trim() {
                        "input" => Ok(Role::Input),
                        "output" => Ok(Role::Output),
                        other => Err(CliError::config(format!("unknown role {other:?} (expected input or output)"))),
                    })
                    .collect::<CliResult<_>>()?
            }
            "seed" => self.seed = parse_value("seed", value)?,
            "count" => self.count = parse_value("count", value)?,
            "height" => self.height = parse_value("height", value)?,
            "width" => self.width = parse_value("width", value)?,
            "regions" => self.regions = parse_value("regions", value)?,
            "light_smoothness" => self.light_smoothness = parse_value("light_smoothness", value)?,
            "patch" => self.patch = parse_value("patch", value)?,
            "model_dim" => self.model_dim = parse_value("model_dim", value)?,
            "hidden_dim" => self.hidden_dim = parse_value("hidden_dim", value)?,
            "heads" => self.heads = parse_value("heads", value)?,
            "pretrain_steps" => self.pretrain_steps = parse_value("pretrain_steps", value)?,
            "rank" => self.rank = parse_value("rank", value)?,
            "mode" => self.mode = value.parse().map_err(|e: teamwork::Error| CliError::config(e.to_string()))?,
            "steps" => self.steps = parse_value("steps", value)?,
            "accumulation" => self.accumulation = parse_value("accumulation", value)?,
            "dropout_prob" => self.dropout_prob = parse_value("dropout_prob", value)?,
            "mask_policy" => {
                self.mask_policy = value.parse().map_err(|e: teamwork::Error| CliError::config(e.to_string()))?
            }
            "lr" => self.lr = parse_value("lr", value)?,
            "sample_steps" => self.sample_steps = parse_value("sample_steps", value)?,
            "eval_count" => self.eval_count = parse_value("eval_count", value)?,
            "eval_seed" => self.eval_seed = parse_value("eval_seed", value)?,
            "data" => self.data = PathBuf::from(value),
            "base" => self.base = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            other => return Err(CliError::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(CliError::config(format!("line {}: duplicate key {key}", n + 1)));
            }
            seen.push(key);
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_text()).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.roles != self.task.roles() {
            let inputs = self.task.roles().iter().filter(|r| **r == Role::Input).count();
            return Err(CliError::config(format!(
                "roles {} do not fit task {}: it needs {} input and {} output teammates ({})",
                role_list(&self.roles),
                self.task,
                inputs,
                self.task.roles().len() - inputs,
                role_list(&self.task.roles())
            )));
        }
        if self.accumulation == 0 {
            return Err(CliError::config("accumulation must be at least 1"));
        }
        if self.rank == 0 {
            return Err(CliError::config("rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(CliError::config(format!("dropout_prob must be in [0, 1), got {}", self.dropout_prob)));
        }
        if self.sample_steps == 0 {
            return Err(CliError::config("sample_steps must be at least 1"));
        }
        self.net().validate().map_err(|e| CliError::config(e.to_string()))
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            num_regions: self.regions,
            light_smoothness: self.light_smoothness,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            height: self.height,
            width: self.width,
            patch: self.patch,
            model_dim: self.model_dim,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            net: self.net(),
            steps: self.pretrain_steps,
            accumulation: self.accumulation,
            adam: self.adam(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            accumulation: self.accumulation,
            dropout_prob: self.dropout_prob,
            rank: self.rank,
            mode: self.mode,
            mask_policy: self.mask_policy,
            adam: self.adam(),
        }
    }

    /// `path` resolved against the output root unless absolute.
    pub fn resolve(&self, out: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            out.join(path)
        }
    }
}
