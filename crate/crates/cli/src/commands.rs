use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};
use teamwork::cost::{measure_all, scaling_sweep, CostScheme, SweepConfig, SweepResult};
use teamwork::diffusion::{
    evaluate, pretrain_base, sample as run_sampler, train_adapter, BaseNet, DenoiserNet, EvalMask, NoiseSchedule, TeamSample,
};
use teamwork::image::Image;
use teamwork::synth::{generate_task, read_dataset, sample_dir_name, write_dataset, Planes, Role};
use teamwork::{Checkpoint, Rng};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn sha256_hex(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Validates the config and records it as `<out>/run.cfg`.
fn prepare(out: &Path, config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    create_dir(out)?;
    config.save(&out.join(CONFIG_FILE))
}

fn load_dataset(out: &Path, config: &RunConfig) -> CliResult<Vec<Planes>> {
    let dir = config.resolve(out, &config.data);
    let (manifest, planes) = read_dataset(&dir)?;
    if manifest.task != config.task {
        return Err(CliError::config(format!(
            "dataset {} holds task {}, config says {}",
            dir.display(),
            manifest.task,
            config.task
        )));
    }
    if (manifest.height, manifest.width) != (config.height, config.width) {
        return Err(CliError::contract(format!(
            "dataset frames are {}x{}, config expects {}x{}",
            manifest.height, manifest.width, config.height, config.width
        )));
    }
    Ok(planes)
}

fn load_base(out: &Path, config: &RunConfig) -> CliResult<BaseNet> {
    let ckpt = Checkpoint::load(&config.resolve(out, &config.base))?;
    if ckpt.team_size != 1 {
        return Err(CliError::contract(format!("base checkpoint has {} teammates, expected 1", ckpt.team_size)));
    }
    Ok(BaseNet::from_checkpoint(config.net(), &ckpt, config.seed)?)
}

fn load_adapted(out: &Path, config: &RunConfig) -> CliResult<DenoiserNet> {
    let ckpt = Checkpoint::load(&config.resolve(out, &config.checkpoint))?;
    let net = DenoiserNet::from_checkpoint(config.net(), ckpt)?;
    if net.team_size() != config.roles.len() {
        return Err(CliError::contract(format!(
            "checkpoint has {} teammates, task {} needs {}",
            net.team_size(),
            config.task,
            config.roles.len()
        )));
    }
    Ok(net)
}

pub fn gen_data(out: &Path, config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let planes = generate_task(config.task, config.seed, config.count, config.height, config.width, &config.gen_spec())?;
    prepare(out, config)?;
    let dir = config.resolve(out, &config.data);
    let manifest = write_dataset(&dir, config.task, config.seed, &config.gen_spec(), &planes)?;
    println!("task={} samples={} dir={}", config.task, manifest.samples.len(), dir.display());
    Ok(())
}

pub fn pretrain(out: &Path, config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let planes = load_dataset(out, config)?;
    prepare(out, config)?;
    let slot = config
        .task
        .plane_names()
        .iter()
        .position(|n| *n == "image")
        .expect("every task has an image plane");
    let images: Vec<Image> = planes.iter().map(|p| p[slot].encode()).collect();
    info!("pretraining on {} images for {} steps", images.len(), config.pretrain_steps);
    let (base, losses) = pretrain_base(&images, &config.pretrain(), &mut Rng::new(config.seed))?;
    let path = config.resolve(out, &config.base);
    base.to_checkpoint()?.save(&path)?;
    let log: String = losses.iter().enumerate().map(|(i, l)| format!("step={i} loss={l:?}\n")).collect();
    write_file(&out.join("pretrain_metrics.txt"), &log)?;
    println!(
        "base={} steps={} final_loss={} sha256={}",
        path.display(),
        losses.len(),
        losses.last().map_or("none".to_string(), |l| format!("{l:.6}")),
        sha256_hex(&path)?
    );
    Ok(())
}

pub fn train(out: &Path, config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let planes = load_dataset(out, config)?;
    let base = load_base(out, config)?;
    prepare(out, config)?;
    let data = planes
        .iter()
        .map(|p| TeamSample::from_unit(p, &config.roles))
        .collect::<teamwork::Result<Vec<_>>>()?;
    info!(
        "training {} adapters (rank {}, {} steps x {} samples)",
        config.mode, config.rank, config.steps, config.accumulation
    );
    let (net, log) = train_adapter(&base, &data, &config.train(), &mut Rng::new(config.seed))?;
    let path = config.resolve(out, &config.checkpoint);
    net.to_checkpoint()?.save(&path)?;
    write_file(&out.join("train_metrics.txt"), &log.to_text())?;
    println!(
        "checkpoint={} mode={} steps={} final_loss={} sha256={}",
        path.display(),
        config.mode,
        log.records.len(),
        log.records.last().map_or("none".to_string(), |r| format!("{:.6}", r.loss)),
        sha256_hex(&path)?
    );
    Ok(())
}

fn held_out(config: &RunConfig, count: usize) -> CliResult<Vec<Planes>> {
    Ok(generate_task(config.task, config.eval_seed, count, config.height, config.width, &config.gen_spec())?)
}

fn parse_mask(config: &RunConfig, spec: &str) -> CliResult<EvalMask> {
    let mask = EvalMask::parse(spec, config.task)?;
    mask.passes(&config.roles)?;
    Ok(mask)
}

fn file_tag(mask: &EvalMask) -> String {
    mask.to_string().replace([':', ','], "_")
}

pub fn eval(out: &Path, config: &RunConfig, mask_spec: &str) -> CliResult<()> {
    config.validate()?;
    let mask = parse_mask(config, mask_spec)?;
    let net = load_adapted(out, config)?;
    prepare(out, config)?;
    let samples = held_out(config, config.eval_count)?;
    let schedule = NoiseSchedule::new(config.sample_steps)?;
    let report = evaluate(&net, config.task, &samples, &mask, schedule, &mut Rng::new(config.eval_seed))?;
    let text = format!("mask={mask} mode={}\n{}", net.mode(), report.to_text());
    write_file(&out.join(format!("eval_{}.txt", file_tag(&mask))), &text)?;
    print!("{text}");
    Ok(())
}

pub fn sample(out: &Path, config: &RunConfig, mask_spec: &str, index: usize) -> CliResult<()> {
    config.validate()?;
    let mask = parse_mask(config, mask_spec)?;
    if index >= config.eval_count {
        return Err(CliError::config(format!("index {index} is outside the {} held-out samples", config.eval_count)));
    }
    let net = load_adapted(out, config)?;
    prepare(out, config)?;
    let truth = held_out(config, index + 1)?.pop().expect("index + 1 samples");
    let roles = &config.roles;
    let inputs: Vec<Option<Image>> = roles
        .iter()
        .zip(&truth)
        .map(|(r, p)| (*r == Role::Input).then(|| p.encode()))
        .collect();
    let schedule = NoiseSchedule::new(config.sample_steps)?;
    let rng = Rng::new(config.eval_seed);
    let dir = out.join("samples").join(sample_dir_name(index));
    create_dir(&dir)?;
    let names = config.task.plane_names();
    for (p, pass) in mask.passes(roles)?.iter().enumerate() {
        let produced = run_sampler(&net, roles, &inputs, schedule, pass, &mut rng.stream(((index as u64) << 8) | p as u64))?;
        for (i, plane) in produced.into_iter().enumerate() {
            if let Some(plane) = plane {
                let plane = plane.decode().map(|v| v.clamp(0.0, 1.0));
                let path: PathBuf = dir.join(format!("{}.tnsr", names[i]));
                plane.save(&path)?;
                println!("plane={} rmse={:.6} file={}", names[i], plane.rmse(&truth[i])?, path.display());
            }
        }
    }
    Ok(())
}

pub struct BenchArgs {
    pub schemes: Vec<String>,
    pub team_sizes: Vec<usize>,
    pub dim: usize,
    pub rank: usize,
    pub tokens: usize,
    pub heads: usize,
}

pub fn bench(out: &Path, config: &RunConfig, args: &BenchArgs) -> CliResult<()> {
    prepare(out, config)?;
    let defaults = SweepConfig::default();
    let schemes = if args.schemes.is_empty() {
        defaults.schemes.clone()
    } else {
        args.schemes
            .iter()
            .map(|s| s.parse::<CostScheme>())
            .collect::<teamwork::Result<Vec<_>>>()?
    };
    let sweep = SweepConfig {
        team_sizes: args.team_sizes.clone(),
        schemes,
        dim: args.dim,
        rank: args.rank,
        tokens: args.tokens,
        heads: args.heads,
        seed: config.seed,
    };
    let mut distinct = sweep.team_sizes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let result = if distinct.len() >= 4 {
        scaling_sweep(&sweep)?
    } else {
        info!("fewer than 4 team sizes: reporting costs without slope fits");
        SweepResult {
            reports: measure_all(&sweep)?,
            slopes: Vec::new(),
        }
    };
    let text = format!(
        "# train_macs = 3 x forward MACs; flops = 2 x MACs; attention rows count the attention category only\n{}",
        result.records()
    );
    write_file(&out.join("bench.txt"), &text)?;
    write_file(&out.join("bench.dat"), &result.gnuplot_table())?;
    print!("{text}");
    Ok(())
}
