//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one result line; exits nonzero if any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use teamwork::adapter::{read_checkpoint, write_checkpoint, ActivationMask, AdapterMode, TeamworkAdapter};
use teamwork::cost::ledger::measure;
use teamwork::cost::model::loglog_slope;
use teamwork::cost::{scaling_sweep, CostScheme, SweepConfig};
use teamwork::diffusion::*;
use teamwork::synth::{generate_task, GenSpec, Role, Task};
use teamwork::tensor::{gaussian, matmul, matmul_transb};
use teamwork::{DenseMatrix, DenseVector, Rng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn materialization_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    let cases = 120;
    for _ in 0..cases {
        let (t, m, n, r) = (1 + rng.below(8), 1 + rng.below(32), 1 + rng.below(32), 1 + rng.below(8));
        let ad = random_adapter(&mut rng, AdapterMode::Teamwork, t, m, n, r);
        let mask = random_mask(&mut rng, t);
        let xs: Vec<DenseVector> = (0..mask.active_count()).map(|_| DenseVector::new(rng.normal_vec(n)).unwrap()).collect();
        let fast = ad.forward_unmaterialized(&xs, &mask).unwrap();
        let dense = ad.forward_materialized(&xs, &mask).unwrap();
        for (a, b) in fast.iter().zip(&dense) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 10.0,
        format!("cases={cases} max_abs_diff={worst:.2e} tol=1e-10 time={secs:.2}s limit=10s"),
    )
}

fn lora_degeneration() -> Outcome {
    let mut rng = Rng::new(202);
    let mut bitwise = true;
    for _ in 0..50 {
        let (m, n, r, tokens) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(6), 1 + rng.below(4));
        let ad = random_adapter(&mut rng, AdapterMode::Teamwork, 1, m, n, r);
        let x = gaussian(tokens, n, &mut rng, 1.0).unwrap();
        let y = ad.forward(std::slice::from_ref(&x), &ActivationMask::all(1)).unwrap();
        for k in 0..tokens {
            let reference = reference_lora(ad.weight(), &ad.factors_a()[0], &ad.factors_b()[0], x.row(k));
            bitwise &= y[0].row(k).iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let mut frozen_exact = true;
    for _ in 0..50 {
        let (t, m, n, r) = (1 + rng.below(6), 1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(6));
        let mut ad = random_adapter(&mut rng, AdapterMode::Teamwork, t, m, n, r);
        for i in 0..t {
            *ad.factor_b_mut(i) = DenseMatrix::zeros(r, n);
        }
        let mask = random_mask(&mut rng, t);
        let xs = blocks(&mut rng, mask.active_count(), 3, n);
        let ys = ad.forward(&xs, &mask).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            frozen_exact &= *y == matmul_transb(x, ad.weight()).unwrap();
        }
    }
    outcome(
        bitwise && frozen_exact,
        format!("single_teammate_bitwise={bitwise} zero_b_equals_frozen={frozen_exact} cases=50+50"),
    )
}

fn adapter_fd_case(rng: &mut Rng) -> f64 {
    let (t, m, n, r, tokens) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(3), 1 + rng.below(3));
    let mode = if rng.bernoulli(0.75) {
        AdapterMode::Teamwork
    } else {
        AdapterMode::PerInstanceLora
    };
    let ad = random_adapter(rng, mode, t, m, n, r);
    let mask = random_mask(rng, t);
    let active = mask.active_indices();
    let xs = blocks(rng, active.len(), tokens, n);
    let gs = blocks(rng, active.len(), tokens, m);
    let grads = ad.backward_tokens(&xs, &gs, &mask).unwrap();
    let objective = |ad: &TeamworkAdapter, xs: &[DenseMatrix]| pairing(&ad.forward(xs, &mask).unwrap(), &gs);
    let value = objective(&ad, &xs);
    let mut worst: f64 = 0.0;
    for &i in &active {
        for idx in 0..m * r {
            let numeric = central_difference(|d| {
                let mut p = ad.clone();
                p.factor_a_mut(i).data_mut()[idx] += d;
                objective(&p, &xs)
            });
            worst = worst.max(relative_error(grads.grad_a_for(i).unwrap().data()[idx], numeric, value));
        }
        for idx in 0..r * n {
            let numeric = central_difference(|d| {
                let mut p = ad.clone();
                p.factor_b_mut(i).data_mut()[idx] += d;
                objective(&p, &xs)
            });
            worst = worst.max(relative_error(grads.grad_b_for(i).unwrap().data()[idx], numeric, value));
        }
    }
    for (slot, gx) in grads.grad_x.iter().enumerate() {
        for idx in 0..tokens * n {
            let numeric = central_difference(|d| {
                let mut shifted = xs.clone();
                shifted[slot].data_mut()[idx] += d;
                objective(&ad, &shifted)
            });
            worst = worst.max(relative_error(gx.data()[idx], numeric, value));
        }
    }
    worst
}

fn tiny_net_config() -> NetConfig {
    NetConfig {
        height: 8,
        width: 8,
        patch: 4,
        model_dim: 8,
        hidden_dim: 12,
        heads: 2,
    }
}

/// Adapted net with nonzero factors everywhere, so every path carries signal.
fn generic_net(config: NetConfig, roles: &[Role], rank: usize, seed: u64) -> DenoiserNet {
    let base = BaseNet::init(config, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xface);
    let mut net = DenoiserNet::from_base(&base, roles.len(), rank, AdapterMode::Teamwork, &mut rng).unwrap();
    for layer in net.layers_mut() {
        let n = layer.in_dim();
        for i in 0..roles.len() {
            *layer.factor_b_mut(i) = gaussian(rank, n, &mut rng, 0.1).unwrap();
        }
    }
    net
}

fn random_team_sample(config: &NetConfig, roles: &[Role], rng: &mut Rng) -> (TeamSample, Vec<teamwork::image::Image>) {
    let plane = |rng: &mut Rng| teamwork::image::Image::new(config.height, config.width, rng.normal_vec(3 * config.height * config.width)).unwrap();
    let planes = roles.iter().map(|_| plane(rng).map(|v| v.tanh())).collect();
    let noise = roles.iter().map(|_| plane(rng)).collect();
    (TeamSample::new(planes, roles.to_vec()).unwrap(), noise)
}

/// Mask with every input active and a random non-empty set of outputs.
fn training_mask(roles: &[Role], rng: &mut Rng) -> ActivationMask {
    loop {
        let bits: Vec<bool> = roles.iter().map(|r| *r == Role::Input || rng.bernoulli(0.6)).collect();
        if roles.iter().zip(&bits).any(|(r, b)| *r == Role::Output && *b) {
            return ActivationMask::new(bits).unwrap();
        }
    }
}

fn net_fd_case(rng: &mut Rng, seed: u64) -> (f64, usize) {
    let config = tiny_net_config();
    let roles = Task::Decompose.roles();
    let net = generic_net(config, &roles, 2, seed);
    let (sample, noise) = random_team_sample(&config, &roles, rng);
    let mask = training_mask(&roles, rng);
    let t = rng.uniform(0.05, 0.95);
    let (value, grads) = loss_and_grads(&net, &sample, t, &noise, &mask).unwrap();
    let active = mask.active_indices();
    let mut worst: f64 = 0.0;
    let mut input_entries = 0;
    for probe in 0..16 {
        // Half the probes land on the input teammate.
        let i = if probe % 2 == 0 { 0 } else { active[rng.below(active.len())] };
        let layer = rng.below(LAYER_COUNT);
        let on_a = rng.bernoulli(0.5);
        let (analytic, len) = if on_a {
            let g = grads.a[layer][i].as_ref().unwrap();
            (g.data().to_vec(), g.data().len())
        } else {
            let g = grads.b[layer][i].as_ref().unwrap();
            (g.data().to_vec(), g.data().len())
        };
        let idx = rng.below(len);
        let numeric = central_difference(|d| {
            let mut p = net.clone();
            let l = &mut p.layers_mut()[layer];
            let f = if on_a { l.factor_a_mut(i) } else { l.factor_b_mut(i) };
            f.data_mut()[idx] += d;
            flow_matching_loss(&p, &sample, t, &noise, &mask).unwrap()
        });
        worst = worst.max(relative_error(analytic[idx], numeric, value));
        input_entries += usize::from(i == 0);
    }
    (worst, input_entries)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(303);
    let mut worst_adapter: f64 = 0.0;
    for _ in 0..100 {
        worst_adapter = worst_adapter.max(adapter_fd_case(&mut rng));
    }
    let mut worst_net: f64 = 0.0;
    let mut input_entries = 0;
    for case in 0..10 {
        let (w, k) = net_fd_case(&mut rng, 900 + case);
        worst_net = worst_net.max(w);
        input_entries += k;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_adapter <= 1e-6 && worst_net <= 1e-6 && input_entries > 0 && secs < 30.0,
        format!(
            "adapter_cases=100 max_rel={worst_adapter:.2e} net_cases=10 max_rel={worst_net:.2e} input_teammate_entries={input_entries} tol=1e-6 h=1e-5 time={secs:.2}s limit=30s"
        ),
    )
}

/// Jacobian block of output `i` with respect to input `j`, read off `m`
/// backward passes with one-hot upstream gradients.
fn jacobian_block(ad: &TeamworkAdapter, x: &[DenseMatrix], i: usize, j: usize) -> DenseMatrix {
    let (m, n) = (ad.out_dim(), ad.in_dim());
    let mask = ActivationMask::all(ad.team_size());
    let mut jac = DenseMatrix::zeros(m, n);
    for k in 0..m {
        let mut gs: Vec<DenseMatrix> = (0..ad.team_size()).map(|_| DenseMatrix::zeros(1, m)).collect();
        gs[i][(0, k)] = 1.0;
        let grads = ad.backward_tokens(x, &gs, &mask).unwrap();
        for c in 0..n {
            jac[(k, c)] = grads.grad_x[j][(0, c)];
        }
    }
    jac
}

fn coordination_structure() -> Outcome {
    let mut rng = Rng::new(404);
    let mut worst: f64 = 0.0;
    let mut nonzero = true;
    let mut per_instance_zero = true;
    for _ in 0..50 {
        let (t, m, n, r) = (2 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(3));
        let tw = random_adapter(&mut rng, AdapterMode::Teamwork, t, m, n, r);
        let mut pi = tw.clone();
        pi.set_mode(AdapterMode::PerInstanceLora);
        let xs = blocks(&mut rng, t, 1, n);
        let i = rng.below(t);
        let j = (i + 1 + rng.below(t - 1)) % t;
        let block = jacobian_block(&tw, &xs, i, j);
        let expected = matmul(&tw.factors_a()[i], &tw.factors_b()[j]).unwrap();
        worst = worst.max(block.max_abs_diff(&expected).unwrap());
        nonzero &= !block.is_zero();
        per_instance_zero &= jacobian_block(&pi, &xs, i, j).data().iter().all(|&v| v == 0.0);
    }
    outcome(
        worst <= 1e-10 && nonzero && per_instance_zero,
        format!("cases=50 teamwork_max_diff={worst:.2e} tol=1e-10 teamwork_nonzero={nonzero} per_instance_exact_zero={per_instance_zero}"),
    )
}

fn mask_subset_equivalence() -> Outcome {
    let mut rng = Rng::new(505);
    let mut forward_equal = true;
    let mut backward_equal = true;
    for case in 0..50 {
        let (t, m, n, r) = (2 + rng.below(6), 1 + rng.below(12), 1 + rng.below(12), 1 + rng.below(4));
        let mode = if case % 2 == 0 {
            AdapterMode::Teamwork
        } else {
            AdapterMode::PerInstanceLora
        };
        let ad = random_adapter(&mut rng, mode, t, m, n, r);
        let mask = random_strict_subset(&mut rng, t);
        let active = mask.active_indices();
        let scratch = TeamworkAdapter::new(
            ad.weight().clone(),
            active.iter().map(|&i| ad.factors_a()[i].clone()).collect(),
            active.iter().map(|&i| ad.factors_b()[i].clone()).collect(),
            mode,
        )
        .unwrap();
        let full = ActivationMask::all(active.len());
        let tokens = 1 + rng.below(3);
        let xs = blocks(&mut rng, active.len(), tokens, n);
        let gs = blocks(&mut rng, active.len(), tokens, m);
        forward_equal &= ad.forward(&xs, &mask).unwrap() == scratch.forward(&xs, &full).unwrap();
        let masked = ad.backward_tokens(&xs, &gs, &mask).unwrap();
        let restricted = scratch.backward_tokens(&xs, &gs, &full).unwrap();
        backward_equal &= masked.grad_a == restricted.grad_a && masked.grad_b == restricted.grad_b && masked.grad_x == restricted.grad_x;
    }
    outcome(
        forward_equal && backward_equal,
        format!("subsets=50 forward_exact={forward_equal} backward_exact={backward_equal}"),
    )
}

fn cost_law() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(606);
    let mut exact = true;
    for _ in 0..20 {
        let (t, m, n, r) = (1 + rng.below(8), 1 + rng.below(32), 1 + rng.below(32), 1 + rng.below(8));
        let ad = random_adapter(&mut rng, AdapterMode::Teamwork, t, m, n, r);
        let mask = ActivationMask::all(t);
        let xs: Vec<DenseVector> = (0..t).map(|_| DenseVector::new(rng.normal_vec(n)).unwrap()).collect();
        let (_, unmat) = measure(|| ad.forward_unmaterialized(&xs, &mask).unwrap());
        let (_, mat) = measure(|| ad.forward_materialized(&xs, &mask).unwrap());
        let (t, m, n, r) = (t as u64, m as u64, n as u64, r as u64);
        exact &= unmat.linear() == t * m * n + t * r * (m + n);
        exact &= mat.linear() == t * t * m * n;
    }
    let sweep = scaling_sweep(&SweepConfig {
        schemes: vec![
            CostScheme::TeamworkUnmat,
            CostScheme::TeamworkMat,
            CostScheme::PerInstanceLora,
            CostScheme::SelfAttention,
            CostScheme::JointAttention,
        ],
        ..SweepConfig::default()
    })
    .unwrap();
    let sweep_exact = sweep.reports.iter().filter(|r| !r.scheme.is_attention()).all(|r| r.measured == r.predicted);
    let total_slope = |scheme: CostScheme| {
        let pts: Vec<(f64, f64)> = sweep
            .reports
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| (r.team_size as f64, r.counts.total() as f64))
            .collect();
        loglog_slope(&pts).unwrap()
    };
    let unmat = sweep.slope(CostScheme::TeamworkUnmat).unwrap();
    let mat = sweep.slope(CostScheme::TeamworkMat).unwrap();
    let self_total = total_slope(CostScheme::SelfAttention);
    let joint = sweep.slope(CostScheme::JointAttention).unwrap();
    let joint_total = total_slope(CostScheme::JointAttention);
    let linear = |s: f64| (0.9..=1.1).contains(&s);
    let quadratic = |s: f64| (1.9..=2.1).contains(&s);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact && sweep_exact && linear(unmat) && linear(self_total) && quadratic(joint) && quadratic(mat) && secs < 60.0,
        format!(
            "formula_exact={} slopes: teamwork={unmat:.3} self_attention_total={self_total:.3} joint_attention={joint:.3} materialized={mat:.3} (joint_with_projections={joint_total:.3}, informational) time={secs:.2}s limit=60s",
            exact && sweep_exact
        ),
    )
}

fn input_teammate_contract() -> Outcome {
    let config = tiny_net_config();
    let roles = Task::Decompose.roles();
    let net = generic_net(config, &roles, 2, 707);
    let mut rng = Rng::new(708);
    let mut zero_slot = true;
    let mut factors_reached = true;
    for _ in 0..10 {
        let (sample, noise) = random_team_sample(&config, &roles, &mut rng);
        let mask = training_mask(&roles, &mut rng);
        let t = rng.uniform(0.05, 0.95);
        let eval = flow_matching_eval(&net, &sample, t, &noise, &mask).unwrap();
        zero_slot &= eval.output_grads[0].data().iter().all(|&g| g == 0.0);
        let (_, grads) = loss_and_grads(&net, &sample, t, &noise, &mask).unwrap();
        factors_reached &= grads.teammate_max_abs(0) > 0.0;
    }
    let clean = teamwork::image::Image::from_fn(8, 8, |c, y, x| ((c + y + x) % 5) as f64 * 0.3 - 0.6);
    let inputs = vec![Some(clean.clone()), None, None];
    let mut steps_seen = 0;
    let mut clean_every_step = true;
    for mask in [ActivationMask::all(3), ActivationMask::from_indices(3, &[0, 2]).unwrap()] {
        sample_observed(&net, &roles, &inputs, NoiseSchedule::new(8).unwrap(), &mask, &mut rng, &mut |s| {
            steps_seen += 1;
            clean_every_step &= s.active[0] == 0 && s.net_inputs[0] == clean && s.net_times[0] == 0.0;
        })
        .unwrap();
    }
    outcome(
        zero_slot && factors_reached && clean_every_step && steps_seen == 16,
        format!(
            "input_slot_grad_exact_zero={zero_slot} input_factor_grad_nonzero={factors_reached} clean_input_every_step={clean_every_step} steps_checked={steps_seen}"
        ),
    )
}

fn checkpoint_bytes(net: &DenoiserNet) -> Vec<u8> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &net.to_checkpoint().unwrap()).unwrap();
    bytes
}

fn determinism_and_persistence() -> Outcome {
    let config = NetConfig {
        height: 16,
        width: 16,
        ..tiny_net_config()
    };
    let planes = generate_task(Task::Decompose, 9, 16, 16, 16, &GenSpec::default()).unwrap();
    let roles = Task::Decompose.roles();
    let data: Vec<TeamSample> = planes.iter().map(|p| TeamSample::from_unit(p, &roles).unwrap()).collect();
    let images: Vec<_> = data.iter().map(|s| s.planes[0].clone()).collect();
    let pre = PretrainConfig {
        net: config,
        steps: 5,
        accumulation: 2,
        ..PretrainConfig::default()
    };
    let (base, _) = pretrain_base(&images, &pre, &mut Rng::new(9)).unwrap();
    let (base2, _) = pretrain_base(&images, &pre, &mut Rng::new(9)).unwrap();
    let train = TrainConfig {
        steps: 6,
        accumulation: 2,
        rank: 2,
        mask_policy: MaskPolicy::Dropout,
        dropout_prob: 0.2,
        ..TrainConfig::default()
    };
    let (net, log) = train_adapter(&base, &data, &train, &mut Rng::new(10)).unwrap();
    let (net2, log2) = train_adapter(&base2, &data, &train, &mut Rng::new(10)).unwrap();
    let logs_equal = log.deterministic_text() == log2.deterministic_text();
    let bytes = checkpoint_bytes(&net);
    let checkpoints_equal = bytes == checkpoint_bytes(&net2);
    let restored = read_checkpoint(&mut bytes.as_slice()).unwrap();
    let round_trip = {
        let mut again = Vec::new();
        write_checkpoint(&mut again, &restored).unwrap();
        again == bytes && restored == net.to_checkpoint().unwrap()
    };
    let frozen = net.layers().iter().zip(&base.weights).all(|(layer, w)| {
        layer.weight().data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    outcome(
        logs_equal && checkpoints_equal && round_trip && frozen,
        format!(
            "metrics_logs_identical={logs_equal} checkpoints_bit_identical={checkpoints_equal} round_trip_bit_exact={round_trip} frozen_w_unchanged={frozen} checkpoint_bytes={}",
            bytes.len()
        ),
    )
}

/// Desk-scale decomposition experiment shared by the coordination and
/// dropout criteria.
struct SeedRun {
    teamwork_all: f64,
    teamwork_each: f64,
    per_instance_all: f64,
    dropout_all: f64,
    dropout_each: f64,
}

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SAMPLES: usize = 1000;
const TRAIN_STEPS: usize = 1000;
const EVAL_SAMPLES: usize = 32;
const SAMPLER_STEPS: usize = 10;

fn desk_net() -> NetConfig {
    NetConfig {
        height: 16,
        width: 16,
        patch: 2,
        model_dim: 32,
        hidden_dim: 64,
        heads: 2,
    }
}

fn recomposition(net: &DenoiserNet, test: &[teamwork::synth::Planes], mask: &EvalMask, seed: u64) -> f64 {
    let schedule = NoiseSchedule::new(SAMPLER_STEPS).unwrap();
    evaluate(net, Task::Decompose, test, mask, schedule, &mut Rng::new(seed))
        .unwrap()
        .recomposition
        .unwrap()
}

fn run_seed(seed: u64) -> SeedRun {
    let spec = GenSpec::default();
    let train = generate_task(Task::Decompose, seed, TRAIN_SAMPLES, 16, 16, &spec).unwrap();
    let test = generate_task(Task::Decompose, seed + 10_000, EVAL_SAMPLES, 16, 16, &spec).unwrap();
    let roles = Task::Decompose.roles();
    let data: Vec<TeamSample> = train.iter().map(|p| TeamSample::from_unit(p, &roles).unwrap()).collect();
    let images: Vec<_> = data.iter().map(|s| s.planes[0].clone()).collect();
    let pre = PretrainConfig {
        net: desk_net(),
        steps: 1000,
        accumulation: 4,
        ..PretrainConfig::default()
    };
    let (base, _) = pretrain_base(&images, &pre, &mut Rng::new(seed)).unwrap();
    let config = TrainConfig {
        steps: TRAIN_STEPS,
        accumulation: 4,
        rank: 4,
        ..TrainConfig::default()
    };
    let fit = |config: &TrainConfig| train_adapter(&base, &data, config, &mut Rng::new(seed + 100)).unwrap().0;
    let teamwork = fit(&config);
    let per_instance = fit(&TrainConfig {
        mode: AdapterMode::PerInstanceLora,
        ..config
    });
    let dropout = fit(&TrainConfig {
        mask_policy: MaskPolicy::Dropout,
        dropout_prob: 0.2,
        ..config
    });
    let eval_seed = seed + 200;
    SeedRun {
        teamwork_all: recomposition(&teamwork, &test, &EvalMask::All, eval_seed),
        teamwork_each: recomposition(&teamwork, &test, &EvalMask::Each, eval_seed),
        per_instance_all: recomposition(&per_instance, &test, &EvalMask::All, eval_seed),
        dropout_all: recomposition(&dropout, &test, &EvalMask::All, eval_seed),
        dropout_each: recomposition(&dropout, &test, &EvalMask::Each, eval_seed),
    }
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
}

fn coordination_benefit(runs: &[SeedRun], secs: f64) -> Outcome {
    let tw: Vec<f64> = runs.iter().map(|r| r.teamwork_all).collect();
    let pi: Vec<f64> = runs.iter().map(|r| r.per_instance_all).collect();
    let each: Vec<f64> = runs.iter().map(|r| r.teamwork_each).collect();
    let (tw_m, pi_m, each_m) = (median(&tw), median(&pi), median(&each));
    outcome(
        tw_m < pi_m && tw_m <= each_m && secs < 1800.0,
        format!(
            "median recomposition: teamwork={tw_m:.4} per_instance={pi_m:.4} teamwork_isolated={each_m:.4} per_seed teamwork=[{}] per_instance=[{}] isolated=[{}] time={secs:.0}s limit=1800s",
            fmt_list(&tw),
            fmt_list(&pi),
            fmt_list(&each)
        ),
    )
}

fn dropout_training(runs: &[SeedRun]) -> Outcome {
    let gap_plain: Vec<f64> = runs.iter().map(|r| r.teamwork_each - r.teamwork_all).collect();
    let gap_drop: Vec<f64> = runs.iter().map(|r| r.dropout_each - r.dropout_all).collect();
    let (plain, drop) = (median(&gap_plain), median(&gap_drop));
    outcome(
        drop < plain,
        format!(
            "median isolated-minus-full gap: dropout={drop:.4} no_dropout={plain:.4} per_seed dropout=[{}] no_dropout=[{}]",
            fmt_list(&gap_drop),
            fmt_list(&gap_plain)
        ),
    )
}

fn main() {
    // Optional criterion numbers on the command line select a subset.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut failed = 0;
    let mut ran = 0;
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("acceptance {id:>2} {name}: {verdict} {}", o.detail);
        failed += usize::from(!o.pass);
        ran += 1;
    };
    report(1, "materialization-equivalence", &mut materialization_equivalence);
    report(2, "lora-degeneration", &mut lora_degeneration);
    report(3, "gradient-correctness", &mut gradient_correctness);
    report(4, "coordination-structure", &mut coordination_structure);
    report(5, "mask-subset-equivalence", &mut mask_subset_equivalence);
    report(6, "cost-law", &mut cost_law);
    report(7, "input-teammate-contract", &mut input_teammate_contract);
    let (runs, secs) = if wanted(8) || wanted(10) {
        let start = Instant::now();
        let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
        (runs, start.elapsed().as_secs_f64())
    } else {
        (Vec::new(), 0.0)
    };
    report(8, "coordination-benefit", &mut || coordination_benefit(&runs, secs));
    report(9, "determinism-and-persistence", &mut determinism_and_persistence);
    report(10, "dropout-training", &mut || dropout_training(&runs));
    if failed > 0 {
        println!("acceptance: {failed} of {ran} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all {ran} criteria passed");
}
