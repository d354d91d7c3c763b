//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any hard criterion fails.
//!
//! The ablation criterion (9) is a soft gate: its outcome is printed but it
//! never fails the run. It trains 20 small image models and takes roughly
//! half an hour on one core; set `BRIDGEKIT_SKIP_ABLATION=1` to skip it.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bridgekit::autodiff::Graph;
use bridgekit::config::ExperimentConfig;
use bridgekit::data::{make_synthetic_pairs, PairedDataset, Task};
use bridgekit::metrics::{evaluate_batch, gaussian_taps, psnr, ssim, wilcoxon_signed_rank, SSIM_K1, SSIM_K2};
use bridgekit::nets::{NetConfig, NetKind, Network, Role};
use bridgekit::sampler::reverse_chain;
use bridgekit::schedule::{build_schedule, ScheduleConfig, ScheduleTable, Variant};
use bridgekit::tensor::Tensor;
use bridgekit::training::{discriminator_loss, generator_loss, read_metrics, train};
use bridgekit::verify::{
    affine_contraction, markov_composition, monte_carlo_chain, monte_carlo_posterior, posterior_oracle,
    schedule_invariants, telescoping, MonteCarloCheck, CONTRACTION_RATIO_TOL, VARIANTS,
};
use bridgekit::Result;

const SCHEDULE_TOL: f64 = 1e-12;
const POSTERIOR_PRODUCT_TOL: f64 = 1e-9;
const MARKOV_TOL: f64 = 1e-9;
const MC_DRAWS: usize = 100_000;
const MC_SIGMAS: f64 = 3.0;
const TELESCOPE_TOL: f64 = 1e-6;
const REL_TOL: f64 = 0.01;
const GRAD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const GRAD_FLOOR: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-12;
const TOY_MARGIN_DB: f64 = 3.0;
const TOY_L1_RATIO: f64 = 0.5;
const ABLATION_GUIDANCE_GAP_DB: f64 = 2.0;
const PSNR_TOL: f64 = 1e-9;
const SSIM_TOL: f64 = 1e-10;
const WILCOXON_P: f64 = 0.03125;
const WILCOXON_TOL: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn table(steps: usize, variant: Variant) -> ScheduleTable {
    build_schedule(&ScheduleConfig::new(steps, 2.2, variant)).expect("valid schedule")
}

fn c1_schedule() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for steps in [4, 32, 256, 1000] {
        for v in VARIANTS {
            let c = schedule_invariants(&table(steps, v));
            ok &= c.passed && c.error <= SCHEDULE_TOL;
            worst = worst.max(c.error);
        }
    }
    Ok(outcome(ok, format!("worst deviation {worst:.2e} (tol {SCHEDULE_TOL:.0e})")))
}

fn c2_posterior() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for v in VARIANTS {
        // The oracle returns an error if its grid integral disagrees with
        // the product of Gaussians by more than 1e-6.
        for c in posterior_oracle(&table(32, v), 100, 7)? {
            ok &= c.error <= POSTERIOR_PRODUCT_TOL;
            worst = worst.max(c.error);
        }
    }
    Ok(outcome(
        ok,
        format!("worst closed-form vs oracle {worst:.2e} over 32 steps x 100 inputs x 2 variants"),
    ))
}

fn c3_markov() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for steps in [4, 32, 256, 1000] {
        for v in VARIANTS {
            worst = worst.max(markov_composition(&table(steps, v))?.error);
        }
    }
    let mut checks: Vec<MonteCarloCheck> = Vec::new();
    for (k, v) in VARIANTS.into_iter().enumerate() {
        let t32 = table(32, v);
        checks.extend(monte_carlo_chain(&t32, 0.6, -0.4, MC_DRAWS, &[1, 8, 16, 24, 31, 32], 11 + k as u64)?);
        for t in [2, 16, 32] {
            checks.push(monte_carlo_posterior(&t32, 0.6, -0.4, MC_DRAWS, t, 21 + k as u64)?);
        }
    }
    let max_z = checks
        .iter()
        .map(|c| c.mean_z.abs().max(c.var_z.abs()))
        .fold(0.0, f64::max);
    let ok = worst <= MARKOV_TOL && checks.iter().all(|c| c.mean_z.abs() <= MC_SIGMAS && c.var_z.abs() <= MC_SIGMAS);
    Ok(outcome(
        ok,
        format!(
            "analytic {worst:.2e}; Monte-Carlo max |z| {max_z:.2} over {} mean/variance pairs",
            checks.len()
        ),
    ))
}

fn c4_telescoping() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for v in VARIANTS {
        worst = worst.max(telescoping(&table(32, v), 3)?.error);
    }
    Ok(outcome(worst <= TELESCOPE_TOL, format!("max |x0_hat - x0| = {worst:.2e}")))
}

fn c5_self_consistency() -> Result<Outcome> {
    let rep = affine_contraction(16, REL_TOL)?;
    let worst_ratio = rep
        .error_ratios
        .iter()
        .map(|r| (r - 0.5).abs() / 0.5)
        .fold(0.0, f64::max);
    Ok(outcome(
        rep.final_residual < REL_TOL && worst_ratio <= CONTRACTION_RATIO_TOL,
        format!(
            "residual {:.2e} after {} recursions; error ratios {:?}",
            rep.final_residual,
            rep.recursions,
            rep.error_ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Central differences of `f` at a few entries of each input against the
/// analytic gradient `grads`.
fn fd_compare(inputs: &[Tensor], grads: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, x) in inputs.iter().enumerate() {
        let n = x.len();
        let picks: Vec<usize> = if n <= 4 { (0..n).collect() } else { vec![0, n / 3, n / 2, n - 1] };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, grads[k].data()[j]));
            count += 1;
        }
    }
    (worst, count)
}

fn c6_gradients() -> Result<Outcome> {
    let cfg = NetConfig {
        kind: NetKind::Mlp,
        width: 16,
        depth: 2,
        time_embed_dim: 16,
        time_hidden: 8,
        ..NetConfig::default()
    };
    let shape = [8];
    let b = 3;
    let ts = [1, 9, 30];
    let mk = |seed: f64| Tensor::from_fn(&[b, 8], |i| (0.37 * i as f64 + seed).sin() * 0.8);
    let weights = Tensor::from_fn(&[b, 8], |i| (1.3 * i as f64).cos());
    let d_weights = Tensor::from_fn(&[b], |i| 1.0 - 0.4 * i as f64);

    // Generator: weighted sum of outputs, w.r.t. inputs and parameters.
    let gen = Network::new(cfg.clone(), Role::Generator, &shape, 4)?;
    let g_names = gen.params().names().to_vec();
    let g_inputs = vec![mk(0.1), mk(1.7), mk(2.9)];
    let g_eval = |all: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let graph = Graph::new();
        let mut net = gen.clone();
        for (slot, t) in net.params_mut().tensors_mut().iter_mut().zip(&all[3..]) {
            *slot = t.clone();
        }
        let pv = net.params().leaves(&graph);
        let xs: Vec<_> = all[..3].iter().map(|t| graph.leaf(t.clone())).collect();
        let out = net.forward(&graph, &pv, &xs, &ts)?;
        let loss = out.mul_const(weights.clone().into()).sum();
        let grads = if want_grads {
            let mut wrt = xs.clone();
            wrt.extend_from_slice(pv.all());
            graph.grad(loss, &wrt).iter().map(|v| v.value().as_ref().clone()).collect()
        } else {
            Vec::new()
        };
        Ok((loss.value().data()[0], grads))
    };
    let mut g_all = g_inputs.clone();
    g_all.extend(gen.params().tensors().iter().cloned());
    let (_, g_grads) = g_eval(&g_all, true)?;
    let (g_worst, g_count) = fd_compare(&g_all, &g_grads, &|p| g_eval(p, false).unwrap().0);

    // Discriminator: weighted logits plus the gradient penalty on the real
    // input, w.r.t. inputs and parameters.
    let disc = Network::new(cfg, Role::Discriminator, &shape, 5)?;
    let d_eval = |all: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let graph = Graph::new();
        let mut net = disc.clone();
        for (slot, t) in net.params_mut().tensors_mut().iter_mut().zip(&all[2..]) {
            *slot = t.clone();
        }
        let pv = net.params().leaves(&graph);
        let x = graph.leaf(all[0].clone());
        let xt = graph.leaf(all[1].clone());
        let logits = net.forward(&graph, &pv, &[x, xt], &ts)?;
        let gx = graph.grad(logits.sum(), &[x])[0];
        let gp = gx.square().sum_per_sample().mean();
        let loss = logits.mul_const(d_weights.clone().into()).sum().add(gp);
        let grads = if want_grads {
            let mut wrt = vec![x, xt];
            wrt.extend_from_slice(pv.all());
            graph.grad(loss, &wrt).iter().map(|v| v.value().as_ref().clone()).collect()
        } else {
            Vec::new()
        };
        Ok((loss.value().data()[0], grads))
    };
    let mut d_all = vec![mk(0.4), mk(2.2)];
    d_all.extend(disc.params().tensors().iter().cloned());
    let (_, d_grads) = d_eval(&d_all, true)?;
    let (d_worst, d_count) = fd_compare(&d_all, &d_grads, &|p| d_eval(p, false).unwrap().0);

    Ok(outcome(
        g_worst <= GRAD_REL_TOL && d_worst <= GRAD_REL_TOL,
        format!(
            "generator {g_worst:.2e} over {g_count} entries of {} tensors; discriminator+penalty {d_worst:.2e} over {d_count} entries",
            g_names.len() + 3
        ),
    ))
}

fn c7_losses() -> Result<Outcome> {
    let ones = Tensor::full(&[4, 8], 1.0);
    let zeros = Tensor::zeros(&[4, 8]);
    let logits = Tensor::zeros(&[4]);
    let lg = generator_loss(&ones, &zeros, &logits, 1.0)?;
    let ld = discriminator_loss(&logits, &logits, &logits, 1.0)?;
    let eg = (lg - (1.0 + 2f64.ln())).abs();
    let ed = (ld - 2.0 * 2f64.ln()).abs();
    Ok(outcome(
        eg <= LOSS_TOL && ed <= LOSS_TOL,
        format!("L_G = {lg:.15} (err {eg:.1e}), L_D = {ld:.15} (err {ed:.1e})"),
    ))
}

fn sample_test_split(cfg: &ExperimentConfig, ckpt: &std::path::Path, data: &PairedDataset, seed: u64) -> Result<Tensor> {
    let state = bridgekit::training::TrainState::load(ckpt)?;
    let table = build_schedule(&cfg.effective_schedule())?;
    let mut opts = cfg.effective_sampler();
    opts.seed = seed;
    Ok(reverse_chain(&state.sampler_generator(), &data.test.y, &table, &opts)?.x0)
}

fn c8_toy_training() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text("task = gauss2gauss\nn = 2000\nT = 32\nnet = mlp\nsteps = 2000\nbatch_size = 64\ncheckpoint_every = 0")?;
    let data = make_synthetic_pairs(cfg.task, cfg.n, cfg.data_seed)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let out = train(&cfg, &data, dir.path())?;
    let pred = sample_test_split(&cfg, &out.final_checkpoint, &data, 1)?;
    let model = evaluate_batch(&data.test.x0, &pred)?.psnr_mean_std().0;
    let copy = evaluate_batch(&data.test.x0, &data.test.y)?.psnr_mean_std().0;

    let rows = read_metrics(&out.metrics)?;
    let window = |end: u64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.step > end - 100 && r.step <= end).map(|r| r.l1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (early, late) = (window(100), window(2000));
    let ratio = late / early;
    Ok(outcome(
        model - copy >= TOY_MARGIN_DB && ratio <= TOY_L1_RATIO,
        format!(
            "test PSNR {model:.2} dB vs copy-source {copy:.2} dB (+{:.2}); smoothed l1 {early:.4} -> {late:.4} (ratio {ratio:.3})",
            model - copy
        ),
    ))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c9_ablation() -> Result<Outcome> {
    const SEEDS: u64 = 5;
    let variants = ["full", "no_self_consistency", "no_soft_prior", "no_source_guidance"];
    let data = make_synthetic_pairs(Task::Shapes16, 1000, 1)?;
    let mut medians = Vec::new();
    for v in variants {
        let mut psnrs = Vec::new();
        for seed in 0..SEEDS {
            let mut cfg = ExperimentConfig::default();
            cfg.apply_text(
                "task = shapes16\nnet = tiny_unet\nT = 32\nsteps = 3000\nchannels = 4\nbatch_size = 8\nlr = 1e-3\ncheckpoint_every = 0",
            )?;
            cfg.set("seed", &seed.to_string())?;
            if v != "full" {
                cfg.set(v, "true")?;
            }
            let dir = tempfile::tempdir().expect("temp dir");
            let out = train(&cfg, &data, dir.path())?;
            let pred = sample_test_split(&cfg, &out.final_checkpoint, &data, seed)?;
            psnrs.push(evaluate_batch(&data.test.x0, &pred)?.psnr_mean_std().0);
        }
        medians.push(median(&mut psnrs));
    }
    let [full, no_sc, no_sp, no_sg] = [medians[0], medians[1], medians[2], medians[3]];
    let conds = [
        ("full >= w/o self-consistency", full >= no_sc),
        ("full >= w/o soft prior", full >= no_sp),
        (
            "w/o source guidance trails all by >= 2 dB",
            [full, no_sc, no_sp].iter().all(|&m| m - no_sg >= ABLATION_GUIDANCE_GAP_DB),
        ),
    ];
    let failed: Vec<&str> = conds.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(outcome(
        failed.is_empty(),
        format!(
            "median PSNR full {full:.2}, w/o self-consistency {no_sc:.2}, w/o soft prior {no_sp:.2}, w/o source guidance {no_sg:.2} dB{}",
            if failed.is_empty() { String::new() } else { format!("; not met: {}", failed.join(", ")) }
        ),
    ))
}

/// Direct SSIM: every valid window, weights from the outer product of the
/// 1-D taps, statistics summed in the window without separable passes.
fn ssim_brute(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps(11, 1.5);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = taps[dy] * taps[dx];
                    let (p, q) = (a[(y + dy) * w + x + dx], b[(y + dy) * w + x + dx]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn c10_metrics() -> Result<Outcome> {
    let reference = vec![0.0; 64];
    let test = vec![0.1; 64];
    let p = psnr(&reference, &test)?;
    let ep = (p - 20.0).abs();

    let (h, w) = (16, 19);
    let a: Vec<f64> = (0..h * w).map(|i| 0.5 + 0.45 * ((i as f64) * 0.37).sin()).collect();
    let b: Vec<f64> = (0..h * w).map(|i| (a[i] + 0.1 * ((i as f64) * 1.91).cos()).clamp(0.0, 1.0)).collect();
    let es = (ssim(&a, &b, h, w)? - ssim_brute(&a, &b, h, w)).abs();

    let wp = wilcoxon_signed_rank(&[3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1.0, 1.5, 2.0, 2.5, 3.0, 3.5])?;
    let ew = (wp - WILCOXON_P).abs();
    Ok(outcome(
        ep <= PSNR_TOL && es <= SSIM_TOL && ew <= WILCOXON_TOL,
        format!("PSNR {p:.12} dB; SSIM vs brute force {es:.1e}; Wilcoxon p {wp}"),
    ))
}

fn c11_determinism() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text("task = gauss2gauss\nn = 400\nT = 32\nsteps = 10\nbatch_size = 32\ncheckpoint_every = 0\nseed = 42")?;
    let data = make_synthetic_pairs(cfg.task, cfg.n, cfg.data_seed)?;
    let (d1, d2) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    let a = train(&cfg, &data, d1.path())?;
    let b = train(&cfg, &data, d2.path())?;
    let ckpt_same = std::fs::read(&a.final_checkpoint).ok() == std::fs::read(&b.final_checkpoint).ok();
    let s1 = sample_test_split(&cfg, &a.final_checkpoint, &data, 9)?;
    let s2 = sample_test_split(&cfg, &a.final_checkpoint, &data, 9)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let samples_same = bits(&s1) == bits(&s2);
    Ok(outcome(
        ckpt_same && samples_same,
        format!("checkpoints identical: {ckpt_same}; samples identical: {samples_same}"),
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    soft: bool,
    run: fn() -> Result<Outcome>,
}

fn main() -> ExitCode {
    let skip_ablation = std::env::var("BRIDGEKIT_SKIP_ABLATION").is_ok_and(|v| v != "0");
    let criteria = [
        Criterion { id: 1, name: "schedule invariants", budget: Duration::from_secs(1), soft: false, run: c1_schedule },
        Criterion { id: 2, name: "posterior oracle equivalence", budget: Duration::from_secs(10), soft: false, run: c2_posterior },
        Criterion { id: 3, name: "Markov/marginal consistency", budget: Duration::from_secs(30), soft: false, run: c3_markov },
        Criterion { id: 4, name: "oracle-generator round trip", budget: Duration::from_secs(1), soft: false, run: c4_telescoping },
        Criterion { id: 5, name: "self-consistency convergence", budget: Duration::from_secs(1), soft: false, run: c5_self_consistency },
        Criterion { id: 6, name: "gradient checks", budget: Duration::from_secs(30), soft: false, run: c6_gradients },
        Criterion { id: 7, name: "loss unit values", budget: Duration::from_secs(1), soft: false, run: c7_losses },
        Criterion { id: 8, name: "toy training gauss2gauss", budget: Duration::from_secs(600), soft: false, run: c8_toy_training },
        Criterion { id: 9, name: "ablation direction (soft)", budget: Duration::from_secs(3600), soft: true, run: c9_ablation },
        Criterion { id: 10, name: "metrics", budget: Duration::from_secs(1), soft: false, run: c10_metrics },
        Criterion { id: 11, name: "determinism", budget: Duration::from_secs(60), soft: false, run: c11_determinism },
    ];
    let mut hard_failures = 0;
    for c in &criteria {
        if c.soft && skip_ablation {
            println!("criterion {:>2} SKIP {} (BRIDGEKIT_SKIP_ABLATION set)", c.id, c.name);
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let (passed, detail) = match result {
            Ok(o) => (o.passed && in_budget, o.detail),
            Err(e) => (false, format!("error[{}]: {e}", e.category())),
        };
        let status = match (passed, c.soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "SOFT-FAIL",
        };
        println!(
            "criterion {:>2} {status} {} | {detail} | {:.2}s (budget {}s{})",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", exceeded" }
        );
        if !passed && !c.soft {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all hard criteria passed");
        ExitCode::SUCCESS
    }
}
