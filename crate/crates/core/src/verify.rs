//! Self-checks of the bridge maths against independent oracles. Used by the `verify` subcommand.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{sample_marginal, sample_step};
use crate::posterior::{bayes_oracle_1d, posterior_coeffs, posterior_sample};
use crate::rng::{substream, Noise, Purpose};
use crate::sampler::{max_relative_change, reverse_chain, self_consistent_estimate, SamplerOptions};
use crate::schedule::{build_schedule, ScheduleConfig, ScheduleTable, Variant};
use crate::tensor::Tensor;

pub const SCHEDULE_TOL: f64 = 1e-12;
pub const MARKOV_TOL: f64 = 1e-9;
pub const POSTERIOR_TOL: f64 = 1e-9;
pub const TELESCOPE_TOL: f64 = 1e-6;
/// Allowed deviation of the per-recursion error ratio from 0.5.
pub const CONTRACTION_RATIO_TOL: f64 = 0.1;
pub const MC_SIGMAS: f64 = 3.0;

pub const DEFAULT_STEPS: [usize; 3] = [4, 32, 256];
pub const VARIANTS: [Variant; 2] = [Variant::SelfRdb, Variant::RegularBridge];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Markov,
    Posterior,
    Telescoping,
    SelfConsistency,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Schedule,
        Suite::Markov,
        Suite::Posterior,
        Suite::Telescoping,
        Suite::SelfConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Markov => "markov",
            Suite::Posterior => "posterior",
            Suite::Telescoping => "telescoping",
            Suite::SelfConsistency => "self_consistency",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown verify suite `{s}`")))
    }
}

/// One line of the pass/fail table.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub variant: Variant,
    pub steps: usize,
    /// Set for per-timestep rows.
    pub t: Option<usize>,
    pub passed: bool,
    /// Worst observed error.
    pub error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.t.map_or("-".to_string(), |t| t.to_string());
        write!(
            f,
            "{:<5} {:<17} {:<15} T={:<5} t={:<5} err={:.3e} tol={:.0e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.variant,
            self.steps,
            t,
            self.error,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub steps: Vec<usize>,
    pub suites: Vec<Suite>,
    pub gamma: f64,
    /// Random scalar inputs per timestep in the posterior suite.
    pub posterior_inputs: usize,
    /// Emit one posterior row per timestep instead of one per table.
    pub per_step: bool,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            steps: DEFAULT_STEPS.to_vec(),
            suites: Suite::ALL.to_vec(),
            gamma: 2.2,
            posterior_inputs: 100,
            per_step: false,
            seed: 0,
        }
    }
}

fn check(suite: Suite, table: &ScheduleTable, t: Option<usize>, error: f64, tol: f64, detail: String) -> Check {
    Check {
        suite,
        variant: table.variant(),
        steps: table.steps(),
        t,
        passed: error <= tol && error.is_finite(),
        error,
        tolerance: tol,
        detail,
    }
}

/// Structural invariants of a table, including the variant-specific shape
/// of the noise variance.
pub fn schedule_invariants(table: &ScheduleTable) -> Check {
    let n = table.steps();
    let mut worst: f64 = 0.0;
    let mut what = String::new();
    let mut note = |err: f64, label: &str| {
        if err > worst || !err.is_finite() {
            worst = err;
            what = label.to_string();
        }
    };
    note(((1..=n).map(|t| table.g(t)).sum::<f64>() - 1.0).abs(), "sum g");
    note((table.s2(n) - 1.0).abs(), "s2_T");
    note(table.s2(0).abs(), "s2_0");
    for t in 0..=n {
        note((table.mu_x0(t) + table.mu_y(t) - 1.0).abs(), "convexity");
        note((table.sbar2(t) - (1.0 - table.s2(t))).abs(), "sbar2");
    }
    note((table.mu_x0(0) - 1.0).abs().max(table.mu_x0(n).abs()), "mu end-points");
    if (1..=n).any(|t| !(table.g(t) > 0.0)) {
        note(f64::INFINITY, "g positivity");
    }
    match table.variant() {
        Variant::SelfRdb => {
            note(table.sigma2(0).abs(), "sigma2_0");
            note((table.sigma2(n) - table.gamma()).abs(), "sigma2_T");
            if (1..=n).any(|t| !(table.sigma2(t) > table.sigma2(t - 1))) {
                note(f64::INFINITY, "sigma2 monotonicity");
            }
        }
        Variant::RegularBridge => {
            note(table.sigma2(0).abs().max(table.sigma2(n).abs()), "sigma2 end-points");
            for t in 0..=n {
                note((table.sigma2(t) - table.sigma2(n - t)).abs(), "sigma2 symmetry");
            }
        }
    }
    check(Suite::Schedule, table, None, worst, SCHEDULE_TOL, format!("worst: {what}"))
}

/// Composes the one-step transitions from `t = 0` and compares the composed
/// mean weights and variance with the marginal. The regular bridge is
/// checked on `t <= T - 1`, since its last step is degenerate.
pub fn markov_composition(table: &ScheduleTable) -> Result<Check> {
    let n = table.steps();
    let last = match table.variant() {
        Variant::SelfRdb => n,
        Variant::RegularBridge => n - 1,
    };
    let (mut wx, mut wy, mut var) = (1.0, 0.0, 0.0);
    let mut worst: f64 = 0.0;
    for t in 1..=last {
        let p = table.transition_params(t)?;
        wx *= p.a;
        wy = p.a * wy + p.b;
        var = p.a * p.a * var + p.sigma2_step;
        let err = (wx - table.mu_x0(t))
            .abs()
            .max((wy - table.mu_y(t)).abs())
            .max((var - table.sigma2(t)).abs());
        worst = worst.max(err);
    }
    Ok(check(Suite::Markov, table, None, worst, MARKOV_TOL, format!("t = 1..{last}")))
}

/// Closed-form coefficients against the Bayes oracle (which itself checks a
/// product of Gaussians against grid integration) on random scalar inputs,
/// plus the coefficient-sum identity.
pub fn posterior_oracle(table: &ScheduleTable, inputs: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rows = Vec::with_capacity(table.steps());
    for t in 1..=table.steps() {
        let c = posterior_coeffs(table, t)?;
        let mut worst = (c.c_xt + c.c_y + c.c_x0 - 1.0).abs();
        let mut rng = substream(seed, table.steps() as u64, t as u64, Purpose::MonteCarlo);
        for _ in 0..inputs {
            let x0 = rng.random_range(-1.0..1.0);
            let y = rng.random_range(-1.0..1.0);
            let spread = 3.0 * table.sigma(t).max(0.1);
            let x_t = table.mu_x0(t) * x0 + table.mu_y(t) * y + rng.random_range(-spread..spread);
            let (m, v) = bayes_oracle_1d(table, t, x_t, y, x0)?;
            worst = worst.max((c.mean(x_t, y, x0) - m).abs()).max((c.v - v).abs());
        }
        rows.push(check(
            Suite::Posterior,
            table,
            Some(t),
            worst,
            POSTERIOR_TOL,
            format!("{inputs} inputs"),
        ));
    }
    Ok(rows)
}

/// Reverse chain with the true target as generator and zero noise must
/// return the target.
pub fn telescoping(table: &ScheduleTable, seed: u64) -> Result<Check> {
    let x0 = Tensor::from_fn(&[3, 5], |i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin());
    let y = Tensor::from_fn(&[3, 5], |i| ((i as f64 + 2.0) * 1.3 + seed as f64).cos());
    let oracle = |_: &Tensor, _: usize, _: &Tensor, _: &Tensor| Ok(x0.clone());
    let opts = SamplerOptions {
        zero_noise: true,
        ..SamplerOptions::default()
    };
    let out = reverse_chain(&oracle, &y, table, &opts)?;
    let err = out.x0.max_abs_diff(&x0);
    Ok(check(Suite::Telescoping, table, None, err, TELESCOPE_TOL, "G = true x0, zero noise".into()))
}

/// Result of driving the recursion with `G(u) = 0.5 u + c`.
#[derive(Clone, Debug)]
pub struct ContractionReport {
    /// `||G(x*) - x*|| / ||x*||` at the returned estimate.
    pub final_residual: f64,
    pub recursions: usize,
    /// `|x^{r+1} - 2c| / |x^r - 2c|` for successive recursions.
    pub error_ratios: Vec<f64>,
}

pub fn affine_contraction(t: usize, rel_tol: f64) -> Result<ContractionReport> {
    let c = Tensor::from_fn(&[2, 4], |i| 0.1 + 0.05 * i as f64);
    let g = |_: &Tensor, _: usize, _: &Tensor, u: &Tensor| u.zip_map(&c, |u, c| 0.5 * u + c);
    let fixed = c.map(|v| 2.0 * v);
    let x = Tensor::zeros(c.shape());
    let opts = SamplerOptions {
        rel_tol,
        r_max: 64,
        ..SamplerOptions::default()
    };
    let est = self_consistent_estimate(&g, &x, t, &x, &opts)?;
    let final_residual = max_relative_change(&g(&x, t, &x, &est.x0)?, &est.x0);

    let mut errors = Vec::new();
    for r_max in 1..=6 {
        let o = SamplerOptions {
            rel_tol: 1e-15,
            r_max,
            ..SamplerOptions::default()
        };
        let e = self_consistent_estimate(&g, &x, t, &x, &o)?;
        errors.push(e.x0.max_abs_diff(&fixed));
    }
    let error_ratios = errors.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(ContractionReport {
        final_residual,
        recursions: est.recursions,
        error_ratios,
    })
}

fn self_consistency(table: &ScheduleTable) -> Result<Check> {
    let rel_tol = SamplerOptions::default().rel_tol;
    let rep = affine_contraction(table.steps().div_ceil(2), rel_tol)?;
    let ratio_err = rep
        .error_ratios
        .iter()
        .map(|r| (r - 0.5).abs() / 0.5)
        .fold(0.0, f64::max);
    let mut c = check(
        Suite::SelfConsistency,
        table,
        None,
        ratio_err,
        CONTRACTION_RATIO_TOL,
        format!(
            "residual {:.2e} after {} recursions",
            rep.final_residual, rep.recursions
        ),
    );
    c.passed &= rep.final_residual < rel_tol;
    Ok(c)
}

/// Runs the requested suites over every `(variant, T)` pair.
pub fn run(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rows = Vec::new();
    for &steps in &opts.steps {
        for variant in VARIANTS {
            let table = build_schedule(&ScheduleConfig {
                steps,
                gamma: opts.gamma,
                variant,
            })?;
            for &suite in &opts.suites {
                match suite {
                    Suite::Schedule => rows.push(schedule_invariants(&table)),
                    Suite::Markov => rows.push(markov_composition(&table)?),
                    Suite::Posterior => {
                        let per_t = posterior_oracle(&table, opts.posterior_inputs, opts.seed)?;
                        if opts.per_step {
                            rows.extend(per_t);
                        } else {
                            let worst = per_t.iter().map(|c| c.error).fold(0.0, f64::max);
                            let failed = per_t.iter().filter(|c| !c.passed).count();
                            let mut row = check(
                                Suite::Posterior,
                                &table,
                                None,
                                worst,
                                POSTERIOR_TOL,
                                format!("{} steps x {} inputs", per_t.len(), opts.posterior_inputs),
                            );
                            row.passed = failed == 0;
                            rows.push(row);
                        }
                    }
                    Suite::Telescoping => rows.push(telescoping(&table, opts.seed)?),
                    Suite::SelfConsistency => rows.push(self_consistency(&table)?),
                }
            }
        }
    }
    Ok(rows)
}

/// Empirical mean and variance against their targets, in standard errors.
#[derive(Clone, Copy, Debug)]
pub struct MonteCarloCheck {
    pub t: usize,
    pub mean_z: f64,
    pub var_z: f64,
}

impl MonteCarloCheck {
    pub fn passed(&self) -> bool {
        self.mean_z.abs() <= MC_SIGMAS && self.var_z.abs() <= MC_SIGMAS
    }
}

fn mc_z(samples: &[f64], mean: f64, var: f64, t: usize) -> MonteCarloCheck {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1.0);
    let mean_se = (var / n).sqrt();
    let var_se = var * (2.0 / (n - 1.0)).sqrt();
    let z = |d: f64, se: f64| if se == 0.0 { if d.abs() < 1e-12 { 0.0 } else { f64::INFINITY } } else { d / se };
    MonteCarloCheck {
        t,
        mean_z: z(m - mean, mean_se),
        var_z: z(v - var, var_se),
    }
}

/// Chains `draws` scalar forward steps from `x0` and compares the state at
/// each of `checkpoints` with the marginal law.
pub fn monte_carlo_chain(
    table: &ScheduleTable,
    x0: f64,
    y: f64,
    draws: usize,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<MonteCarloCheck>> {
    let x0s = Tensor::full(&[draws, 1], x0);
    let ys = Tensor::full(&[draws, 1], y);
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let mut x = x0s;
    let mut out = Vec::new();
    for t in 1..=last {
        x = sample_step(&x, &ys, t, table, &Noise::Seeded(seed))?;
        if checkpoints.contains(&t) {
            let mean = table.mu_x0(t) * x0 + table.mu_y(t) * y;
            out.push(mc_z(x.data(), mean, table.sigma2(t), t));
        }
    }
    Ok(out)
}

/// Draws `x_t` from the marginal, then `x_{t-1}` from the posterior with the
/// true target, and compares with the `t - 1` marginal.
pub fn monte_carlo_posterior(
    table: &ScheduleTable,
    x0: f64,
    y: f64,
    draws: usize,
    t: usize,
    seed: u64,
) -> Result<MonteCarloCheck> {
    let x0s = Tensor::full(&[draws, 1], x0);
    let ys = Tensor::full(&[draws, 1], y);
    let noise = Noise::Seeded(seed);
    let x_t = sample_marginal(&x0s, &ys, t, table, &noise)?;
    let x_prev = posterior_sample(&x_t, &ys, &x0s, t, table, &noise)?;
    let mean = table.mu_x0(t - 1) * x0 + table.mu_y(t - 1) * y;
    Ok(mc_z(x_prev.data(), mean, table.sigma2(t - 1), t))
}
