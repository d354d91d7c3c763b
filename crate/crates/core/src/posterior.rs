//! Closed-form reverse posterior `q(x_{t-1} | x_t, y, x0)`.
//!
//! The posterior is the product of the one-step transition likelihood and the
//! `t-1` marginal, normalized. With `rho = sigma2_{t-1} / sigma2_t`:
//!
//! ```text
//! c_xt = rho * a_t
//! c_y  = mu_y_{t-1} - mu_y_t * rho * a_t
//! c_x0 = mu_x0_{t-1} * sigma2_step / sigma2_t
//! v    = sigma2_step * rho
//! ```
//!
//! and the three mean coefficients always sum to one.

use crate::error::{Error, Result};
use crate::forward::check_batch_times;
use crate::parallel;
use crate::rng::{Noise, Purpose};
use crate::schedule::ScheduleTable;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub c_xt: f64,
    pub c_y: f64,
    pub c_x0: f64,
    pub v: f64,
}

impl PosteriorCoeffs {
    pub fn mean(&self, x_t: f64, y: f64, x0: f64) -> f64 {
        self.c_xt * x_t + self.c_y * y + self.c_x0 * x0
    }
}

pub fn posterior_coeffs(table: &ScheduleTable, t: usize) -> Result<PosteriorCoeffs> {
    let step = table.transition_params(t)?;
    let var_t = table.sigma2(t);
    let var_prev = table.sigma2(t - 1);
    if var_t == 0.0 {
        // Regular bridge end-step: x_T carries no information beyond y, so
        // the posterior is the t-1 marginal itself.
        return Ok(PosteriorCoeffs {
            c_xt: 0.0,
            c_y: table.mu_y(t - 1),
            c_x0: table.mu_x0(t - 1),
            v: var_prev,
        });
    }
    let rho = var_prev / var_t;
    Ok(PosteriorCoeffs {
        c_xt: rho * step.a,
        c_y: table.mu_y(t - 1) - table.mu_y(t) * rho * step.a,
        c_x0: table.mu_x0(t - 1) * step.sigma2_step / var_t,
        v: step.sigma2_step * rho,
    })
}

/// Draws `m + sqrt(v) eps` with `m = c_xt x_t + c_y y + c_x0 x0_hat`.
pub fn posterior_sample(
    x_t: &Tensor,
    y: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    let ts = vec![t; x_t.batch()];
    posterior_sample_at(x_t, y, x0_hat, &ts, table, noise)
}

/// Posterior draw with a separate timestep per batch element.
pub fn posterior_sample_at(
    x_t: &Tensor,
    y: &Tensor,
    x0_hat: &Tensor,
    ts: &[usize],
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    x_t.ensure_same_shape(y)?;
    x_t.ensure_same_shape(x0_hat)?;
    check_batch_times(x_t, ts, table, 1)?;
    let coeffs = ts
        .iter()
        .map(|&t| posterior_coeffs(table, t))
        .collect::<Result<Vec<_>>>()?;
    let n = x_t.sample_len();
    let mut out = Tensor::zeros(x_t.shape());
    parallel::for_each_chunk(out.data_mut(), n, |i, dst| {
        let c = coeffs[i];
        noise.fill(dst, i as u64, ts[i] as u64, Purpose::Posterior);
        let sd = c.v.sqrt();
        let (xs, ys, zs) = (x_t.sample(i), y.sample(i), x0_hat.sample(i));
        for k in 0..dst.len() {
            dst[k] = c.mean(xs[k], ys[k], zs[k]) + sd * dst[k];
        }
    });
    Ok(out)
}

/// Number of grid points used by the integration route of the oracle.
pub const ORACLE_GRID_POINTS: usize = 1 << 14;

/// Independent scalar posterior computed two ways: completing the square on
/// the product of the two Gaussian factors, and brute-force integration over
/// `x_{t-1}` on a fine grid. Returns the product route after checking that
/// the grid route agrees within `1e-6`.
pub fn bayes_oracle_1d(
    table: &ScheduleTable,
    t: usize,
    x_t: f64,
    y: f64,
    x0: f64,
) -> Result<(f64, f64)> {
    let (lik, prior) = oracle_factors(table, t, x_t, y, x0)?;
    let exact = product_of_gaussians(lik, prior);
    if exact.1 == 0.0 {
        // Point mass; nothing to integrate.
        return Ok(exact);
    }
    let grid = grid_posterior(lik, prior, ORACLE_GRID_POINTS);
    let (dm, dv) = ((grid.0 - exact.0).abs(), (grid.1 - exact.1).abs());
    if dm > 1e-6 || dv > 1e-6 {
        return Err(Error::Oracle(format!(
            "t = {t}: product route ({:.12e}, {:.12e}) vs grid route ({:.12e}, {:.12e})",
            exact.0, exact.1, grid.0, grid.1
        )));
    }
    Ok(exact)
}

/// A Gaussian factor in `x_{t-1}`. The likelihood factor is written as
/// `N(x_t; slope * x + offset, var)`; the prior is `N(x; mean, var)`.
#[derive(Clone, Copy, Debug)]
struct Likelihood {
    slope: f64,
    offset: f64,
    target: f64,
    var: f64,
}

#[derive(Clone, Copy, Debug)]
struct Prior {
    mean: f64,
    var: f64,
}

fn oracle_factors(
    table: &ScheduleTable,
    t: usize,
    x_t: f64,
    y: f64,
    x0: f64,
) -> Result<(Likelihood, Prior)> {
    table.check_t(t, 1)?;
    // The transition is rebuilt here from the marginal tables rather than
    // taken from `transition_params`, to keep the oracle independent.
    let a = table.mu_x0(t) / table.mu_x0(t - 1);
    let b = table.mu_y(t) - a * table.mu_y(t - 1);
    let var_step = (table.sigma2(t) - a * a * table.sigma2(t - 1)).max(0.0);
    Ok((
        Likelihood {
            slope: a,
            offset: b * y,
            target: x_t,
            var: var_step,
        },
        Prior {
            mean: table.mu_x0(t - 1) * x0 + table.mu_y(t - 1) * y,
            var: table.sigma2(t - 1),
        },
    ))
}

fn product_of_gaussians(lik: Likelihood, prior: Prior) -> (f64, f64) {
    if prior.var == 0.0 {
        return (prior.mean, 0.0);
    }
    if lik.var == 0.0 || lik.slope == 0.0 {
        // A flat (slope 0) or degenerate likelihood leaves the prior as is.
        // The regular-bridge end-step has both; a point-mass likelihood with
        // a nonzero slope does not arise from a valid schedule.
        return (prior.mean, prior.var);
    }
    // Completing the square in x:
    //   (x_t - offset - slope x)^2 / lv + (x - pm)^2 / pv
    let prec = lik.slope * lik.slope / lik.var + 1.0 / prior.var;
    let lin = lik.slope * (lik.target - lik.offset) / lik.var + prior.mean / prior.var;
    (lin / prec, 1.0 / prec)
}

fn log_density(lik: Likelihood, prior: Prior, x: f64) -> f64 {
    let mut ld = -0.5 * (x - prior.mean).powi(2) / prior.var;
    if lik.var > 0.0 && lik.slope != 0.0 {
        ld -= 0.5 * (lik.target - lik.offset - lik.slope * x).powi(2) / lik.var;
    }
    ld
}

fn grid_moments(lik: Likelihood, prior: Prior, lo: f64, hi: f64, points: usize) -> (f64, f64, f64, f64) {
    let h = (hi - lo) / (points - 1) as f64;
    let logs: Vec<f64> = (0..points)
        .map(|i| log_density(lik, prior, lo + h * i as f64))
        .collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
    // Trapezoid weights; endpoints are negligible at +-12 sd anyway.
    let mut z = 0.0;
    let mut m1 = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let wt = if i == 0 || i == points - 1 { 0.5 } else { 1.0 } * wi;
        z += wt;
        m1 += wt * (lo + h * i as f64);
    }
    let mean = m1 / z;
    let mut m2 = 0.0;
    let mut first = None;
    let mut last = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let x = lo + h * i as f64;
        let wt = if i == 0 || i == points - 1 { 0.5 } else { 1.0 } * wi;
        m2 += wt * (x - mean).powi(2);
        if *wi > 1e-40 {
            first.get_or_insert(x);
            last = x;
        }
    }
    (mean, m2 / z, first.unwrap_or(lo), last)
}

fn grid_posterior(lik: Likelihood, prior: Prior, points: usize) -> (f64, f64) {
    // Window covering both factors at +-12 sd around their own centres.
    let p_sd = prior.var.sqrt();
    let (mut lo, mut hi) = (prior.mean - 12.0 * p_sd, prior.mean + 12.0 * p_sd);
    if lik.var > 0.0 && lik.slope != 0.0 {
        let centre = (lik.target - lik.offset) / lik.slope;
        let sd = lik.var.sqrt() / lik.slope.abs();
        lo = lo.min(centre - 12.0 * sd);
        hi = hi.max(centre + 12.0 * sd);
    }
    // Coarse pass locates the mass, the refined pass resolves it.
    let (_, _, a, b) = grid_moments(lik, prior, lo, hi, points);
    let pad = (b - a).max(1e-300) * 0.05;
    let (mean, var, _, _) = grid_moments(lik, prior, a - pad, b + pad, points);
    (mean, var)
}
