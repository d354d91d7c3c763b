//! Forward bridge sampling from a (target, source) pair.

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{Noise, Purpose};
use crate::schedule::{ScheduleTable, Variant};
use crate::tensor::Tensor;

/// `mu_x0_t x0 + mu_y_t y + sigma_t eps`.
pub fn sample_marginal(
    x0: &Tensor,
    y: &Tensor,
    t: usize,
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    x0.ensure_same_shape(y)?;
    table.check_t(t, 0)?;
    let ts = vec![t; x0.batch()];
    sample_marginal_at(x0, y, &ts, table, noise)
}

/// Marginal draw with a separate timestep for each batch element.
pub fn sample_marginal_at(
    x0: &Tensor,
    y: &Tensor,
    ts: &[usize],
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    x0.ensure_same_shape(y)?;
    check_batch_times(x0, ts, table, 0)?;
    let n = x0.sample_len();
    let mut out = Tensor::zeros(x0.shape());
    parallel::for_each_chunk(out.data_mut(), n, |i, dst| {
        let t = ts[i];
        noise.fill(dst, i as u64, t as u64, Purpose::Marginal);
        let (mx, my, s) = (table.mu_x0(t), table.mu_y(t), table.sigma(t));
        for ((d, a), b) in dst.iter_mut().zip(x0.sample(i)).zip(y.sample(i)) {
            *d = mx * a + my * b + s * *d;
        }
    });
    Ok(out)
}

/// End-point draw `y + sigma_T eps`.
///
/// For the regular bridge `sigma_T = 0` and `y` is returned unchanged.
pub fn sample_endpoint(y: &Tensor, table: &ScheduleTable, noise: &Noise) -> Result<Tensor> {
    let steps = table.steps();
    let sigma = table.sigma(steps);
    if table.variant() == Variant::RegularBridge && sigma != 0.0 {
        return Err(Error::Variant(
            "regular bridge end-point must be noise-free".into(),
        ));
    }
    let n = y.sample_len();
    let mut out = Tensor::zeros(y.shape());
    parallel::for_each_chunk(out.data_mut(), n, |i, dst| {
        noise.fill(dst, i as u64, steps as u64, Purpose::Endpoint);
        for (d, b) in dst.iter_mut().zip(y.sample(i)) {
            *d = b + sigma * *d;
        }
    });
    Ok(out)
}

/// One forward transition `a_t x_{t-1} + b_t y + sqrt(sigma2_step) eps`.
pub fn sample_step(
    x_prev: &Tensor,
    y: &Tensor,
    t: usize,
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    let ts = vec![t; x_prev.batch()];
    sample_step_at(x_prev, y, &ts, table, noise)
}

pub fn sample_step_at(
    x_prev: &Tensor,
    y: &Tensor,
    ts: &[usize],
    table: &ScheduleTable,
    noise: &Noise,
) -> Result<Tensor> {
    x_prev.ensure_same_shape(y)?;
    check_batch_times(x_prev, ts, table, 1)?;
    let params = ts
        .iter()
        .map(|&t| table.transition_params(t))
        .collect::<Result<Vec<_>>>()?;
    let n = x_prev.sample_len();
    let mut out = Tensor::zeros(x_prev.shape());
    parallel::for_each_chunk(out.data_mut(), n, |i, dst| {
        let p = params[i];
        noise.fill(dst, i as u64, ts[i] as u64, Purpose::Step);
        let s = p.sigma2_step.sqrt();
        for ((d, a), b) in dst.iter_mut().zip(x_prev.sample(i)).zip(y.sample(i)) {
            *d = p.a * a + p.b * b + s * *d;
        }
    });
    Ok(out)
}

pub(crate) fn check_batch_times(
    x: &Tensor,
    ts: &[usize],
    table: &ScheduleTable,
    lo: usize,
) -> Result<()> {
    if ts.len() != x.batch() {
        return Err(Error::Shape {
            expected: vec![x.batch()],
            got: vec![ts.len()],
        });
    }
    for &t in ts {
        table.check_t(t, lo)?;
    }
    Ok(())
}
