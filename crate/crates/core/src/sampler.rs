//! Reverse chain with self-consistent recursive target estimation.
//!
//! Starting from the noise-added source, each reverse step iterates the
//! generator on its own target estimate (`x0^{r+1} = G(x_t, t, y, x0^r)`,
//! `x0^1 = 0`) until the estimate is self-consistent, then draws `x_{t-1}`
//! from the analytic posterior with that estimate in place of the unknown
//! target. The clean source `y` is passed to the generator at every step.

use crate::error::{Error, Result};
use crate::forward::sample_endpoint;
use crate::nets::{Network, Role};
use crate::posterior::posterior_sample;
use crate::rng::Noise;
use crate::schedule::ScheduleTable;
use crate::tensor::{l2, Tensor};

/// Guard added to the denominator of the relative-change test.
pub const REL_GUARD: f64 = 1e-8;

/// Target-estimate predictor `G(x_t, t, y, x0_prev)`.
///
/// Implementations must allow concurrent read-only evaluation.
pub trait Generator: Sync {
    fn predict(&self, x_t: &Tensor, t: usize, y: &Tensor, x0_prev: &Tensor) -> Result<Tensor>;
}

impl<F> Generator for F
where
    F: Fn(&Tensor, usize, &Tensor, &Tensor) -> Result<Tensor> + Sync,
{
    fn predict(&self, x_t: &Tensor, t: usize, y: &Tensor, x0_prev: &Tensor) -> Result<Tensor> {
        self(x_t, t, y, x0_prev)
    }
}

/// A trained generator network. With `source_guidance` off the network sees
/// a zero tensor in place of `y`.
#[derive(Clone, Debug)]
pub struct NetGenerator {
    pub net: Network,
    pub source_guidance: bool,
}

impl NetGenerator {
    pub fn new(net: Network, source_guidance: bool) -> Result<Self> {
        if net.role() != Role::Generator {
            return Err(Error::Config("sampler needs a generator network".into()));
        }
        Ok(NetGenerator {
            net,
            source_guidance,
        })
    }
}

impl Generator for NetGenerator {
    fn predict(&self, x_t: &Tensor, t: usize, y: &Tensor, x0_prev: &Tensor) -> Result<Tensor> {
        let ts = vec![t; x_t.batch()];
        if self.source_guidance {
            self.net.generate(x_t, &ts, y, x0_prev)
        } else {
            self.net.generate(x_t, &ts, &Tensor::zeros(y.shape()), x0_prev)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerOptions {
    /// Relative-change threshold that ends the recursion.
    pub rel_tol: f64,
    /// Maximum generator calls per reverse step.
    pub r_max: usize,
    pub emit_trajectory: bool,
    pub seed: u64,
    /// Replace every noise draw by zero (mean path).
    pub zero_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            rel_tol: 0.01,
            r_max: 4,
            emit_trajectory: false,
            seed: 0,
            zero_noise: false,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::Config(format!(
                "rel_tol must lie in (0, 1), got {}",
                self.rel_tol
            )));
        }
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> Noise {
        if self.zero_noise {
            Noise::Zero
        } else {
            Noise::Seeded(self.seed)
        }
    }
}

/// Result of one self-consistent recursion.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub x0: Tensor,
    /// Generator calls made.
    pub recursions: usize,
    /// Largest per-sample relative change after each call.
    pub changes: Vec<f64>,
}

/// Largest per-sample `||new - old|| / (||old|| + 1e-8)` over the batch.
pub fn max_relative_change(new: &Tensor, old: &Tensor) -> f64 {
    (0..new.batch())
        .map(|i| {
            let (a, b) = (new.sample(i), old.sample(i));
            let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            diff / (l2(b) + REL_GUARD)
        })
        .fold(0.0, f64::max)
}

pub fn self_consistent_estimate<G: Generator + ?Sized>(
    generator: &G,
    x_t: &Tensor,
    t: usize,
    y: &Tensor,
    opts: &SamplerOptions,
) -> Result<Estimate> {
    opts.validate()?;
    let mut current = Tensor::zeros(x_t.shape());
    let mut changes = Vec::new();
    let mut norms = Vec::new();
    for r in 1..=opts.r_max {
        let next = generator.predict(x_t, t, y, &current)?;
        next.ensure_same_shape(x_t)?;
        norms.push(next.norm2());
        if !next.all_finite() {
            return Err(Error::NonFinite(format!(
                "generator output at t = {t}, recursion {r}; norm history {norms:?}"
            )));
        }
        let change = max_relative_change(&next, &current);
        changes.push(change);
        current = next;
        if change < opts.rel_tol {
            return Ok(Estimate {
                x0: current,
                recursions: r,
                changes,
            });
        }
    }
    Ok(Estimate {
        x0: current,
        recursions: opts.r_max,
        changes,
    })
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub x0: Tensor,
    /// `x_T, x_{T-1}, ..., x_0` when requested.
    pub trajectory: Vec<Tensor>,
    /// Generator calls per reverse step, ordered `t = T..1`.
    pub recursions: Vec<usize>,
}

impl ChainOutput {
    pub fn mean_recursions(&self) -> f64 {
        if self.recursions.is_empty() {
            0.0
        } else {
            self.recursions.iter().sum::<usize>() as f64 / self.recursions.len() as f64
        }
    }

    pub fn generator_calls(&self) -> usize {
        self.recursions.iter().sum()
    }
}

pub fn reverse_chain<G: Generator + ?Sized>(
    generator: &G,
    y: &Tensor,
    table: &ScheduleTable,
    opts: &SamplerOptions,
) -> Result<ChainOutput> {
    opts.validate()?;
    let noise = opts.noise();
    let steps = table.steps();
    let mut x = sample_endpoint(y, table, &noise)?;
    let mut trajectory = Vec::new();
    if opts.emit_trajectory {
        trajectory.push(x.clone());
    }
    let mut recursions = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let est = self_consistent_estimate(generator, &x, t, y, opts)?;
        recursions.push(est.recursions);
        x = posterior_sample(&x, y, &est.x0, t, table, &noise)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("chain state at t = {}", t - 1)));
        }
        if opts.emit_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(ChainOutput {
        x0: x,
        trajectory,
        recursions,
    })
}
