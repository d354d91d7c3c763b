//! Precomputed per-step tables for the soft-prior bridge and the regular bridge.
//!
//! The per-step weight `g_t` is the squared tent `(T - |2t - T|)^2` evaluated
//! at the half-integer midpoint `t - 1/2` and normalized so the weights sum to
//! one. With that normalization `s2_t` (the running sum) doubles as the source
//! mixture weight, and the soft-prior variance `gamma * sqrt(s2_t)` ends at
//! exactly `gamma`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Tolerance below which a negative one-step variance is treated as roundoff.
const STEP_VARIANCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Noise variance grows monotonically to `gamma` at the end-point.
    SelfRdb,
    /// Noise variance is pinned to zero at both end-points.
    RegularBridge,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SelfRdb => "selfrdb",
            Variant::RegularBridge => "regular_bridge",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "selfrdb" | "self_rdb" | "soft" => Ok(Variant::SelfRdb),
            "regular_bridge" | "regularbridge" | "regular" => Ok(Variant::RegularBridge),
            other => Err(Error::Config(format!(
                "unknown schedule variant `{other}` (expected selfrdb or regular_bridge)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub gamma: f64,
    pub variant: Variant,
}

impl ScheduleConfig {
    pub fn new(steps: usize, gamma: f64, variant: Variant) -> Self {
        ScheduleConfig {
            steps,
            gamma,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("T must be >= 2, got {}", self.steps)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            gamma: 2.2,
            variant: Variant::SelfRdb,
        }
    }
}

/// Coefficients of the one-step forward transition
/// `x_t = a x_{t-1} + b y + sqrt(sigma2_step) eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub a: f64,
    pub b: f64,
    pub sigma2_step: f64,
}

/// Immutable per-timestep table for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    variant: Variant,
    gamma: f64,
    g: Vec<f64>,
    s2: Vec<f64>,
    sbar2: Vec<f64>,
    mu_x0: Vec<f64>,
    mu_y: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Unnormalized diffusion coefficient `(T - |2t - T|)^2` on the open interval.
pub fn diffusion_coefficient(t: f64, steps: usize) -> Result<f64> {
    let total = steps as f64;
    if !(t > 0.0 && t < total) {
        return Err(Error::Domain(format!(
            "diffusion coefficient needs 0 < t < T, got t = {t}, T = {steps}"
        )));
    }
    let v = total - (2.0 * t - total).abs();
    Ok(v * v)
}

pub fn build_schedule(config: &ScheduleConfig) -> Result<ScheduleTable> {
    config.validate()?;
    let steps = config.steps;

    let mut g = vec![0.0; steps + 1];
    for t in 1..=steps {
        g[t] = diffusion_coefficient(t as f64 - 0.5, steps)?;
    }
    let total: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= total;
    }

    let mut s2 = vec![0.0; steps + 1];
    for t in 1..=steps {
        s2[t] = s2[t - 1] + g[t];
    }
    // Pin the end-point; roundoff in the running sum would otherwise leave
    // mu_x0_T a few ulps away from zero.
    s2[steps] = 1.0;

    let sbar2: Vec<f64> = s2.iter().map(|s| 1.0 - s).collect();
    let mu_x0 = sbar2.clone();
    let mu_y = s2.clone();
    let sigma2: Vec<f64> = match config.variant {
        Variant::SelfRdb => s2.iter().map(|s| config.gamma * s.sqrt()).collect(),
        Variant::RegularBridge => s2.iter().map(|s| s * (1.0 - s)).collect(),
    };

    Ok(ScheduleTable {
        variant: config.variant,
        gamma: config.gamma,
        g,
        s2,
        sbar2,
        mu_x0,
        mu_y,
        sigma2,
    })
}

impl ScheduleTable {
    pub fn steps(&self) -> usize {
        self.g.len() - 1
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn g(&self, t: usize) -> f64 {
        self.g[t]
    }

    pub fn s2(&self, t: usize) -> f64 {
        self.s2[t]
    }

    pub fn sbar2(&self, t: usize) -> f64 {
        self.sbar2[t]
    }

    pub fn mu_x0(&self, t: usize) -> f64 {
        self.mu_x0[t]
    }

    pub fn mu_y(&self, t: usize) -> f64 {
        self.mu_y[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2[t].sqrt()
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::Domain(format!(
                "timestep {t} outside {lo}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// One-step transition `q(x_t | x_{t-1}, y)` consistent with the marginals.
    pub fn transition_params(&self, t: usize) -> Result<StepParams> {
        self.check_t(t, 1)?;
        let prev = self.mu_x0[t - 1];
        if prev <= 0.0 {
            return Err(Error::Schedule(format!(
                "mu_x0 vanishes at t = {} before the end-point",
                t - 1
            )));
        }
        let a = self.mu_x0[t] / prev;
        let b = self.mu_y[t] - a * self.mu_y[t - 1];
        let sigma2_step = self.sigma2[t] - a * a * self.sigma2[t - 1];
        if sigma2_step < -STEP_VARIANCE_TOL {
            return Err(Error::Schedule(format!(
                "one-step variance {sigma2_step:e} is negative at t = {t}; \
                 the variance curve is not Markov-realizable"
            )));
        }
        Ok(StepParams {
            a,
            b,
            sigma2_step: sigma2_step.max(0.0),
        })
    }

    /// CSV with header `t,g,s2,mu_x0,mu_y,sigma2`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,g,s2,mu_x0,mu_y,sigma2\n");
        for t in 0..=self.steps() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t,
                sig17(self.g[t]),
                sig17(self.s2[t]),
                sig17(self.mu_x0[t]),
                sig17(self.mu_y[t]),
                sig17(self.sigma2[t]),
            ));
        }
        out
    }
}

/// Formats with 17 significant digits in scientific notation.
fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(steps: usize, gamma: f64, variant: Variant) -> ScheduleTable {
        build_schedule(&ScheduleConfig::new(steps, gamma, variant)).unwrap()
    }

    #[test]
    fn coefficient_values() {
        assert_eq!(diffusion_coefficient(2.0, 4).unwrap(), 16.0);
        assert_eq!(diffusion_coefficient(0.5, 4).unwrap(), 1.0);
        assert_eq!(diffusion_coefficient(3.5, 4).unwrap(), 1.0);
        assert_eq!(diffusion_coefficient(1.5, 4).unwrap(), 9.0);
    }

    #[test]
    fn coefficient_domain() {
        assert!(matches!(diffusion_coefficient(0.0, 4), Err(Error::Domain(_))));
        assert!(matches!(diffusion_coefficient(4.0, 4), Err(Error::Domain(_))));
        assert!(diffusion_coefficient(-1.0, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(build_schedule(&ScheduleConfig::new(1, 1.0, Variant::SelfRdb)).is_err());
        assert!(build_schedule(&ScheduleConfig::new(4, 0.0, Variant::SelfRdb)).is_err());
        assert!(build_schedule(&ScheduleConfig::new(4, -1.0, Variant::SelfRdb)).is_err());
    }

    // Independent recomputation: midpoint evaluation of the tent by hand.
    #[test]
    fn small_selfrdb_table() {
        let tab = table(4, 2.0, Variant::SelfRdb);
        let raw = [1.0, 9.0, 9.0, 1.0];
        let sum: f64 = raw.iter().sum();
        let expect_g: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        for t in 1..=4 {
            assert!((tab.g(t) - expect_g[t - 1]).abs() < 1e-15);
        }
        let s2 = [0.0, 0.05, 0.5, 0.95, 1.0];
        for t in 0..=4 {
            assert!((tab.s2(t) - s2[t]).abs() < 1e-15, "s2[{t}]");
            assert!((tab.sigma2(t) - 2.0 * s2[t].sqrt()).abs() < 1e-15);
        }
        assert_eq!(tab.sigma2(4), 2.0);
        let p = tab.transition_params(2).unwrap();
        assert!((p.a - 0.5 / 0.95).abs() < 1e-15);
    }

    #[test]
    fn small_regular_table() {
        let tab = table(4, 2.0, Variant::RegularBridge);
        let expect = [0.0, 0.0475, 0.25, 0.0475, 0.0];
        for t in 0..=4 {
            assert!((tab.sigma2(t) - expect[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn first_transition_is_marginal() {
        for variant in [Variant::SelfRdb, Variant::RegularBridge] {
            let tab = table(16, 2.2, variant);
            let p = tab.transition_params(1).unwrap();
            assert_eq!(p.a, tab.mu_x0(1));
            assert!((p.b - tab.mu_y(1)).abs() < 1e-15);
            assert!((p.sigma2_step - tab.sigma2(1)).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_rejects_bad_t() {
        let tab = table(8, 1.0, Variant::SelfRdb);
        assert!(tab.transition_params(0).is_err());
        assert!(tab.transition_params(9).is_err());
    }

    #[test]
    fn csv_has_one_row_per_timestep() {
        let csv = table(4, 2.0, Variant::SelfRdb).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,g,s2,mu_x0,mu_y,sigma2");
        assert_eq!(lines.len(), 6);
        let last: Vec<f64> = lines[5].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(last, vec![4.0, 0.05, 1.0, 0.0, 1.0, 2.0]);
    }
}
