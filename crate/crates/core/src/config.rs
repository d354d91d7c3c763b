//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! [`KEYS`] documents every key with its default.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nets::{NetConfig, NetKind};
use crate::sampler::SamplerOptions;
use crate::schedule::{ScheduleConfig, Variant};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task", "gauss2gauss", "synthetic task: gauss2gauss | shapes16"),
    ("n", "2000", "number of synthetic pairs (split 80/10/10)"),
    ("data_seed", "1", "seed of the synthetic data generator"),
    ("data_dir", "", "directory written by `data make`; overrides task/n/data_seed"),
    ("T", "32", "number of diffusion steps"),
    ("gamma", "2.2", "end-point noise variance of the soft prior"),
    ("variant", "selfrdb", "noise schedule: selfrdb | regular_bridge"),
    ("net", "mlp", "backbone: mlp | tiny_unet"),
    ("width", "64", "mlp hidden units"),
    ("depth", "2", "mlp residual hidden layers"),
    ("channels", "8", "tiny_unet base channels"),
    ("time_embed_dim", "256", "sinusoidal time encoding size (even)"),
    ("time_hidden", "32", "width of the learned time-encoding map"),
    ("lambda1", "1", "weight of the l1 term in the generator loss"),
    ("lambda2", "1", "weight of the gradient penalty in the discriminator loss"),
    ("lr", "1e-4", "Adam learning rate"),
    ("adam_beta1", "0.5", "Adam first-moment decay"),
    ("adam_beta2", "0.9", "Adam second-moment decay"),
    ("steps", "2000", "training steps"),
    ("batch_size", "64", "pairs per training step"),
    ("r_train", "2", "generator recursions per training step"),
    ("self_cond_prob", "0.5", "probability of feeding the detached earlier estimate"),
    ("no_soft_prior", "false", "ablation: use the regular-bridge schedule"),
    ("no_source_guidance", "false", "ablation: generator sees zeros in place of y"),
    ("no_self_consistency", "false", "ablation: one generator call per step"),
    ("rel_tol", "0.01", "sampler recursion tolerance"),
    ("r_max", "4", "sampler recursion cap"),
    ("seed", "0", "training and sampling seed"),
    ("checkpoint_every", "500", "steps between periodic checkpoints (0 = final only)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub r_train: usize,
    pub self_cond_prob: f64,
    pub no_soft_prior: bool,
    pub no_source_guidance: bool,
    pub no_self_consistency: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        ExperimentConfig::default().train
    }
}

impl TrainConfig {
    /// Training-time recursions after applying the ablation flag.
    pub fn effective_r_train(&self) -> usize {
        if self.no_self_consistency {
            1
        } else {
            self.r_train
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub n: usize,
    pub data_seed: u64,
    pub data_dir: Option<String>,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            task: Task::Gauss2Gauss,
            n: 0,
            data_seed: 0,
            data_dir: None,
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                lr: 0.0,
                adam_beta1: 0.0,
                adam_beta2: 0.0,
                steps: 0,
                batch_size: 0,
                r_train: 0,
                self_cond_prob: 0.0,
                no_soft_prior: false,
                no_source_guidance: false,
                no_self_consistency: false,
                seed: 0,
                checkpoint_every: 0,
            },
            sampler: SamplerOptions::default(),
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("built-in default must parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for key `{key}`"))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "n" => self.n = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| v.to_string()),
            "T" => self.schedule.steps = parse(key, v)?,
            "gamma" => self.schedule.gamma = parse(key, v)?,
            "variant" => self.schedule.variant = v.parse()?,
            "net" => self.net.kind = v.parse::<NetKind>()?,
            "width" => self.net.width = parse(key, v)?,
            "depth" => self.net.depth = parse(key, v)?,
            "channels" => self.net.channels = parse(key, v)?,
            "time_embed_dim" => self.net.time_embed_dim = parse(key, v)?,
            "time_hidden" => self.net.time_hidden = parse(key, v)?,
            "lambda1" => self.train.lambda1 = parse(key, v)?,
            "lambda2" => self.train.lambda2 = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "r_train" => self.train.r_train = parse(key, v)?,
            "self_cond_prob" => self.train.self_cond_prob = parse(key, v)?,
            "no_soft_prior" => self.train.no_soft_prior = parse_bool(key, v)?,
            "no_source_guidance" => self.train.no_source_guidance = parse_bool(key, v)?,
            "no_self_consistency" => self.train.no_self_consistency = parse_bool(key, v)?,
            "rel_tol" => self.sampler.rel_tol = parse(key, v)?,
            "r_max" => self.sampler.r_max = parse(key, v)?,
            "seed" => {
                self.train.seed = parse(key, v)?;
                self.sampler.seed = self.train.seed;
            }
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.to_string(),
            "n" => self.n.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "data_dir" => self.data_dir.clone().unwrap_or_default(),
            "T" => self.schedule.steps.to_string(),
            "gamma" => fmt_f64(self.schedule.gamma),
            "variant" => self.schedule.variant.to_string(),
            "net" => self.net.kind.to_string(),
            "width" => self.net.width.to_string(),
            "depth" => self.net.depth.to_string(),
            "channels" => self.net.channels.to_string(),
            "time_embed_dim" => self.net.time_embed_dim.to_string(),
            "time_hidden" => self.net.time_hidden.to_string(),
            "lambda1" => fmt_f64(self.train.lambda1),
            "lambda2" => fmt_f64(self.train.lambda2),
            "lr" => fmt_f64(self.train.lr),
            "adam_beta1" => fmt_f64(self.train.adam_beta1),
            "adam_beta2" => fmt_f64(self.train.adam_beta2),
            "steps" => self.train.steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "r_train" => self.train.r_train.to_string(),
            "self_cond_prob" => fmt_f64(self.train.self_cond_prob),
            "no_soft_prior" => self.train.no_soft_prior.to_string(),
            "no_source_guidance" => self.train.no_source_guidance.to_string(),
            "no_self_consistency" => self.train.no_self_consistency.to_string(),
            "rel_tol" => fmt_f64(self.sampler.rel_tol),
            "r_max" => self.sampler.r_max.to_string(),
            "seed" => self.train.seed.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", ln + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| e.context(format_args!("line {}", ln + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| e.context(path.display()))
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("documented key")).unwrap();
        }
        out
    }

    /// Schedule after applying the soft-prior ablation.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        let mut s = self.schedule;
        if self.train.no_soft_prior {
            s.variant = Variant::RegularBridge;
        }
        s
    }

    /// Sampler options after applying the self-consistency ablation.
    pub fn effective_sampler(&self) -> SamplerOptions {
        let mut s = self.sampler.clone();
        if self.train.no_self_consistency {
            s.r_max = 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.sampler.validate()?;
        let t = &self.train;
        if !(t.lambda1 >= 0.0 && t.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        if !(t.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if t.batch_size == 0 || t.r_train == 0 {
            return Err(Error::Config("batch_size and r_train must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&t.self_cond_prob) {
            return Err(Error::Config("self_cond_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// One line per key for usage messages.
    pub fn key_docs() -> String {
        let mut out = String::new();
        for (k, d, doc) in KEYS {
            writeln!(out, "  {k:<20} {doc} (default {d})").unwrap();
        }
        out
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
