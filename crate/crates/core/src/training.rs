//! Adversarial training of the generator and the step-conditioned
//! discriminator.
//!
//! Each step draws a timestep per element and a true pair `(x_{t-1}, x_t)`
//! from the forward bridge. The generator's target estimate `x0*` feeds the
//! analytic posterior, which yields the fake `x_hat_{t-1}`. The discriminator is updated
//! first, then the generator, with one Adam step each.
//!
//! Every random draw is keyed on `(seed, step)`, so a state is fully
//! described by its weights and optimizer moments at a given step.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{softplus, Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::forward::{sample_marginal_at, sample_step_at};
use crate::io::{write_file, Bundle};
use crate::nets::{Network, ParamSet, Role};
use crate::posterior::posterior_coeffs;
use crate::rng::{substream, Noise, Purpose};
use crate::sampler::NetGenerator;
use crate::schedule::{build_schedule, ScheduleTable};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;
pub const METRICS_HEADER: &str = "step,loss_g,loss_d,l1,gp,recursions_mean";
/// Decay of the running loss averages kept in the state.
pub const EMA_DECAY: f64 = 0.98;

/// `lambda1 mean|x0 - x0*| + mean softplus(-d_fake)`.
pub fn generator_loss(x0: &Tensor, x0_star: &Tensor, d_logits_fake: &Tensor, lambda1: f64) -> Result<f64> {
    x0.ensure_same_shape(x0_star)?;
    let l1 = x0.zip_map(x0_star, |a, b| (a - b).abs())?.mean();
    let adv = d_logits_fake.map(|v| softplus(-v)).mean();
    let loss = lambda1 * l1 + adv;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator loss {loss} (l1 {l1}, adversarial {adv})"
        )));
    }
    Ok(loss)
}

/// `mean softplus(-real) + mean softplus(fake) + lambda2 mean(grad_norm2)`.
pub fn discriminator_loss(
    d_logits_real: &Tensor,
    d_logits_fake: &Tensor,
    grad_real_norm2: &Tensor,
    lambda2: f64,
) -> Result<f64> {
    d_logits_real.ensure_same_shape(d_logits_fake)?;
    let real = d_logits_real.map(|v| softplus(-v)).mean();
    let fake = d_logits_fake.map(softplus).mean();
    let gp = grad_real_norm2.mean();
    let loss = real + fake + lambda2 * gp;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "discriminator loss {loss} (real {real}, fake {fake}, penalty {gp})"
        )));
    }
    Ok(loss)
}

/// Adam moment buffers for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update; `t` is the 1-based update count.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr: f64,
        beta1: f64,
        beta2: f64,
        t: u64,
    ) {
        let c1 = 1.0 - beta1.powf(t as f64);
        let c2 = 1.0 - beta2.powf(t as f64);
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.iter_mut().zip(grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Exponential running averages of the logged losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub loss_g: f64,
    pub loss_d: f64,
    pub l1: f64,
}

impl RunningStats {
    fn push(&mut self, s: &StepStats, first: bool) {
        if first {
            *self = RunningStats {
                loss_g: s.loss_g,
                loss_d: s.loss_d,
                l1: s.l1,
            };
        } else {
            let a = EMA_DECAY;
            self.loss_g = a * self.loss_g + (1.0 - a) * s.loss_g;
            self.loss_d = a * self.loss_d + (1.0 - a) * s.loss_d;
            self.l1 = a * self.l1 + (1.0 - a) * s.l1;
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub l1: f64,
    pub gp: f64,
    pub recursions_mean: f64,
}

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{}",
            self.step, self.loss_g, self.loss_d, self.l1, self.gp, self.recursions_mean
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("bad metrics row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(StepStats {
            step: f[0].parse().map_err(|_| bad())?,
            loss_g: num(f[1])?,
            loss_d: num(f[2])?,
            l1: num(f[3])?,
            gp: num(f[4])?,
            recursions_mean: num(f[5])?,
        })
    }
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepStats>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: missing metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(StepStats::parse_row).collect()
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub sample_shape: Vec<usize>,
    pub generator: Network,
    pub discriminator: Network,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed steps.
    pub step: u64,
    pub stats: RunningStats,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, sample_shape: &[usize]) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = Network::new(config.net.clone(), Role::Generator, sample_shape, seed)?;
        let discriminator = Network::new(config.net.clone(), Role::Discriminator, sample_shape, seed)?;
        Ok(TrainState {
            config: config.clone(),
            sample_shape: sample_shape.to_vec(),
            adam_g: Adam::new(generator.params()),
            adam_d: Adam::new(discriminator.params()),
            generator,
            discriminator,
            step: 0,
            stats: RunningStats::default(),
        })
    }

    /// Schedule table with the ablation flags applied.
    pub fn table(&self) -> Result<ScheduleTable> {
        build_schedule(&self.config.effective_schedule())
    }

    /// The generator wrapped for the reverse sampler.
    pub fn sampler_generator(&self) -> NetGenerator {
        NetGenerator {
            net: self.generator.clone(),
            source_guidance: !self.config.train.no_source_guidance,
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut header = self.config.to_text();
        let shape: Vec<String> = self.sample_shape.iter().map(|d| d.to_string()).collect();
        writeln!(header, "state.sample_shape = {}", shape.join(",")).unwrap();
        writeln!(header, "state.step = {}", self.step).unwrap();
        for (k, v) in [
            ("loss_g", self.stats.loss_g),
            ("loss_d", self.stats.loss_d),
            ("l1", self.stats.l1),
        ] {
            writeln!(header, "state.ema_{k} = {:#018x}", v.to_bits()).unwrap();
        }
        let mut tensors = Vec::new();
        let mut put = |prefix: &str, set: &ParamSet| {
            for (name, t) in set.iter() {
                tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        };
        put("g.", self.generator.params());
        put("d.", self.discriminator.params());
        put("opt.g.m.", &self.adam_g.m);
        put("opt.g.v.", &self.adam_g.v);
        put("opt.d.m.", &self.adam_d.m);
        put("opt.d.v.", &self.adam_d.v);
        Bundle { header, tensors }
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        let mut config_text = String::new();
        let mut shape = None;
        let mut step = None;
        let mut stats = RunningStats::default();
        for line in bundle.header.lines() {
            let Some(rest) = line.trim().strip_prefix("state.") else {
                config_text.push_str(line);
                config_text.push('\n');
                continue;
            };
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad state line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bits = || -> Result<f64> {
                let hex = v.trim_start_matches("0x");
                u64::from_str_radix(hex, 16)
                    .map(f64::from_bits)
                    .map_err(|_| Error::Format(format!("bad state value `{v}` for `{k}`")))
            };
            match k {
                "sample_shape" => {
                    let dims = v
                        .split(',')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("bad sample shape `{v}`")))?;
                    shape = Some(dims);
                }
                "step" => {
                    step = Some(v.parse().map_err(|_| Error::Format(format!("bad step `{v}`")))?)
                }
                "ema_loss_g" => stats.loss_g = bits()?,
                "ema_loss_d" => stats.loss_d = bits()?,
                "ema_l1" => stats.l1 = bits()?,
                _ => return Err(Error::Format(format!("unknown state key `{k}`"))),
            }
        }
        let config = ExperimentConfig::from_text(&config_text)?;
        let sample_shape = shape.ok_or_else(|| Error::Format("checkpoint lacks sample shape".into()))?;
        let step = step.ok_or_else(|| Error::Format("checkpoint lacks step counter".into()))?;

        let collect = |prefix: &str| {
            let mut set = ParamSet::new();
            for (name, t) in &bundle.tensors {
                if let Some(rest) = name.strip_prefix(prefix) {
                    set.insert(rest, t.clone());
                }
            }
            set
        };
        let generator = Network::from_params(config.net.clone(), Role::Generator, &sample_shape, collect("g."))?;
        let discriminator =
            Network::from_params(config.net.clone(), Role::Discriminator, &sample_shape, collect("d."))?;
        // Moment buffers go through the same name/shape checks as the weights.
        let moments = |role: Role, prefix: &str| -> Result<ParamSet> {
            let set = collect(prefix);
            if set.is_empty() {
                let net = if role == Role::Generator { &generator } else { &discriminator };
                return Ok(net.params().zeros_like());
            }
            Ok(Network::from_params(config.net.clone(), role, &sample_shape, set)?
                .params()
                .clone())
        };
        let adam_g = Adam {
            m: moments(Role::Generator, "opt.g.m.")?,
            v: moments(Role::Generator, "opt.g.v.")?,
        };
        let adam_d = Adam {
            m: moments(Role::Discriminator, "opt.d.m.")?,
            v: moments(Role::Discriminator, "opt.d.v.")?,
        };
        Ok(TrainState {
            config,
            sample_shape,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bundle(&Bundle::load(path)?)
            .map_err(|e| e.context(path.display()))
    }
}

/// Training batch for `step`: indices drawn uniformly with replacement.
pub fn draw_batch(dataset: &PairedDataset, batch_size: usize, seed: u64, step: u64) -> (Tensor, Tensor) {
    let train = &dataset.train;
    let mut rng = substream(seed, step, 0, Purpose::BatchIndex);
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..train.len())).collect();
    (train.x0.select(&idx), train.y.select(&idx))
}

fn nonfinite_grads(grads: &[Var<'_>], names: &[String]) -> Option<String> {
    grads
        .iter()
        .zip(names)
        .find(|(g, _)| !g.value().all_finite())
        .map(|(_, n)| n.clone())
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, x0: &Tensor, y: &Tensor, table: &ScheduleTable) -> Result<StepStats> {
    x0.ensure_same_shape(y)?;
    if x0.sample_shape() != state.sample_shape.as_slice() {
        return Err(Error::Shape {
            expected: state.sample_shape.clone(),
            got: x0.sample_shape().to_vec(),
        });
    }
    let cfg = state.config.train.clone();
    let step = state.step;
    let seed = cfg.seed;
    let b = x0.batch();
    let steps = table.steps();
    let noise = Noise::Seeded(seed).derive(step);

    let mut rng = substream(seed, step, 0, Purpose::Timestep);
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
    let prev_ts: Vec<usize> = ts.iter().map(|t| t - 1).collect();

    // x_{t-1} from its marginal and x_t from the forward transition, so the
    // pair follows the joint law of the bridge.
    let x_prev = sample_marginal_at(x0, y, &prev_ts, table, &noise)?;
    let x_t = sample_step_at(&x_prev, y, &ts, table, &noise)?;
    let y_in = if cfg.no_source_guidance {
        Tensor::zeros(y.shape())
    } else {
        y.clone()
    };

    // Detached recursions; the last call sees either zero or their output.
    let r_train = cfg.effective_r_train();
    let mut x0_in = Tensor::zeros(x0.shape());
    let mut depth = vec![1.0; b];
    if r_train > 1 {
        let mut est = Tensor::zeros(x0.shape());
        for _ in 1..r_train {
            est = state.generator.generate(&x_t, &ts, &y_in, &est)?;
        }
        let mut coin = substream(seed, step, 0, Purpose::SelfCondition);
        for i in 0..b {
            if coin.random_bool(cfg.self_cond_prob) {
                x0_in.sample_mut(i).copy_from_slice(est.sample(i));
                depth[i] = r_train as f64;
            }
        }
    }

    let coeffs = ts
        .iter()
        .map(|&t| posterior_coeffs(table, t))
        .collect::<Result<Vec<_>>>()?;
    let n = x0.sample_len();
    let mut base = Tensor::zeros(x0.shape());
    let mut scale = Tensor::zeros(x0.shape());
    for i in 0..b {
        let c = coeffs[i];
        let dst = base.sample_mut(i);
        noise.fill(dst, i as u64, ts[i] as u64, Purpose::Posterior);
        let sd = c.v.sqrt();
        for k in 0..n {
            dst[k] = c.c_xt * x_t.sample(i)[k] + c.c_y * y.sample(i)[k] + sd * dst[k];
        }
        scale.sample_mut(i).fill(c.c_x0);
    }

    let g = Graph::new();
    let gp_vars = state.generator.params().leaves(&g);
    let xt_c = g.constant(x_t.clone());
    let x0_star = state.generator.forward(
        &g,
        &gp_vars,
        &[xt_c, g.constant(y_in), g.constant(x0_in)],
        &ts,
    )?;
    let x_hat = g.constant(base).add(x0_star.mul_const(Rc::new(scale)));

    // Discriminator update.
    let dp = state.discriminator.params().leaves(&g);
    let x_real = g.leaf(x_prev);
    let real = state.discriminator.forward(&g, &dp, &[x_real, xt_c], &ts)?;
    let fake = state.discriminator.forward(&g, &dp, &[x_hat.detach(), xt_c], &ts)?;
    let gx = g.grad(real.sum(), &[x_real])[0];
    let gn2 = gx.square().sum_per_sample();
    let gp_term = gn2.mean();
    let loss_d = real
        .neg()
        .softplus()
        .mean()
        .add(fake.softplus().mean())
        .add(gp_term.scale(cfg.lambda2));
    let loss_d_val = loss_d.value().data()[0];
    if !loss_d_val.is_finite() {
        discriminator_loss(&real.value(), &fake.value(), &gn2.value(), cfg.lambda2)?;
        return Err(Error::NonFinite(format!("step {step}: discriminator loss {loss_d_val}")));
    }
    let grads_d = g.grad(loss_d, dp.all());
    if let Some(name) = nonfinite_grads(&grads_d, state.discriminator.params().names()) {
        return Err(Error::NonFinite(format!(
            "step {step}: discriminator gradient `{name}` (loss {loss_d_val})"
        )));
    }
    let grads_d: Vec<Tensor> = grads_d.iter().map(|v| v.value().as_ref().clone()).collect();
    let t_update = step + 1;
    state.adam_d.update(
        state.discriminator.params_mut(),
        &grads_d,
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        t_update,
    );

    // Generator update against the refreshed discriminator.
    let dp = state.discriminator.params().leaves(&g);
    let fake = state.discriminator.forward(&g, &dp, &[x_hat, xt_c], &ts)?;
    let l1 = x0_star.sub(g.constant(x0.clone())).abs().mean();
    let loss_g = l1.scale(cfg.lambda1).add(fake.neg().softplus().mean());
    let loss_g_val = loss_g.value().data()[0];
    let l1_val = l1.value().data()[0];
    if !loss_g_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: generator loss {loss_g_val} (l1 {l1_val})"
        )));
    }
    let grads_g = g.grad(loss_g, gp_vars.all());
    if let Some(name) = nonfinite_grads(&grads_g, state.generator.params().names()) {
        return Err(Error::NonFinite(format!(
            "step {step}: generator gradient `{name}` (loss {loss_g_val})"
        )));
    }
    let grads_g: Vec<Tensor> = grads_g.iter().map(|v| v.value().as_ref().clone()).collect();
    state.adam_g.update(
        state.generator.params_mut(),
        &grads_g,
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        t_update,
    );

    state.step += 1;
    let stats = StepStats {
        step: state.step,
        loss_g: loss_g_val,
        loss_d: loss_d_val,
        l1: l1_val,
        gp: gp_term.value().data()[0],
        recursions_mean: depth.iter().sum::<f64>() / b as f64,
    };
    state.stats.push(&stats, state.step == 1);
    Ok(stats)
}

/// Paths written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub history: Vec<StepStats>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.brck")
}

pub const FINAL_CHECKPOINT: &str = "final.brck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.txt";

/// Trains from scratch into `out_dir`.
pub fn train(config: &ExperimentConfig, dataset: &PairedDataset, out_dir: impl AsRef<Path>) -> Result<TrainOutput> {
    let state = TrainState::new(config, dataset.sample_shape())?;
    train_from(state, dataset, out_dir)
}

/// Continues `state` up to `state.config.train.steps`.
///
/// Rows of an existing metrics log beyond the state's step are discarded, so
/// a resumed run leaves the same log as an uninterrupted one.
pub fn train_from(mut state: TrainState, dataset: &PairedDataset, out_dir: impl AsRef<Path>) -> Result<TrainOutput> {
    let out_dir = out_dir.as_ref();
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if dataset.sample_shape() != state.sample_shape.as_slice() {
        return Err(Error::Shape {
            expected: state.sample_shape.clone(),
            got: dataset.sample_shape().to_vec(),
        });
    }
    state.config.validate()?;
    let table = state.table()?;
    write_file(&out_dir.join(RESOLVED_CONFIG), state.config.to_text().as_bytes())?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut history = if state.step > 0 && metrics_path.exists() {
        let mut rows = read_metrics(&metrics_path)?;
        rows.retain(|r| r.step <= state.step);
        rows
    } else {
        Vec::new()
    };
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in &history {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(&metrics_path, text.as_bytes())?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let cfg = state.config.train.clone();
    while state.step < cfg.steps {
        let (x0, y) = draw_batch(dataset, cfg.batch_size, cfg.seed, state.step);
        let stats = train_step(&mut state, &x0, &y, &table)?;
        writeln!(log, "{}", stats.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        history.push(stats);
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            state.save(out_dir.join(checkpoint_name(state.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(TrainOutput {
        final_checkpoint,
        metrics: metrics_path,
        history,
    })
}
