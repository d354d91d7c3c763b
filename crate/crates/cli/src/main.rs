use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bridgekit::config::ExperimentConfig;
use bridgekit::data::{make_synthetic_pairs, PairedDataset, Task};
use bridgekit::io::{load_tensor, save_tensor};
use bridgekit::metrics::{evaluate_batch, wilcoxon_signed_rank, MetricReport};
use bridgekit::sampler::{reverse_chain, Generator};
use bridgekit::schedule::{build_schedule, ScheduleConfig, Variant};
use bridgekit::training::{train, train_from, TrainState};
use bridgekit::verify::{self, Suite, VerifyOptions};
use bridgekit::Error;

const THREADS_ENV: &str = "BRIDGEKIT_THREADS";

#[derive(Parser)]
#[command(name = "bridgekit", version, about = "Soft-prior diffusion bridge toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic paired datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Noise schedule tables.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    /// Train a generator/discriminator pair.
    #[command(after_help = key_help())]
    Train(TrainArgs),
    /// Translate a batch of source samples with a trained generator.
    Sample(SampleArgs),
    /// PSNR/SSIM of a predicted batch against its reference.
    Eval(EvalArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Draw pairs and write train/val/test tensors.
    Make {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Write `t,g,s2,mu_x0,mu_y,sigma2` as CSV.
    Export {
        #[arg(long = "T", default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        #[arg(long, default_value = "selfrdb")]
        variant: Variant,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; `steps` may be raised with `--set`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tensor file holding the source batch.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Number of reverse steps; defaults to the checkpoint's.
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write every intermediate state to `<output>.traj/`.
    #[arg(long)]
    emit_trajectory: bool,
    /// Replace every noise draw by zero.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Competing predictions (tensor) or report (CSV) for a paired
    /// Wilcoxon test on per-sample PSNR.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Restrict to one suite; the posterior suite then reports every step.
    suite: Option<Suite>,
    /// Comma-separated step counts.
    #[arg(long = "T", value_delimiter = ',', default_values_t = verify::DEFAULT_STEPS)]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    /// Random scalar inputs per step in the posterior suite.
    #[arg(long, default_value_t = 100)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn key_help() -> String {
    format!("Config keys:\n{}", ExperimentConfig::key_docs())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<PairedDataset> {
    Ok(match &cfg.data_dir {
        Some(dir) => PairedDataset::load_dir(dir)?,
        None => make_synthetic_pairs(cfg.task, cfg.n, cfg.data_seed)?,
    })
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match (&args.resume, &args.config) {
        (Some(ckpt), _) => TrainState::load(ckpt)?.config,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let (Some(_), Some(path)) = (&args.resume, &args.config) {
        cfg.apply_text(&std::fs::read_to_string(path).with_context(|| path.display().to_string())?)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let out = match &args.resume {
        Some(ckpt) => {
            let mut state = TrainState::load(ckpt)?;
            if state.config.effective_schedule() != cfg.effective_schedule() || state.config.net != cfg.net {
                return Err(Error::Config("resume cannot change the schedule or network".into()).into());
            }
            state.config = cfg;
            train_from(state, &data, &args.out)?
        }
        None => train(&cfg, &data, &args.out)?,
    };
    let last = out.history.last();
    println!(
        "trained {} steps; final l1 {:.4}; checkpoint {}",
        last.map_or(0, |s| s.step),
        last.map_or(f64::NAN, |s| s.l1),
        out.final_checkpoint.display()
    );
    Ok(())
}

fn run_sample(args: SampleArgs) -> anyhow::Result<()> {
    let state = TrainState::load(&args.checkpoint)?;
    let mut sched = state.config.effective_schedule();
    if let Some(t) = args.steps {
        sched.steps = t;
    }
    let table = build_schedule(&sched)?;
    let mut opts = state.config.effective_sampler();
    if let Some(v) = args.rel_tol {
        opts.rel_tol = v;
    }
    if let Some(v) = args.r_max {
        opts.r_max = v;
    }
    if let Some(v) = args.seed {
        opts.seed = v;
    }
    opts.emit_trajectory = args.emit_trajectory;
    opts.zero_noise = args.zero_noise;

    let y = load_tensor(&args.input)?;
    if y.sample_shape() != state.sample_shape.as_slice() {
        return Err(Error::Shape {
            expected: state.sample_shape.clone(),
            got: y.sample_shape().to_vec(),
        }
        .into());
    }
    let gen = state.sampler_generator();
    let out = reverse_chain(&gen as &dyn Generator, &y, &table, &opts)?;
    save_tensor(&args.output, &out.x0)?;
    if args.emit_trajectory {
        let dir = trajectory_dir(&args.output);
        let steps = table.steps();
        for (k, x) in out.trajectory.iter().enumerate() {
            save_tensor(dir.join(format!("x_{:05}.brt", steps - k)), x)?;
        }
    }
    println!(
        "sampled {} items over {} steps; mean recursions {:.3}",
        y.batch(),
        table.steps(),
        out.mean_recursions()
    );
    Ok(())
}

fn trajectory_dir(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".traj");
    output.with_file_name(name)
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let reference = load_tensor(&args.reference)?;
    let test = load_tensor(&args.test)?;
    let mut report = evaluate_batch(&reference, &test)?;
    if let Some(base) = &args.baseline {
        let other = if base.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(base).with_context(|| base.display().to_string())?;
            MetricReport::read_psnr_column(&text)?
        } else {
            evaluate_batch(&reference, &load_tensor(base)?)?.psnr
        };
        if other.len() != report.psnr.len() {
            bail!(Error::Shape {
                expected: vec![report.psnr.len()],
                got: vec![other.len()],
            });
        }
        report.p_value = Some(wilcoxon_signed_rank(&report.psnr, &other)?);
    }
    report.save(&args.report)?;
    let (m, s) = report.psnr_mean_std();
    print!("psnr {m:.3} +- {s:.3} dB");
    if let Some((m, s)) = report.ssim_mean_std() {
        print!("; ssim {m:.4} +- {s:.4}");
    }
    if let Some(p) = report.p_value {
        print!("; wilcoxon p {p:.4e}");
    }
    println!();
    Ok(())
}

fn run_verify(args: VerifyArgs) -> anyhow::Result<bool> {
    let opts = VerifyOptions {
        steps: args.steps,
        suites: args.suite.map_or_else(|| Suite::ALL.to_vec(), |s| vec![s]),
        gamma: args.gamma,
        posterior_inputs: args.inputs,
        per_step: args.suite == Some(Suite::Posterior),
        seed: args.seed,
    };
    let rows = verify::run(&opts)?;
    for r in &rows {
        println!("{r}");
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", rows.len(), failed);
    Ok(failed == 0)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Data(DataCommand::Make { task, n, seed, out }) => {
            let data = make_synthetic_pairs(task, n, seed)?;
            data.save_dir(&out)?;
            println!(
                "wrote {} train / {} val / {} test pairs to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Schedule(ScheduleCommand::Export {
            steps,
            gamma,
            variant,
            out,
        }) => {
            let table = build_schedule(&ScheduleConfig::new(steps, gamma, variant))?;
            let csv = table.to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
        }
        Command::Train(a) => run_train(a)?,
        Command::Sample(a) => run_sample(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Verify(a) => return run_verify(a),
    }
    Ok(true)
}

fn category(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("internal", Error::category)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[verify]: one or more checks failed");
            ExitCode::from(1)
        }
        Err(err) => {
            let cat = category(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{cat}]: {msg}");
            if cat == "config" {
                eprintln!("{}", key_help());
            }
            ExitCode::from(1)
        }
    }
}
