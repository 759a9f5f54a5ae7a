//! Command-line driver: `train`, `sample`, `bench`, `trace` and `gradcheck`.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use elastic_dit::checkpoint;
use elastic_dit::flow::euler_sample;
use elastic_dit::infer::{denoise_full, oracle_schedule, write_trace_csv, ActionKind, InferenceConfig};
use elastic_dit::metrics::{trace_summary, write_probability_grid_csv, write_summary_csv};
use elastic_dit::model::dense_velocity;
use elastic_dit::tape::ReverseFault;
use elastic_dit::train::{evaluate, full_model_grad_check, train, write_snapshot, EvalConfig};
use elastic_dit::{ElasticDit, Error as CoreError, SyntheticData, Tensor};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            CoreError::Io(_) | CoreError::Checkpoint(_) | CoreError::Json(_) => CliError::Io(e.to_string()),
            CoreError::Domain { what, value } => CliError::Config {
                key: what.to_string(),
                message: format!("out of domain: {value}"),
            },
            CoreError::Shape { .. } | CoreError::Contract(_) => CliError::Config {
                key: "config".into(),
                message: e.to_string(),
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "elastic-dit", version, about = "Train and sample elastic diffusion transformers")]
pub struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dense,
    Elastic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ckpt, snapshots.ndjson and config.json.
    Train,
    /// Sample trajectories; writes samples.csv (and trace.csv when elastic).
    Sample {
        /// Defaults to OUT/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples; defaults to the `samples` config key.
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Elastic)]
        mode: Mode,
    },
    /// Component and cache-setting sweeps; writes bench.csv and
    /// bench_stubbed.csv.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Router probability grids and per-block statistics.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Finite-difference check of the full-model gradient.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_reverse: bool,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("{}: {e}", cli.out.display())))?;
    let ckpt = |p: &Option<PathBuf>| p.clone().unwrap_or_else(|| cli.out.join("model.ckpt"));
    match &cli.command {
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Sample { checkpoint, n, mode } => cmd_sample(&cfg, &cli.out, &ckpt(checkpoint), *n, *mode),
        Command::Bench { checkpoint } => cmd_bench(&cfg, &cli.out, &ckpt(checkpoint)),
        Command::Trace { checkpoint, n } => cmd_trace(&cfg, &cli.out, &ckpt(checkpoint), *n),
        Command::Gradcheck { corrupt_reverse } => cmd_gradcheck(&cfg, *corrupt_reverse),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<ElasticDit, CliError> {
    let model = checkpoint::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if model.cfg != cfg.model() {
        return Err(CliError::Config {
            key: "config".into(),
            message: format!("checkpoint {} was trained with a different model shape", path.display()),
        });
    }
    Ok(model)
}

fn sample_count(n: Option<usize>, cfg: &RunConfig) -> Result<usize, CliError> {
    match n.unwrap_or(cfg.samples) {
        0 => Err(CliError::Config {
            key: "n".into(),
            message: "must be at least 1".into(),
        }),
        n => Ok(n),
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::write(out.join("config.json"), cfg.to_json())?;
    let mut log = create(&out.join("snapshots.ndjson"))?;
    let mut tc = cfg.train();
    tc.checkpoint = Some(out.join("model.ckpt"));
    let outcome = train(&tc, |s| {
        write_snapshot(&mut log, s)?;
        Ok(())
    })?;
    log.flush()?;
    if let Some(last) = outcome.snapshots.last() {
        println!(
            "step {} perf {:.5} gating {:.5} width {:.5} p_bar {:.4} r_bar {} flop_ratio {:.3}",
            last.step,
            last.perf,
            last.gating,
            last.width,
            last.p_bar,
            last.r_bar.map_or("-".into(), |r| format!("{r:.4}")),
            last.flop_ratio
        );
    }
    if let Some(r) = &outcome.spot_check {
        println!("spot check: max rel error {:.3e} over {} coordinates", r.max_rel_error, r.checked);
    }
    Ok(())
}

fn write_samples(path: &Path, samples: &[Tensor]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    for s in samples {
        w.serialize(s.as_slice()).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, out: &Path, ckpt: &Path, n: Option<usize>, mode: Mode) -> Result<(), CliError> {
    let n = sample_count(n, cfg)?;
    let model = load_model(ckpt, cfg)?;
    let inf = cfg.inference();
    let mut samples = Vec::with_capacity(n);
    let mut trace = Vec::new();
    for i in 0..n as u64 {
        let seed = cfg.seed.wrapping_add(i);
        match mode {
            Mode::Dense => samples.push(euler_sample(
                |x, t| dense_velocity(&model, x, t),
                &model.sample_shape(),
                inf.steps,
                seed,
            )?),
            Mode::Elastic => {
                let d = denoise_full(&model, &inf, seed)?;
                samples.push(d.sample);
                trace.extend(d.trace);
            }
        }
    }
    write_samples(&out.join("samples.csv"), &samples)?;
    if mode == Mode::Elastic {
        write_trace_csv(create(&out.join("trace.csv"))?, &trace)?;
    }
    Ok(())
}

/// Stubbed probability grid shared by every cache-setting row.
fn stub_grid(steps: usize, blocks: usize, tau: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| (0..blocks).map(|_| rng.random_range(tau * 0.5..(1.0 + tau) / 2.0)).collect())
        .collect()
}

fn cmd_bench(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<(), CliError> {
    let model = load_model(ckpt, cfg)?;
    let data = SyntheticData::new(cfg.data())?;
    let base = cfg.inference();
    let eval = |name: String, inference: InferenceConfig, full_width: bool| -> Result<(String, f64, f64), CliError> {
        let e = evaluate(
            &model,
            &data,
            &EvalConfig {
                inference,
                trajectories: cfg.samples,
                seed: cfg.seed,
                full_width,
            },
        )?;
        Ok((name, e.flop_reduction, e.energy_distance))
    };
    let no_cache = InferenceConfig {
        delta_margin: 0.0,
        max_reuse: 0,
        dense_override: false,
        ..base.clone()
    };
    let mut rows = vec![
        eval("dense".into(), InferenceConfig { dense_override: true, ..base.clone() }, false)?,
        eval("skip".into(), no_cache.clone(), true)?,
        eval("skip+width".into(), no_cache, false)?,
        eval(
            "skip+width+cache".into(),
            InferenceConfig { dense_override: false, ..base.clone() },
            false,
        )?,
    ];
    for &d in &cfg.bench_delta_margins {
        let inf = InferenceConfig { delta_margin: d, dense_override: false, ..base.clone() };
        rows.push(eval(format!("delta_margin={d} max_reuse={}", base.max_reuse), inf, false)?);
    }
    for &k in &cfg.bench_max_reuse {
        let inf = InferenceConfig { max_reuse: k, dense_override: false, ..base.clone() };
        rows.push(eval(format!("delta_margin={} max_reuse={k}", base.delta_margin), inf, false)?);
    }
    let mut w = csv::Writer::from_writer(create(&out.join("bench.csv"))?);
    w.write_record(["config", "flop_ratio", "energy_distance"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for (name, fr, ed) in &rows {
        w.serialize((name, fr, ed)).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;

    let grid = stub_grid(base.steps, cfg.n_blocks, cfg.tau, cfg.seed);
    let mut w = csv::Writer::from_writer(create(&out.join("bench_stubbed.csv"))?);
    w.write_record(["delta_margin", "max_reuse", "reuse_rate"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for &d in &cfg.bench_delta_margins {
        for &k in &cfg.bench_max_reuse {
            let actions = oracle_schedule(&grid, cfg.tau, d, k);
            let total = actions.iter().map(|r| r.len()).sum::<usize>() as f64;
            let reuse = actions.iter().flatten().filter(|&&a| a == ActionKind::Reuse).count() as f64;
            w.serialize((d, k, reuse / total)).map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    for (name, fr, ed) in rows {
        println!("{name}: flop_ratio {fr:.3} energy_distance {ed:.4}");
    }
    Ok(())
}

fn cmd_trace(cfg: &RunConfig, out: &Path, ckpt: &Path, n: Option<usize>) -> Result<(), CliError> {
    let n = sample_count(n, cfg)?;
    let model = load_model(ckpt, cfg)?;
    let inf = cfg.inference();
    let mut all = Vec::new();
    for i in 0..n {
        let d = denoise_full(&model, &inf, cfg.seed.wrapping_add(i as u64))?;
        write_probability_grid_csv(create(&out.join(format!("grid_{i:03}.csv")))?, &d.trace)?;
        all.extend(d.trace);
    }
    let summary = trace_summary(&all)?;
    write_summary_csv(create(&out.join("summary.csv"))?, &summary)?;
    for b in &summary.blocks {
        println!(
            "block {}: mean_p {:.3} skip {:.3} reuse {:.3} width {}",
            b.block,
            b.mean_p,
            b.skip_rate,
            b.reuse_rate,
            b.mean_width.map_or("-".into(), |w| format!("{w:.3}"))
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<(), CliError> {
    let fault = corrupt.then_some(ReverseFault::GeluSlope(1.5));
    let report = full_model_grad_check(&cfg.model(), &cfg.data(), &cfg.elastic(), &cfg.gradcheck(), fault)?;
    println!(
        "checked {} coordinates, excluded {} (routing decision flips)",
        report.checked, report.excluded
    );
    if let Some(w) = &report.worst {
        println!(
            "worst coordinate {}: analytic {:.9e} numeric {:.9e} rel error {:.3e}",
            w.coord, w.analytic, w.numeric, w.rel_error
        );
    }
    if report.checked > 0 && report.max_rel_error < 1e-4 {
        println!("pass");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error
        )))
    }
}
