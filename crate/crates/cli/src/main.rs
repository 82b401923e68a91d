use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dimsum::ingest::{
    gen_mcar, gen_mnar, gen_synthetic, load_series, write_series_csv, IngestSpec, InputFormat,
    MissingKind, MissingSpec, MnarRule, SyntheticSpec,
};
use dimsum::pipeline::{artifacts, recorded_config, Pipeline, Report, RunConfig};
use dimsum::{Error, MaskVector, RawSeries, Result, RunSeed, SeriesWindow, MISSING};

#[derive(Parser)]
#[command(
    name = "dimsum",
    version,
    about = "Pattern-aware training data preparation for time-series imputation"
)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "DIMSUM_THREADS")]
    threads: Option<usize>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as CSV readings.
    Synth(SynthArgs),
    /// Inject MCAR or MNAR gaps into existing readings.
    Mask(MaskArgs),
    /// Load readings, window and normalize them.
    Preprocess(RunArgs),
    /// Cluster complete windows and pick K.
    Cluster(RunArgs),
    /// Assign incomplete windows to clusters.
    Assign(RunArgs),
    /// Test pattern structure, search the minimum mask and train per cluster.
    Train(RunArgs),
    /// Check the PAC bound for every trained cluster.
    Validate(RunArgs),
    /// Summarize all stages as JSON and CSV.
    Report(RunArgs),
    /// Run every stage from preprocess to report.
    Run(RunArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration. Without it, the config recorded in the output
    /// directory is reused, falling back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window length.
    #[arg(long)]
    w: Option<usize>,
    /// Input files or directories.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    format: Option<InputFormat>,
    /// Grid spacing in seconds.
    #[arg(long)]
    interval: Option<u64>,
    #[arg(long, requires = "clamp_max")]
    clamp_min: Option<f64>,
    #[arg(long, requires = "clamp_min")]
    clamp_max: Option<f64>,
    /// Skip malformed rows instead of aborting.
    #[arg(long)]
    skip_bad_rows: bool,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Imputer spec: mean, linear, knn[:k], ridge[:p[,lambda]] or bridge:<command>.
    #[arg(long)]
    imputer: Option<String>,
    /// Windows per request to a bridged imputer.
    #[arg(long)]
    bridge_batch: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMissing {
    None,
    Mcar,
    Blocky,
}

#[derive(Args)]
struct SynthArgs {
    /// Output CSV file.
    #[arg(long)]
    output: PathBuf,
    /// Full synthetic spec as TOML; overrides the shape flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    n_series: usize,
    #[arg(long, default_value_t = 1)]
    windows_per_series: usize,
    #[arg(long, default_value_t = 96)]
    w: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SynthMissing::Blocky)]
    missing: SynthMissing,
    /// MCAR rate.
    #[arg(long, default_value_t = 0.1)]
    rate: f64,
    /// Fraction of windows that get gaps.
    #[arg(long, default_value_t = 0.5)]
    affected: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskKind {
    Mcar,
    MnarTop,
    MnarBurst,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    kind: MaskKind,
    #[arg(long)]
    rate: f64,
    /// Mean run length for burst MNAR.
    #[arg(long, default_value_t = 8.0)]
    mean_run: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "csv")]
    format: InputFormat,
    #[arg(long, default_value_t = 900)]
    interval: u64,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e
            .span()
            .map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })
}

fn resolve_config(args: &RunArgs, threads: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_toml::<RunConfig>(path)?,
        None => {
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| RunConfig::default().out_dir);
            recorded_config(&dir)?.unwrap_or_default()
        }
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    } else if cfg.out_dir.as_os_str().is_empty() {
        cfg.out_dir = RunConfig::default().out_dir;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.w {
        cfg.w = w;
    }
    if !args.input.is_empty() || args.format.is_some() || args.interval.is_some() {
        let mut spec = cfg
            .input
            .take()
            .unwrap_or_else(|| IngestSpec::new(Vec::new(), InputFormat::Csv, 900));
        if !args.input.is_empty() {
            spec.inputs = args.input.clone();
        }
        if let Some(f) = args.format {
            spec.format = f;
        }
        if let Some(i) = args.interval {
            spec.interval = i;
        }
        cfg.input = Some(spec);
        cfg.synthetic = None;
    }
    if let Some(spec) = cfg.input.as_mut() {
        if let (Some(lo), Some(hi)) = (args.clamp_min, args.clamp_max) {
            spec.clamp = Some((lo, hi));
        }
        if args.skip_bad_rows {
            spec.fail_fast = false;
        }
    }
    if let Some(k) = args.k_min {
        cfg.k_min = k;
    }
    if let Some(k) = args.k_max {
        cfg.k_max = k;
    }
    if let Some(i) = &args.imputer {
        cfg.imputer = i.clone();
    }
    if let Some(b) = args.bridge_batch {
        cfg.bridge_batch = b;
    }
    cfg.threads = threads.or(cfg.threads);
    Ok(cfg)
}

fn print_report(report: &Report, dir: &Path) {
    println!(
        "k = {}  windows = {}  training windows = {}  reduction = {}",
        report.k,
        report.total_windows,
        report.training_windows,
        report
            .reduction_factor
            .map_or("n/a".into(), |r| format!("{r:.2}x")),
    );
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
    println!(
        "mse: per-cluster {}  pooled baseline {}",
        fmt(report.dimsum_mse),
        fmt(report.baseline_mse)
    );
    println!(
        "{:>7} {:>9} {:>8} {:>8} {:>8} {:>10} {:>10} {:>18}",
        "cluster", "status", "assigned", "train", "m*", "mse", "baseline", "verdict"
    );
    for r in &report.clusters {
        println!(
            "{:>7} {:>9} {:>8} {:>8} {:>8} {:>10} {:>10} {:>18}",
            r.cluster,
            format!("{:?}", r.status).to_lowercase(),
            r.n_assigned,
            r.n_train,
            r.m_star.map_or("-".into(), |m| format!("{m:.3}")),
            fmt(r.val_mse),
            fmt(r.baseline_mse),
            r.verdict.map_or("-".into(), |v| serde_json::to_value(v)
                .unwrap()
                .as_str()
                .unwrap_or("")
                .to_string()),
        );
    }
    let timings = artifacts::read_timings(dir);
    if !timings.is_empty() {
        let parts: Vec<String> = timings
            .iter()
            .map(|(k, v)| format!("{k} {v:.2}s"))
            .collect();
        println!("runtimes: {}", parts.join(", "));
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => read_toml::<SyntheticSpec>(path)?,
        None => {
            let mut spec = SyntheticSpec::three_patterns(args.n_series, args.w);
            spec.windows_per_series = args.windows_per_series;
            spec.missing = match args.missing {
                SynthMissing::None => MissingSpec::none(),
                SynthMissing::Mcar => MissingSpec {
                    affected: args.affected,
                    kind: MissingKind::Mcar { rate: args.rate },
                },
                SynthMissing::Blocky => MissingSpec {
                    affected: args.affected,
                    kind: MissingKind::Blocky {
                        blocks: 1,
                        run_p: 0.08,
                        anchor_jitter: Some(4),
                    },
                },
            };
            spec
        }
    };
    let corpus = gen_synthetic(&spec, RunSeed(args.seed))?;
    write_series_csv(&args.output, &corpus.series)?;
    info!(
        "wrote {} series to {}",
        corpus.series.len(),
        args.output.display()
    );
    Ok(())
}

fn mask(args: &MaskArgs) -> Result<()> {
    let series = load_series(&IngestSpec::new(
        vec![args.input.clone()],
        args.format,
        args.interval,
    ))?;
    // Each series is masked as one long window.
    let windows: Vec<SeriesWindow> = series
        .iter()
        .map(|s| {
            let mask = MaskVector::new(s.values.iter().map(Option::is_some).collect());
            let values = s.values.iter().map(|v| v.unwrap_or(MISSING)).collect();
            SeriesWindow::new(s.series_id.clone(), 0, values, mask)
        })
        .collect::<Result<_>>()?;
    let seed = RunSeed(args.seed);
    let masked = match args.kind {
        MaskKind::Mcar => gen_mcar(&windows, args.rate, seed)?,
        MaskKind::MnarTop => gen_mnar(&windows, args.rate, MnarRule::TopValue, seed)?,
        MaskKind::MnarBurst => gen_mnar(
            &windows,
            args.rate,
            MnarRule::Burst {
                mean_run: args.mean_run,
            },
            seed,
        )?,
    };
    let out: Vec<RawSeries> = series
        .iter()
        .zip(&masked)
        .map(|(s, w)| RawSeries {
            values: w
                .values
                .iter()
                .zip(w.mask.bits())
                .map(|(v, m)| m.then_some(*v))
                .collect(),
            ..s.clone()
        })
        .collect();
    write_series_csv(&args.output, &out)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let stage = match &cli.command {
        Command::Synth(a) => return synth(a),
        Command::Mask(a) => return mask(a),
        Command::Preprocess(a)
        | Command::Cluster(a)
        | Command::Assign(a)
        | Command::Train(a)
        | Command::Validate(a)
        | Command::Report(a)
        | Command::Run(a) => a,
    };
    let cfg = resolve_config(stage, cli.threads)?;
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Preprocess(_) => {
            let s = p.preprocess()?;
            println!(
                "{} series, {} windows ({} complete, {} incomplete), missing rate {:.4}",
                s.n_series, s.total, s.complete, s.incomplete, s.missing_rate
            );
        }
        Command::Cluster(_) => {
            let c = p.cluster()?;
            println!(
                "k = {} (DB {}), sizes {:?}",
                c.k,
                c.db.map_or("n/a".into(), |d| format!("{d:.4}")),
                c.sizes
            );
        }
        Command::Assign(_) => {
            let a = p.assign()?;
            let sizes: Vec<usize> = a.clusters.iter().map(|c| c.members.len()).collect();
            println!(
                "assigned {} incomplete windows (N_req = {}, early exit: {}), per cluster {:?}",
                a.assigned(),
                a.n_req,
                a.early_exit,
                sizes
            );
        }
        Command::Train(_) => {
            let t = p.train()?;
            let trained = t.clusters.iter().filter(|c| c.m_star.is_some()).count();
            println!(
                "trained {trained}/{} clusters on {} windows",
                t.clusters.len(),
                t.training_windows
            );
        }
        Command::Validate(_) => {
            let v = p.validate()?;
            for e in &v.clusters {
                println!(
                    "cluster {}: {:?} (pass rate {:.3})",
                    e.cluster, e.report.verdict, e.report.pass_rate
                );
            }
        }
        Command::Report(_) => print_report(&p.report()?, p.out_dir()),
        Command::Run(_) => print_report(&p.run_all()?, p.out_dir()),
        Command::Synth(_) | Command::Mask(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
