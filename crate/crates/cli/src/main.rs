//! Command-line front end: mock scene generation, sweep collection, model
//! fitting, allocation, the full two-pass run, quality metrics, and curve
//! comparison. Exit codes: 0 success, 2 invalid input, 3 I/O or parse,
//! 4 backend, 5 fitting, 6 solver.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lfalloc::allocator::{assemble_problem, profile_defaults, EncoderProfile, ProfileKind};
use lfalloc::backend::{
    generate_mock_scene, Coupling, EncoderBackend, ExternalBackend, ExternalBackendConfig,
    MockBackend, MockScene, MockSceneSpec,
};
use lfalloc::grid::{ConfidenceGrid, ScanKind, ScanOrder};
use lfalloc::metrics::{quality_report, MseGrid, RdCurvePoint};
use lfalloc::pipeline::{
    first_pass_cached, fit_models, plan_schedule, run_two_pass, run_uniform_baseline,
    solve_allocation, TwoPassInputs, TwoPassReport,
};
use lfalloc::rdmodel::{select_fit_window, FitWindow, HyperbolicModel, RdSampleSet};
use lfalloc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lfalloc",
    version,
    about = "Two-pass frame-level bit allocation for light-field pseudo-sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene description for the mock backend.
    Mockgen(MockgenArgs),
    /// Run the sweep pass and write per-frame statistics as CSV.
    Firstpass(FirstpassArgs),
    /// Select the fit window and fit per-frame rate-distortion models.
    Fit(FitArgs),
    /// Solve the bit allocation for fitted models and plan a QP schedule.
    Allocate(AllocateArgs),
    /// Full two-pass run: sweep, fit, allocate, plan, encode, evaluate.
    Twopass(TwopassArgs),
    /// Quality report (wMSE, SP, T, T') from a per-SAI MSE grid.
    Metrics(MetricsArgs),
    /// BD-rate between two rate-quality curves given as CSV.
    Bdrate(BdrateArgs),
    /// BD-rate between two sets of two-pass run reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct MockgenArgs {
    #[arg(long, default_value_t = 192)]
    frames: usize,
    /// Profile deciding the distortion coupling (ai/ra/ld).
    #[arg(long, default_value = "ai")]
    profile: ProfileKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Log-normal noise level on frame MSE.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 2e7)]
    alpha_lo: f64,
    #[arg(long, default_value_t = 5e7)]
    alpha_hi: f64,
    #[arg(long, default_value_t = -1.05)]
    beta_lo: f64,
    #[arg(long, default_value_t = -0.95)]
    beta_hi: f64,
    #[arg(long, default_value_t = 5e4)]
    rate_lo: f64,
    #[arg(long, default_value_t = 8.5e4)]
    rate_hi: f64,
    /// Output path for the scene JSON (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BackendArgs {
    /// Backend kind: mock or external.
    #[arg(long, default_value = "mock")]
    backend: String,
    /// Scene JSON for the mock backend.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Command template for the external backend; placeholders {input},
    /// {qpfile}, {output}, {statsfile} are substituted per run.
    #[arg(long)]
    exec: Option<String>,
    /// Input sequence path for the external backend.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Scratch directory for the external backend.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Frame count for the external backend.
    #[arg(long)]
    frames: Option<usize>,
    /// External encode timeout in seconds.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

impl BackendArgs {
    fn build(&self) -> Result<Box<dyn EncoderBackend>> {
        match self.backend.as_str() {
            "mock" => {
                let path = self.scene.as_ref().ok_or_else(|| {
                    Error::InvalidInput("mock backend requires --scene".into())
                })?;
                let scene: MockScene = serde_json::from_str(&fs::read_to_string(path)?)?;
                Ok(Box::new(MockBackend::new(scene)))
            }
            "external" => {
                let exec = self.exec.as_ref().ok_or_else(|| {
                    Error::InvalidInput("external backend requires --exec".into())
                })?;
                let config = ExternalBackendConfig {
                    command: exec.split_whitespace().map(str::to_string).collect(),
                    input: self
                        .input
                        .clone()
                        .ok_or_else(|| Error::InvalidInput("external backend requires --input".into()))?,
                    work_dir: self
                        .work_dir
                        .clone()
                        .unwrap_or_else(std::env::temp_dir),
                    frame_count: self.frames.ok_or_else(|| {
                        Error::InvalidInput("external backend requires --frames".into())
                    })?,
                    timeout_secs: self.timeout,
                };
                Ok(Box::new(ExternalBackend::new(config)?))
            }
            other => Err(Error::InvalidInput(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Args)]
struct FirstpassArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value = "ai")]
    profile: ProfileKind,
    /// Worker count for the sweep (0 = all cores, 1 = serial).
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    /// Directory for the sweep cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output stats CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Sweep stats CSV produced by `firstpass`.
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value = "ai")]
    profile: ProfileKind,
    /// Target budget used to center the fit window.
    #[arg(long)]
    budget: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Output of `fit`, consumed by `allocate`.
#[derive(Serialize, Deserialize)]
struct FitOutput {
    window: FitWindow,
    models: Vec<HyperbolicModel>,
}

#[derive(Args)]
struct GridArgs {
    /// Grid rows (K) on the uv plane.
    #[arg(long)]
    rows: usize,
    /// Grid columns (L) on the uv plane.
    #[arg(long)]
    cols: usize,
    /// Scan order: raster, snake, spiral, or a CSV path.
    #[arg(long, default_value = "snake")]
    scan_order: String,
    /// Confidence grid CSV (uniform if omitted).
    #[arg(long)]
    confidence: Option<PathBuf>,
}

impl GridArgs {
    fn scan(&self, frames: usize) -> Result<ScanOrder> {
        match self.scan_order.parse::<ScanKind>() {
            Ok(kind) => ScanOrder::build(kind, self.rows, self.cols, frames),
            Err(_) => {
                let file = fs::File::open(&self.scan_order)?;
                ScanOrder::from_csv(BufReader::new(file), self.rows, self.cols)
            }
        }
    }

    fn confidence(&self) -> Result<ConfidenceGrid> {
        match &self.confidence {
            Some(path) => {
                let file = fs::File::open(path)?;
                ConfidenceGrid::from_csv(BufReader::new(file))
            }
            None => Ok(ConfidenceGrid::uniform(self.rows, self.cols)),
        }
    }
}

#[derive(Args)]
struct AllocateArgs {
    /// Fit JSON produced by `fit`.
    #[arg(long)]
    models: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "ai")]
    profile: ProfileKind,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    budget: f64,
    /// Sweep stats CSV; when given, a QP schedule is planned and written
    /// next to the allocation.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output path for the planned QP schedule CSV.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
}

#[derive(Args)]
struct TwopassArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "ai")]
    profile: ProfileKind,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    budget: f64,
    #[arg(long, default_value_t = 0)]
    parallel: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Split the budget uniformly instead of optimizing (baseline mode).
    #[arg(long)]
    uniform: bool,
    /// Output report JSON (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output path for the final QP schedule CSV.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Per-SAI MSE grid CSV (K rows x L columns).
    #[arg(long)]
    mse: PathBuf,
    #[arg(long)]
    confidence: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BdrateArgs {
    /// Anchor curve CSV with `bits,quality` lines.
    #[arg(long)]
    anchor: PathBuf,
    /// Test curve CSV with `bits,quality` lines.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON array of two-pass reports forming the anchor curve.
    #[arg(long)]
    anchor: PathBuf,
    /// JSON array of two-pass reports forming the test curve.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => println!("{content}"),
    }
    Ok(())
}

fn profile_for(kind: ProfileKind) -> EncoderProfile {
    profile_defaults(kind)
}

fn cmd_mockgen(args: &MockgenArgs) -> Result<()> {
    let coupling = match args.profile {
        ProfileKind::AllIntra => Coupling::FrameLevel,
        ProfileKind::RandomAccess => Coupling::GopLevel { gop_size: 8 },
        ProfileKind::LowDelay => Coupling::GopLevel { gop_size: 12 },
    };
    let scene = generate_mock_scene(&MockSceneSpec {
        frame_count: args.frames,
        alpha_range: (args.alpha_lo, args.alpha_hi),
        beta_range: (args.beta_lo, args.beta_hi),
        r_ref_range: (args.rate_lo, args.rate_hi),
        q_ref: 31,
        sigma: args.sigma,
        coupling,
        seed: args.seed,
    })?;
    write_output(&args.out, &serde_json::to_string_pretty(&scene)?)
}

fn cmd_firstpass(args: &FirstpassArgs) -> Result<()> {
    let backend = args.backend.build()?;
    let profile = profile_for(args.profile);
    let stats = first_pass_cached(
        backend.as_ref(),
        &profile,
        args.parallel,
        args.cache_dir.as_deref(),
    )?;
    write_output(&args.out, &stats.samples.to_stats_csv())?;
    eprintln!(
        "sweep {}..{} collected for {} frames{}",
        profile.sweep_qps.0,
        profile.sweep_qps.1,
        stats.samples.frame_count(),
        if stats.from_cache { " (cached)" } else { "" }
    );
    Ok(())
}

fn load_stats(path: &Path, frames: usize) -> Result<RdSampleSet> {
    let file = fs::File::open(path)?;
    RdSampleSet::from_stats_csv(BufReader::new(file), frames)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let stats = load_stats(&args.stats, args.frames)?;
    let profile = profile_for(args.profile);
    let window = select_fit_window(&stats, args.budget)?;
    let windowed = stats.restrict_qps(window.lo, window.hi);
    let models = fit_models(&windowed, &profile)?;
    let output = FitOutput { window, models };
    write_output(&args.out, &serde_json::to_string_pretty(&output)?)
}

fn cmd_allocate(args: &AllocateArgs) -> Result<()> {
    let fit: FitOutput = serde_json::from_str(&fs::read_to_string(&args.models)?)?;
    let frames = fit.models.len();
    let scan = args.grid.scan(frames)?;
    let confidence = args.grid.confidence()?;
    let profile = profile_for(args.profile);
    let problem = assemble_problem(
        &profile,
        fit.models,
        &confidence,
        &scan,
        args.lambda,
        args.budget,
    )?;
    let outcome = solve_allocation(&problem)?;
    if let Some(stats_path) = &args.stats {
        let stats = load_stats(stats_path, frames)?;
        let schedule = plan_schedule(&stats, &profile, &outcome.allocation)?;
        if let Some(path) = &args.schedule_out {
            fs::write(path, schedule.to_csv())?;
        }
    }
    write_output(&args.out, &serde_json::to_string_pretty(&outcome)?)
}

fn cmd_twopass(args: &TwopassArgs) -> Result<()> {
    let backend = args.backend.build()?;
    let scan = args.grid.scan(backend.frame_count())?;
    let confidence = args.grid.confidence()?;
    let profile = profile_for(args.profile);
    let inputs = TwoPassInputs {
        backend: backend.as_ref(),
        profile: &profile,
        confidence: &confidence,
        scan: &scan,
        lambda: args.lambda,
        budget: args.budget,
        parallelism: args.parallel,
        cache_dir: args.cache_dir.clone(),
    };
    let report = if args.uniform {
        run_uniform_baseline(&inputs)?
    } else {
        run_two_pass(&inputs)?
    };
    if let Some(path) = &args.schedule_out {
        fs::write(path, report.schedule.to_csv())?;
    }
    print_quality_summary(&report);
    write_output(&args.out, &serde_json::to_string_pretty(&report)?)
}

fn print_quality_summary(report: &TwoPassReport) {
    let db = report
        .quality
        .t_prime_db
        .map(|v| format!("{v:.2} dB"))
        .unwrap_or_else(|| "inf dB".to_string());
    eprintln!(
        "budget {:.0} -> achieved {:.0} bits (error {:+.2}%), T' = {db}",
        report.budget,
        report.achieved_bits,
        100.0 * report.bit_error
    );
}

fn parse_mse_grid(path: &Path) -> Result<MseGrid> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-numeric value '{}'", v.trim()),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty MSE grid".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("ragged MSE grid".into()));
    }
    MseGrid::new(rows.len(), cols, rows.into_iter().flatten().collect())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let mse = parse_mse_grid(&args.mse)?;
    let confidence = match &args.confidence {
        Some(path) => {
            let file = fs::File::open(path)?;
            ConfidenceGrid::from_csv(BufReader::new(file))?
        }
        None => ConfidenceGrid::uniform(mse.rows, mse.cols),
    };
    let report = quality_report(mse, &confidence, args.lambda)?;
    let db = report
        .t_prime_db
        .map(|v| format!("{v:.4} dB"))
        .unwrap_or_else(|| "inf dB".to_string());
    eprintln!("wMSE {:.4}, SP {:.4}, T {:.4}, T' = {db}", report.wmse, report.sp, report.t);
    write_output(&args.out, &serde_json::to_string_pretty(&report)?)
}

fn parse_curve(path: &Path) -> Result<Vec<RdCurvePoint>> {
    let text = fs::read_to_string(path)?;
    let mut curve = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 'bits,quality', got '{line}'"),
            });
        }
        let parse = |v: &str| {
            v.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("non-numeric value '{v}'"),
            })
        };
        curve.push(RdCurvePoint {
            bits: parse(parts[0])?,
            quality: parse(parts[1])?,
        });
    }
    Ok(curve)
}

fn cmd_bdrate(args: &BdrateArgs) -> Result<()> {
    let anchor = parse_curve(&args.anchor)?;
    let test = parse_curve(&args.test)?;
    let bd = lfalloc::metrics::bd_rate(&anchor, &test)?;
    println!("{bd:.4}");
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    bd_rate_percent: f64,
    anchor: Vec<RdCurvePoint>,
    test: Vec<RdCurvePoint>,
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let anchor: Vec<TwoPassReport> = serde_json::from_str(&fs::read_to_string(&args.anchor)?)?;
    let test: Vec<TwoPassReport> = serde_json::from_str(&fs::read_to_string(&args.test)?)?;
    let comparison = Comparison {
        bd_rate_percent: lfalloc::pipeline::compare_runs(&anchor, &test)?,
        anchor: lfalloc::pipeline::reports_to_curve(&anchor)?,
        test: lfalloc::pipeline::reports_to_curve(&test)?,
    };
    write_output(&args.out, &serde_json::to_string_pretty(&comparison)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mockgen(args) => cmd_mockgen(args),
        Command::Firstpass(args) => cmd_firstpass(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Allocate(args) => cmd_allocate(args),
        Command::Twopass(args) => cmd_twopass(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Bdrate(args) => cmd_bdrate(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(inner) = source {
            eprintln!("  caused by: {inner}");
            source = inner.source();
        }
        std::process::exit(e.exit_code());
    }
}
