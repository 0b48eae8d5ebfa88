//! `chameleon`: run, split across processes, analyze and verify the
//! two-station experiment.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Map, Value};

use chameleon_core::analysis::{
    analyze, emit_report, write_plot_file, write_report_file, Report, ReportFormat,
    DEFAULT_MIN_GROUP,
};
use chameleon_core::prng::parse_seed;
use chameleon_core::protocol::wire::TcpLink;
use chameleon_core::protocol::{
    coordinate_run, load_artifacts, station_session, RunArtifacts, RunConfig, RunError, Transport,
    DEFAULT_TIMEOUT_MS,
};
use chameleon_core::quadrature::{
    run_verification, VerifyOptions, VerifyRow, DEFAULT_CHANGE_OF_VARIABLES_TOL,
    DEFAULT_CORRELATION_TOL, DEFAULT_NORMALIZATION_TOL,
};
use chameleon_core::station::{run_station, write_records, write_records_file, AnglePolicy, RecordSet};
use chameleon_core::Role;

const REPORT_JSON: &str = "report.json";
const REPORT_CSV: &str = "report.csv";
const PLOT_CSV: &str = "plot.csv";

#[derive(Parser)]
#[command(name = "chameleon", version, about = "Two-station local model of the singlet correlations")]
#[command(after_help = "Set CHAMELEON_LOG=error|info|debug for diagnostics on stderr.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run coordinator and both stations in one process, then analyze.
    Run(RunArgs),
    /// Act as one station, either offline into a record file or against a coordinator.
    Station(StationArgs),
    /// Serve two TCP stations for the run described by a config file, then analyze.
    Coordinate(CoordinateArgs),
    /// Recompute the report of a finished run directory.
    Analyze(AnalyzeArgs),
    /// Check the model's integrals against their closed forms by quadrature.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeKind {
    Single,
    Chsh,
    Ekert,
}

impl ModeKind {
    fn name(self) -> &'static str {
        match self {
            ModeKind::Single => "single",
            ModeKind::Chsh => "chsh",
            ModeKind::Ekert => "ekert",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeKind>,
    /// Common seed, decimal or 0x-prefixed hex.
    #[arg(long)]
    seed: Option<String>,
    /// Number of trials.
    #[arg(long)]
    n: Option<u64>,
    /// Comma-separated angles: `a,b` (single), `a,a',b,b'` (chsh) or the angle set (ekert).
    /// Accepts radians or multiples of pi such as `pi/4`.
    #[arg(long)]
    angles: Option<String>,
    /// Ekert choice seeds of the two stations, `s1,s2`.
    #[arg(long)]
    choice_seeds: Option<String>,
    /// Output directory for records, manifest and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Groups smaller than this are flagged low-count.
    #[arg(long, default_value_t = DEFAULT_MIN_GROUP)]
    min_group: u64,
}

#[derive(Args)]
struct StationArgs {
    /// Station role, 1 or 2.
    #[arg(long, value_parser = parse_role)]
    role: Role,
    /// Common seed, decimal or 0x-prefixed hex (offline mode).
    #[arg(long, value_parser = parse_seed_arg, required_unless_present = "connect")]
    seed: Option<u64>,
    /// Number of trials (offline mode).
    #[arg(long, required_unless_present = "connect")]
    n: Option<u64>,
    /// Angle policy (offline mode): `fixed:A`, `schedule:S..E=A,...` or `random:SEED:A,B,...`.
    #[arg(long, required_unless_present = "connect")]
    policy: Option<AnglePolicy>,
    /// Coordinator address; seed, trial count and policy then come from it.
    #[arg(long, conflicts_with_all = ["seed", "n", "policy"])]
    connect: Option<String>,
    /// Deadline for the whole session in TCP mode.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    /// Record file to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CoordinateArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Address to listen on; overrides the config transport.
    #[arg(long)]
    listen: Option<String>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Deadline for both station sessions; overrides the config.
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MIN_GROUP)]
    min_group: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory holding the manifest and record files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Report file to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_GROUP)]
    min_group: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyFormat {
    Table,
    Json,
}

#[derive(Args)]
struct VerifyArgs {
    /// Points per axis of the (a, b) grid.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    /// Tolerance for correlations and marginals.
    #[arg(long, default_value_t = DEFAULT_CORRELATION_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_NORMALIZATION_TOL)]
    normalization_tol: f64,
    /// Points per axis of the change-of-variables grid.
    #[arg(long, default_value_t = 8)]
    cov_grid: usize,
    #[arg(long, default_value_t = DEFAULT_CHANGE_OF_VARIABLES_TOL)]
    cov_tol: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: VerifyFormat,
}

/// A failure and the exit code it maps to.
enum Failure {
    /// Bad flags, config or input values.
    Invalid(anyhow::Error),
    /// I/O, protocol, integrity or check failures.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn run_failure(e: RunError) -> Failure {
    match e {
        RunError::Config(_) => invalid(e),
        other => runtime(other),
    }
}

fn parse_role(s: &str) -> Result<Role, String> {
    let n: u8 = s.parse().map_err(|_| format!("role must be 1 or 2, got {s:?}"))?;
    Role::try_from(n).map_err(|_| format!("role must be 1 or 2, got {n}"))
}

fn parse_seed_arg(s: &str) -> Result<u64, String> {
    parse_seed(s).map_err(|e| format!("bad seed {s:?}: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHAMELEON_LOG", "error"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Station(args) => cmd_station(args),
        Command::Coordinate(args) => cmd_coordinate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}

/// The error and its causes, skipping causes already spelled out.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}

fn read_config_value(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(invalid)?;
    serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))
        .map_err(invalid)
}

/// Deserializes a config document, naming the offending field on error.
fn config_from_value(doc: Value) -> Result<RunConfig, Failure> {
    let cfg: RunConfig = serde_path_to_error::deserialize(doc)
        .map_err(|e| invalid(anyhow!("config field `{}`: {}", e.path(), e.inner())))?;
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).collect()
}

/// Applies `run` flags on top of the (possibly empty) config document.
fn merge_run_flags(mut doc: Value, args: &RunArgs) -> Result<Value, Failure> {
    let root = doc
        .as_object_mut()
        .ok_or_else(|| invalid(anyhow!("config must be a JSON object")))?;
    if let Some(seed) = &args.seed {
        root.insert("seed".into(), Value::String(seed.clone()));
    }
    if let Some(n) = args.n {
        root.insert("n".into(), json!(n));
    }
    if let Some(out) = &args.out {
        root.insert("output_dir".into(), json!(out));
    }
    if args.mode.is_some() || args.angles.is_some() || args.choice_seeds.is_some() {
        let existing = root.get("mode").cloned().unwrap_or(Value::Null);
        let existing_kind = existing.get("kind").and_then(Value::as_str).map(str::to_string);
        let kind = match (args.mode, existing_kind.as_deref()) {
            (Some(m), _) => m.name().to_string(),
            (None, Some(k)) => k.to_string(),
            (None, None) => return Err(invalid(anyhow!("--angles and --choice-seeds need --mode"))),
        };
        let mut mode = match existing {
            Value::Object(m) if existing_kind.as_deref() == Some(kind.as_str()) => m,
            _ => Map::new(),
        };
        mode.insert("kind".into(), json!(kind));
        if let Some(angles) = &args.angles {
            let list = split_list(angles);
            let fields: &[&str] = match kind.as_str() {
                "single" => &["a", "b"],
                "chsh" => &["a", "a_prime", "b", "b_prime"],
                _ => &[],
            };
            if fields.is_empty() {
                mode.insert("angle_set".into(), json!(list));
            } else {
                if list.len() != fields.len() {
                    return Err(invalid(anyhow!(
                        "--angles for mode {kind} takes {} values, got {}",
                        fields.len(),
                        list.len()
                    )));
                }
                for (f, v) in fields.iter().zip(list) {
                    mode.insert((*f).into(), Value::String(v));
                }
            }
        }
        if let Some(seeds) = &args.choice_seeds {
            mode.insert("choice_seeds".into(), json!(split_list(seeds)));
        }
        root.insert("mode".into(), Value::Object(mode));
    }
    Ok(doc)
}

/// Analyzes a finished run and writes the report files next to its records.
fn write_reports(run: &RunArtifacts, min_group: u64) -> Result<Report, Failure> {
    let report = analyze(run.config(), &run.station1, &run.station2, min_group).map_err(runtime)?;
    write_report_file(&report, ReportFormat::Json, &run.dir.join(REPORT_JSON)).map_err(runtime)?;
    write_report_file(&report, ReportFormat::Csv, &run.dir.join(REPORT_CSV)).map_err(runtime)?;
    write_plot_file(&report.plot, &run.dir.join(PLOT_CSV)).map_err(runtime)?;
    Ok(report)
}

fn print_report(report: &Report) -> Outcome {
    emit_report(report, ReportFormat::Json, io::stdout().lock()).map_err(runtime)
}

fn cmd_run(args: RunArgs) -> Outcome {
    let doc = match &args.config {
        Some(path) => read_config_value(path)?,
        None => json!({}),
    };
    let mut cfg = config_from_value(merge_run_flags(doc, &args)?)?;
    cfg.transport = Transport::InProcess {
        timeout_ms: cfg.transport.timeout_ms(),
    };
    let started = Instant::now();
    let run = coordinate_run(&cfg).map_err(run_failure)?;
    info!("run {} finished in {:?}", cfg.run_id(), started.elapsed());
    let report = write_reports(&run, args.min_group)?;
    print_report(&report)
}

fn write_record_output(set: &RecordSet, out: Option<&Path>) -> Outcome {
    match out {
        Some(path) => write_records_file(set, path).map_err(runtime),
        None => write_records(set, io::stdout().lock()).map_err(runtime),
    }
}

fn cmd_station(args: StationArgs) -> Outcome {
    let set = if let Some(addr) = &args.connect {
        let timeout = Duration::from_millis(args.timeout_ms);
        let deadline = Instant::now() + timeout;
        let mut link = TcpLink::connect(addr.as_str(), timeout)
            .with_context(|| format!("cannot reach coordinator at {addr}"))
            .map_err(runtime)?;
        station_session(&mut link, args.role, Some(deadline))
            .with_context(|| format!("station {} session", args.role))
            .map_err(runtime)?
    } else {
        let (Some(seed), Some(n), Some(policy)) = (args.seed, args.n, args.policy.as_ref()) else {
            return Err(invalid(anyhow!("offline mode needs --seed, --n and --policy")));
        };
        policy.validate(n).map_err(invalid)?;
        let records = run_station(args.role, seed, n, policy).map_err(invalid)?;
        RecordSet {
            role: args.role,
            seed,
            records,
        }
    };
    write_record_output(&set, args.out.as_deref())
}

fn cmd_coordinate(args: CoordinateArgs) -> Outcome {
    let mut doc = read_config_value(&args.config)?;
    if let Some(out) = &args.out {
        doc.as_object_mut()
            .ok_or_else(|| invalid(anyhow!("config must be a JSON object")))?
            .insert("output_dir".into(), json!(out));
    }
    let mut cfg = config_from_value(doc)?;
    let timeout_ms = args.timeout_ms.unwrap_or(cfg.transport.timeout_ms());
    let listen = match (&args.listen, &cfg.transport) {
        (Some(l), _) => l.clone(),
        (None, Transport::Tcp { listen, .. }) => listen.clone(),
        (None, Transport::InProcess { .. }) => {
            return Err(invalid(anyhow!(
                "coordinate needs a tcp transport in the config or --listen"
            )))
        }
    };
    cfg.transport = Transport::Tcp { listen, timeout_ms };
    let run = coordinate_run(&cfg).map_err(run_failure)?;
    let report = write_reports(&run, args.min_group)?;
    print_report(&report)
}

fn cmd_analyze(args: AnalyzeArgs) -> Outcome {
    let run = load_artifacts(&args.input).map_err(runtime)?;
    let report = analyze(run.config(), &run.station1, &run.station2, args.min_group).map_err(runtime)?;
    match &args.out {
        Some(path) => write_report_file(&report, args.format, path).map_err(runtime),
        None => emit_report(&report, args.format, io::stdout().lock()).map_err(runtime),
    }
}

fn print_table(rows: &[VerifyRow], mut out: impl Write) -> io::Result<()> {
    writeln!(
        out,
        "{:<20} {:>10} {:>10} {:>22} {:>10} {:>10}  status",
        "method", "a", "b", "value", "deviation", "tol"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<20} {:>10.6} {:>10.6} {:>22.15} {:>10.2e} {:>10.0e}  {}",
            r.method.name(),
            r.a,
            r.b,
            r.value,
            r.deviation(),
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        )?;
    }
    let mut methods = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    writeln!(out)?;
    for m in methods {
        let group: Vec<_> = rows.iter().filter(|r| r.method == m).collect();
        let passed = group.iter().filter(|r| r.passed()).count();
        let worst = group.iter().map(|r| r.deviation()).fold(0.0, f64::max);
        writeln!(
            out,
            "{:<20} {passed}/{} passed, max deviation {worst:.2e}",
            m.name(),
            group.len()
        )?;
    }
    out.flush()
}

fn cmd_verify(args: VerifyArgs) -> Outcome {
    if args.grid == 0 || args.cov_grid == 0 {
        return Err(invalid(anyhow!("grid sizes must be positive")));
    }
    for (name, tol) in [
        ("--tol", args.tol),
        ("--normalization-tol", args.normalization_tol),
        ("--cov-tol", args.cov_tol),
    ] {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(invalid(anyhow!("{name} must be positive, got {tol}")));
        }
    }
    let opts = VerifyOptions {
        grid: args.grid,
        tol: args.tol,
        normalization_tol: args.normalization_tol,
        change_of_variables_grid: args.cov_grid,
        change_of_variables_tol: args.cov_tol,
    };
    let rows = run_verification(&opts).map_err(runtime)?;
    let stdout = io::stdout().lock();
    match args.format {
        VerifyFormat::Table => print_table(&rows, stdout).map_err(runtime)?,
        VerifyFormat::Json => {
            let mut stdout = stdout;
            serde_json::to_writer_pretty(&mut stdout, &rows).map_err(runtime)?;
            writeln!(stdout).map_err(runtime)?;
        }
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        Err(runtime(anyhow!("{failed} of {} checks failed", rows.len())))
    } else {
        Ok(())
    }
}
