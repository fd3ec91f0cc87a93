//! `sttram-sentinel`: run, validate and inspect attack-recovery scenarios,
//! and sweep cell switching behaviour.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};
use sttram_sentinel::engine::{self, bundled, load_scenario, EngineError, MetricsReport, Scenario};
use sttram_sentinel::magnetics::{simulate_exposure, Bit, FieldProfile, MtjParams, Vec3};

const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sttram-sentinel", version, about = "STTRAM magnetic-attack and peer recovery simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Cell {
    Data,
    Sensor,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    Dc,
    Ac,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write its metrics and trace.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Metrics output file; standard output when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a scenario and print it with every default filled in.
    Validate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Tabulate cell flips over a range of field amplitudes as CSV.
    Sweep {
        /// T
        #[arg(long, default_value_t = 0.0)]
        amp_start: f64,
        /// T
        #[arg(long, default_value_t = 0.1)]
        amp_end: f64,
        #[arg(long, default_value_t = 21)]
        steps: usize,
        /// Exposure time; 1 µs for DC and 20 precession periods for AC when omitted.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long, value_enum, default_value_t = Cell::Data)]
        cell: Cell,
        #[arg(long, value_enum, default_value_t = Profile::Dc)]
        profile: Profile,
        /// CSV output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-emit a metrics JSON file in the requested format.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    List,
}

struct Failure {
    code: u8,
    message: String,
}

fn input(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, message: message.into() }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_RUNTIME, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STTRAM_SENTINEL_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { scenario, trace, metrics, format, seed_override } => {
            cmd_run(&scenario, trace.as_deref(), metrics.as_deref(), format, seed_override)
        }
        Command::Validate { scenario, seed_override } => cmd_validate(&scenario, seed_override),
        Command::Sweep { amp_start, amp_end, steps, duration_s, cell, profile, output } => {
            cmd_sweep(amp_start, amp_end, steps, duration_s, cell, profile, output.as_deref())
        }
        Command::Report { metrics, format, output } => cmd_report(&metrics, format, output.as_deref()),
        Command::List => {
            bundled::names().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Reads a scenario from a file, falling back to the bundled set by name.
fn load(spec: &str, seed_override: Option<u64>) -> Result<Scenario, Failure> {
    let path = Path::new(spec);
    let mut scenario = if path.is_file() {
        let bytes = fs::read(path).map_err(|e| input(format!("cannot read {spec}: {e}")))?;
        let mut s = load_scenario(&bytes).map_err(|e| input(e.to_string()))?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        s
    } else if let Some(r) = bundled::bundled(spec) {
        r.map_err(|e| input(e.to_string()))?
    } else {
        return Err(input(format!("{spec}: no such file or bundled scenario")));
    };
    if let Some(seed) = seed_override {
        scenario.seed = seed;
        scenario.validate().map_err(|e| input(e.to_string()))?;
    }
    Ok(scenario)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> CmdResult {
    let fail = |e: io::Error| runtime(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn emit(path: Option<&Path>, contents: &str) -> CmdResult {
    match path {
        Some(p) => write_atomic(p, contents.as_bytes()),
        None => io::stdout().write_all(contents.as_bytes()).map_err(|e| runtime(format!("stdout: {e}"))),
    }
}

fn render(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv(),
    }
}

fn cmd_run(spec: &str, trace: Option<&Path>, metrics: Option<&Path>, format: Format, seed: Option<u64>) -> CmdResult {
    let scenario = load(spec, seed)?;
    info!("running {spec} with seed {}", scenario.seed);
    let out = engine::run(&scenario).map_err(|e| match e {
        e if e.is_input_error() => input(e.to_string()),
        e @ EngineError::Deadlock { .. } => runtime(e.to_string()),
        e => runtime(format!("simulation failed: {e}")),
    })?;
    debug!("{} events, termination {:?}", out.metrics.events_dispatched, out.metrics.termination);
    if let Some(p) = trace {
        write_atomic(p, out.trace.to_text().as_bytes())?;
    }
    emit(metrics, &render(&out.metrics, format))
}

fn cmd_validate(spec: &str, seed: Option<u64>) -> CmdResult {
    let scenario = load(spec, seed)?;
    let mut text = scenario.to_json();
    text.push('\n');
    emit(None, &text)
}

fn cmd_sweep(
    start: f64,
    end: f64,
    steps: usize,
    duration: Option<f64>,
    cell: Cell,
    profile: Profile,
    output: Option<&Path>,
) -> CmdResult {
    if steps < 2 {
        return Err(input(format!("--steps must be at least 2, got {steps}")));
    }
    if !(start.is_finite() && end.is_finite() && start >= 0.0 && end >= 0.0) || start == end {
        return Err(input(format!("amplitude range [{start}, {end}] must be non-negative, finite and non-empty")));
    }
    let params = match cell {
        Cell::Data => MtjParams::data_cell(),
        Cell::Sensor => MtjParams::active_sensor(),
    };
    let f0 = params.gamma * params.h_k / (2.0 * std::f64::consts::PI);
    let duration = duration.unwrap_or(match profile {
        Profile::Dc => 1e-6,
        Profile::Ac => 20.0 / f0,
    });
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(input(format!("--duration-s must be positive, got {duration}")));
    }
    let mut csv = String::from("amplitude_T,flipped_0,flipped_1,flip_time_s\n");
    for k in 0..steps {
        let amp = start + (end - start) * k as f64 / (steps - 1) as f64;
        let field = match profile {
            Profile::Dc => FieldProfile::dc(amp, params.easy_axis),
            Profile::Ac => FieldProfile::ac(amp, Vec3::new(1.0, 0.0, 1.0).normalized(), f0),
        };
        let mut flips = [false; 2];
        let mut first: Option<f64> = None;
        for (slot, bit) in [Bit::Zero, Bit::One].into_iter().enumerate() {
            let o = simulate_exposure(bit, &params, &field, duration).map_err(|e| input(e.to_string()))?;
            flips[slot] = o.flipped;
            if let Some(t) = o.flip_time {
                first = Some(first.map_or(t, |f| f.min(t)));
            }
        }
        let time = first.map(|t| t.to_string()).unwrap_or_default();
        writeln!(csv, "{amp},{},{},{time}", flips[0] as u8, flips[1] as u8).expect("string write");
    }
    emit(output, &csv)
}

fn cmd_report(metrics: &Path, format: Format, output: Option<&Path>) -> CmdResult {
    let text = fs::read_to_string(metrics).map_err(|e| input(format!("cannot read {}: {e}", metrics.display())))?;
    let report: MetricsReport =
        serde_json::from_str(&text).map_err(|e| input(format!("{}: not a metrics report: {e}", metrics.display())))?;
    emit(output, &render(&report, format))
}
