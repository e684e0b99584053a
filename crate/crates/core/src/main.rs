use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coact::mapping::Strategy;
use coact::report::Report;
use coact::sim::scenario::parse_range;
use coact::sim::sweep::{crash_sweep, format_table, seed_sweep, RECOVER_DELAY};
use coact::sim::{run, Scenario, SimOptions};
use coact::trace::parse_trace_file;

#[derive(Parser)]
#[command(name = "coact", version, about = "Run and audit coordinated atomic action scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and audit the resulting trace.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        horizon: Option<u64>,
        /// Write the trace file here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the final stable state dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Default directory for trace and dump files.
        #[arg(long, env = "COACT_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Run a scenario many times: at every crash point, or over a seed range.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: SweepMode,
        /// Inclusive seed range `A..B` for `--mode seeds`.
        #[arg(long, default_value = "0..99")]
        range: String,
        #[arg(long)]
        strategy: Option<StrategyArg>,
        /// Ticks before a crashed node recovers; 0 leaves it down.
        #[arg(long, default_value_t = RECOVER_DELAY)]
        recover_after: u64,
    },
    /// Audit a trace file written by `run`.
    Audit { trace: PathBuf },
    /// Parse and validate a scenario without running it.
    Check { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Flatten,
    Nested,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Flatten => Strategy::Flatten,
            StrategyArg::Nested => Strategy::Nested,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMode {
    Crash,
    Seeds,
}

enum Failure {
    Audit,
    Input(String),
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Scenario::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn verdict(passed: bool) -> Result<(), Failure> {
    if passed {
        Ok(())
    } else {
        Err(Failure::Audit)
    }
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run { scenario, seed, strategy, horizon, trace, dump, out_dir } => {
            let sc = load(&scenario)?;
            let opts = SimOptions { seed, strategy: strategy.map(Into::into), horizon, ..SimOptions::default() };
            let r = run(&sc, &opts).map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
            let stem = scenario.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let trace = trace.or_else(|| out_dir.as_ref().map(|d| d.join(format!("{stem}.trace"))));
            let dump = dump.or_else(|| out_dir.as_ref().map(|d| d.join(format!("{stem}.dump"))));
            if let Some(p) = trace {
                write(&p, &r.trace_file())?;
            }
            if let Some(p) = dump {
                write(&p, &r.dump)?;
            }
            let rep = Report::from_run(&r).map_err(|e| Failure::Input(format!("internal trace error: {e}")))?;
            print!("{}", rep.to_text());
            verdict(rep.passed())
        }
        Cmd::Sweep { scenario, mode, range, strategy, recover_after } => {
            let sc = load(&scenario)?;
            let opts = SimOptions { strategy: strategy.map(Into::into), ..SimOptions::default() };
            let rows = match mode {
                SweepMode::Crash => crash_sweep(&sc, &opts, (recover_after > 0).then_some(recover_after)),
                SweepMode::Seeds => {
                    let (a, b) = parse_range(&range).ok_or_else(|| Failure::Input(format!("bad range `{range}`")))?;
                    seed_sweep(&sc, &opts, a, b)
                }
            }
            .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
            print!("{}", format_table(&rows));
            verdict(rows.iter().all(|r| r.passed))
        }
        Cmd::Audit { trace } => {
            let text = fs::read_to_string(&trace).map_err(|e| Failure::Input(format!("{}: {e}", trace.display())))?;
            let tf = parse_trace_file(&text).map_err(|e| Failure::Input(format!("{}: {e}", trace.display())))?;
            let rep = Report::from_events(&tf.events, &tf.dump)
                .map_err(|e| Failure::Input(format!("{}: {e}", trace.display())))?;
            print!("{}", rep.to_text());
            verdict(rep.passed())
        }
        Cmd::Check { scenario } => {
            let sc = load(&scenario)?;
            sc.validate().map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit) => ExitCode::from(1),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
