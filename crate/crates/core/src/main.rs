use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use granulite::cli::{self, Command, Scenario, Summary, SCENARIO_FILE};

/// Particle simulation of the thermostatted inelastic Boltzmann equation.
///
/// Set GRANULITE_THREADS to fix the number of worker threads.
#[derive(Parser)]
#[command(name = "granulite", version = cli::BUILD_ID)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Executes the scenario: its sweep, its probe, or a plain trajectory.
    Run(ScenarioArgs),
    /// Runs to stationarity and reports window averages.
    Steady(ScenarioArgs),
    /// Measures the energy relaxation rate at `lambda`.
    ProbeMu(ScenarioArgs),
    /// Measures the relaxation rate over `sweep.lambdas` and fits its scaling.
    SweepLambda(ScenarioArgs),
    /// Free cooling run with a cooling-law fit.
    Haff(ScenarioArgs),
    /// Checks the structural assumptions on the restitution law.
    CheckRestitution(ScenarioArgs),
    /// Writes a CSV bundle for plotting from a finished output directory.
    Report { dir: PathBuf },
    /// Continues a trajectory from a checkpoint.
    Resume {
        checkpoint: PathBuf,
        /// Scenario file; defaults to scenario.toml next to the checkpoint.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// New end time.
        #[arg(long)]
        t_end: Option<f64>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut scenario = cli::parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(out) = out {
        scenario.output.dir = out;
    }
    Ok(scenario)
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("GRANULITE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GRANULITE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn report_outcome(summary: &Summary) -> ExitCode {
    match &summary.error {
        None => {
            eprintln!(
                "{}: ok in {:.1}s, results in {}",
                summary.name,
                summary.wall_time_s,
                summary.scenario.output.dir.display()
            );
            ExitCode::SUCCESS
        }
        Some(e) => {
            eprintln!("{}: {} error: {}", summary.name, e.kind, e.message);
            ExitCode::from(summary.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match args.command {
        Cmd::Run(a) => load(&a.scenario, a.out).map(|s| {
            let command = Command::for_scenario(&s);
            cli::execute(&s, command)
        }),
        Cmd::Steady(a) => load(&a.scenario, a.out).map(|s| cli::execute(&s, Command::Steady)),
        Cmd::ProbeMu(a) => load(&a.scenario, a.out).map(|s| cli::execute(&s, Command::ProbeMu)),
        Cmd::SweepLambda(a) => load(&a.scenario, a.out).map(|s| cli::execute(&s, Command::SweepLambda)),
        Cmd::Haff(a) => load(&a.scenario, a.out).map(|s| cli::execute(&s, Command::Haff)),
        Cmd::CheckRestitution(a) => load(&a.scenario, a.out).map(|s| cli::execute(&s, Command::CheckRestitution)),
        Cmd::Report { dir } => {
            return match cli::report(&dir) {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            };
        }
        Cmd::Resume {
            checkpoint,
            scenario,
            t_end,
            out,
        } => {
            let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
            let path = scenario.unwrap_or_else(|| dir.join(SCENARIO_FILE));
            load(&path, Some(out.unwrap_or(dir))).and_then(|mut s| {
                if let Some(t) = t_end {
                    s.t_end = t;
                    s.validate().map_err(|e| e.to_string())?;
                }
                Ok(cli::resume_from_checkpoint(&checkpoint, &s))
            })
        }
    };
    match result {
        Ok(summary) => report_outcome(&summary),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
