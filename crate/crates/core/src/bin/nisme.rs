use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nisme::scenario::{compare_dirs, reduce_scenario, run_scenario, setup, write_audit_csv, ScenarioSpec};
use nisme::Error;

/// Attack-resilient joint state, attack and mode estimation.
#[derive(Parser)]
#[command(name = "nisme", version)]
struct Cli {
    /// Worker threads for the mode bank (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the seed of the scenario file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, estimate and score a scenario.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mode-set reduction audit without running the estimator.
    Reduce {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two run directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Largest tolerated fraction of steps with differing reported modes.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Check a scenario file.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

const EXIT_DIVERGED: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 3,
        Error::Io(_) => 5,
        Error::Mode { source, .. } => exit_code(source),
        Error::Domain(_) | Error::Dimension { .. } => 6,
        Error::Numerical(_) | Error::Divergence { .. } => 4,
    }
}

fn load(args: &ScenarioArgs) -> Result<ScenarioSpec, Error> {
    let mut spec = ScenarioSpec::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn out_dir(spec: &ScenarioSpec, out: Option<PathBuf>, scenario: &Path) -> PathBuf {
    out.or_else(|| spec.output_dir.clone()).unwrap_or_else(|| {
        let stem = scenario.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(format!("{stem}_seed{}", spec.seed))
    })
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run { scenario, out } => {
            let spec = load(&scenario)?;
            let dir = out_dir(&spec, out, &scenario.scenario);
            info!("running {} into {}", scenario.scenario.display(), dir.display());
            let m = run_scenario(&spec, &dir)?;
            println!("output_dir = {:?}", dir.display().to_string());
            println!("steps = {}", m.steps);
            println!("mode_accuracy = {}", m.mode_accuracy);
            for s in &m.segments {
                println!("segment [{:.2}, {:.2}] {} accuracy = {}", s.start, s.end, s.mode, s.accuracy);
            }
            Ok(0)
        }
        Command::Reduce { scenario, out } => {
            let spec = load(&scenario)?;
            let s = setup(&spec)?;
            let (_, audit) = reduce_scenario(&spec, &s)?;
            for (j, e) in audit.entries.iter().enumerate() {
                println!("{:>4} {:<24} {}", j, e.label, audit.reason(j));
            }
            println!("kept {} of {} modes", audit.kept.len(), audit.entries.len());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_audit_csv(&dir.join("reduction_audit.csv"), &audit)?;
            }
            Ok(0)
        }
        Command::Compare { a, b, threshold } => {
            let c = compare_dirs(&a, &b, threshold)?;
            print!("{}", toml::to_string(&c).map_err(|e| Error::Io(e.to_string()))?);
            Ok(if c.diverged { EXIT_DIVERGED } else { 0 })
        }
        Command::Validate { scenario } => {
            let spec = load(&scenario)?;
            println!("{}: ok ({} steps)", scenario.scenario.display(), spec.steps());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
