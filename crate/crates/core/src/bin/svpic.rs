use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svpic::config::load_config;
use svpic::convergence::{run_convergence, Observable};
use svpic::ensemble::moments;
use svpic::io::read_snapshot;
use svpic::sde::{run, Scheme};
use svpic::verify::{run_suite, Suite, VerifyOptions};
use svpic::Error;

/// Exit status for configuration and validation errors.
const EXIT_INVALID: u8 = 2;
/// Exit status for numerical blow-up during a run.
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "svpic",
    version,
    about = "Stochastic particle simulator for collisional plasmas"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SVPIC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the step size; the step count is kept.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Scheme::NAMES))]
        scheme: Option<String>,
        #[arg(long, env = "SVPIC_OUT")]
        out_dir: Option<PathBuf>,
    },
    /// Run a built-in verification suite and print one JSON line per check.
    Verify {
        #[arg(value_parser = suite_names())]
        suite: String,
        #[arg(long, default_value_t = VerifyOptions::default().seed)]
        seed: u64,
        /// Multiplies the particle counts of every check.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Measure the weak order of a config on coupled refinement levels.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value = "mean_square_speed",
              value_parser = clap::builder::PossibleValuesParser::new(Observable::NAMES))]
        observable: String,
    },
    /// Print the header and moments of a snapshot file.
    Inspect { snapshot: PathBuf },
}

fn suite_names() -> clap::builder::PossibleValuesParser {
    let mut names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
    names.push("all");
    clap::builder::PossibleValuesParser::new(names)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        match err {
            Error::Io(_) => 1,
            _ => EXIT_INVALID,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> svpic::Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn execute(command: Command) -> svpic::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed,
            dt,
            steps,
            scheme,
            out_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(dt) = dt {
                cfg.integrator.dt = dt;
            }
            if let Some(steps) = steps {
                cfg.integrator.n_steps = steps;
            }
            if let Some(name) = scheme {
                cfg.integrator.scheme = Scheme::from_name(&name).expect("clap checked the name");
            }
            if out_dir.is_some() {
                cfg.output.dir = out_dir;
            }
            let result = run(&cfg)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", to_json(&result)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, seed, scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Config(vec![format!("--scale must be positive, got {scale}")]));
            }
            let opts = VerifyOptions { seed, scale };
            let suites: Vec<Suite> = match Suite::from_name(&suite) {
                Some(s) => vec![s],
                None => Suite::ALL.to_vec(),
            };
            let mut all_pass = true;
            for s in suites {
                for c in run_suite(s, &opts)? {
                    all_pass &= c.pass;
                    println!("{}", c.to_json_line());
                }
            }
            Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Convergence {
            config,
            levels,
            observable,
        } => {
            let cfg = load_config(&config)?;
            let obs = Observable::from_name(&observable).expect("clap checked the name");
            println!("{}", to_json(&run_convergence(&cfg, levels, obs)?)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { snapshot } => {
            let (ens, meta) = read_snapshot(&snapshot)?;
            let report = serde_json::json!({
                "meta": meta,
                "moments": moments(&ens, &meta.species),
            });
            println!("{}", to_json(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
