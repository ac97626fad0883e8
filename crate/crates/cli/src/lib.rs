//! Command-line front end for the `biva` library: training, evaluation,
//! anomaly scoring, variant ablations and sampling.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod plot;

use std::ffi::OsString;

use clap::Parser;

use args::{Cli, Command};
use error::{Result, EXIT_OK, EXIT_USAGE};

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.clone();
    match cli.command {
        Command::Train(a) => {
            let cfg = a.experiment(root.as_deref())?;
            for run in commands::train(&cfg)? {
                let s = &run.summary;
                println!(
                    "seed {}: {} steps, valid bound {}, test bound {}{}  -> {}",
                    s.seed,
                    s.steps,
                    show(s.valid_bound),
                    show(s.test_bound),
                    s.grid_kl.map_or(String::new(), |k| format!(", grid KL {k:.4}")),
                    run.dir.display()
                );
            }
        }
        Command::Eval(a) => print!("{}", commands::eval(&a.resolve(root))?.table()),
        Command::Anomaly(a) => print!("{}", commands::anomaly_table(&commands::anomaly(&a.resolve(root)?)?)),
        Command::Ablate(a) => {
            let (cfg, variants, seed) = a.resolve(root.as_deref())?;
            print!("{}", commands::ablation_table(&commands::ablate(&cfg, &variants, seed)?));
        }
        Command::Sample(a) => {
            for f in commands::sample(&a.resolve(root))?.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or("-".into(), |b| format!("{b:.3}"))
}

