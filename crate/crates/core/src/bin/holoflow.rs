use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holoflow::cli::{cmd_eval, cmd_generate, cmd_train, cmd_verify, exit_code, write_json};
use holoflow::config::RunConfig;
use holoflow::Error;

#[derive(Parser)]
#[command(name = "holoflow", version, about = "Bulk-field flow matching: verify, train, generate, evaluate")]
struct Cli {
    /// Run configuration (sectioned key = value file); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from (train) or sample with (generate).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the propagator ODE and path invariants for the configured background.
    Verify,
    /// Train a velocity model.
    Train,
    /// Generate samples from a checkpoint.
    Generate,
    /// Score generated points (CSV) or images (directory of PGM files).
    Eval {
        generated: PathBuf,
        /// Reference points CSV, PGM directory or IDX file.
        reference: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("holoflow-out"));
    match cli.command {
        Command::Verify => {
            let report = cmd_verify(&cfg)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
        Command::Train => {
            let summary = cmd_train(&cfg, &out, cli.checkpoint.as_deref())?;
            if let Some(last) = summary.rows.last() {
                println!("trained to epoch {} (loss {:.6})", last.epoch, last.loss);
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Generate => {
            let ckpt = cli.checkpoint.as_deref().ok_or_else(|| Error::Config("generate needs --checkpoint".into()))?;
            let summary = cmd_generate(&cfg, ckpt, &out)?;
            println!("generated {} sample(s) into {}", summary.count, out.display());
            Ok(true)
        }
        Command::Eval { generated, reference } => {
            let v = cmd_eval(&cfg, &generated, reference.as_deref())?;
            write_json(std::io::stdout(), &v)?;
            if cli.out.is_some() {
                std::fs::create_dir_all(&out)?;
                write_json(std::fs::File::create(out.join("eval.json"))?, &v)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
