use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hdt::Error;
use hdt_cli::commands::{self, Context};
use hdt_cli::config::{RunConfig, Variant};

#[derive(Parser)]
#[command(name = "hdt", version, about = "Subspace MRI reconstruction with adapted generative priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run root directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured acceleration factor.
    #[arg(long, global = true)]
    af: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multi-echo dataset.
    Simulate,
    /// Pretrain the generator on the phantom corpus.
    Train,
    /// Adapt the pretrained generator to the subject reference.
    Adapt,
    /// Reconstruct one variant.
    Recon {
        #[arg(long, default_value = "proposed")]
        variant: String,
    },
    /// Metrics, images and AF sweep tables.
    Report,
    /// Style-mixing grid and per-block image changes.
    Stylemix,
}

fn run(cli: Cli) -> hdt::Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(af) = cli.af {
        cfg.acquisition.af = af;
    }
    cfg.validate()?;
    let ctx = Context::new(cfg, cli.out, commands::threads_from_env()?);
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Adapt => commands::adapt(&ctx),
        Command::Recon { variant } => commands::recon(&ctx, variant.parse::<Variant>()?),
        Command::Report => commands::report(&ctx),
        Command::Stylemix => commands::stylemix(&ctx),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
