//! `mlso train | eval | verify`.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 config or data error,
//! 3 checkpoint error, 4 training diverged, 5 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlso_core::config::{parse_pairs, RunConfig};
use mlso_core::runner::{self, CHECKPOINT_FILE};
use mlso_core::tensor::OpKind;
use mlso_core::{verify, Error};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mlso", version, about = "Multi-level second-order few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config and write a run directory.
    Train(RunArgs),
    /// Evaluate a checkpoint on test episodes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<output>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the oracle property suites.
    Verify {
        /// Break one backward rule (mutation check), e.g. `min_scalar`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Ingestion { .. } | Error::Sampling(_) | Error::Io { .. } => 2,
        Error::Checkpoint(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 5,
    }
}

fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--key value`, got `{flag}`")));
        };
        if let Some((k, v)) = key.split_once('=') {
            pairs.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let Some(value) = it.next() else {
            return Err(Error::Config(format!("`{flag}` needs a value")));
        };
        pairs.push((key.replace('-', "_"), value.clone()));
    }
    Ok(pairs)
}

/// File values, then the data-root environment variable, then flags. Also
/// returns a `--checkpoint` that followed the first override.
fn load_config(args: &RunArgs) -> Result<(RunConfig, Option<PathBuf>), Error> {
    let mut flags = override_pairs(&args.overrides)?;
    let take = |flags: &mut Vec<(String, String)>, key: &str| {
        let v = flags.iter().rev().find(|(k, _)| k == key).map(|(_, v)| PathBuf::from(v));
        flags.retain(|(k, _)| k != key);
        v
    };
    let config = take(&mut flags, "config").or_else(|| args.config.clone());
    let checkpoint = take(&mut flags, "checkpoint");
    let mut pairs = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(flags.iter().cloned());
    let mut cfg = RunConfig::from_pairs(&pairs)?;
    cfg.apply_env();
    if let Some((_, v)) = flags.iter().rev().find(|(k, _)| k == "data_root") {
        cfg.set("data_root", v)?;
    }
    cfg.validate()?;
    Ok((cfg, checkpoint))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, _) = load_config(&args)?;
            let summary = runner::cmd_train(&cfg)?;
            for r in &summary.records {
                println!("{}", r.line());
            }
            println!("wrote {}", summary.dir.display());
            Ok(0)
        }
        Command::Eval { run, checkpoint } => {
            let (cfg, trailing) = load_config(&run)?;
            let ckpt = checkpoint.or(trailing).unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
            let report = runner::cmd_eval(&cfg, &ckpt)?;
            println!("{}", report.line());
            Ok(0)
        }
        Command::Verify { inject_fault } => {
            let fault = inject_fault.map(|f| f.parse::<OpKind>()).transpose()?;
            let report = verify::run_all(fault);
            for s in &report {
                println!("{}", s.line());
            }
            let failed: Vec<_> = report.iter().filter(|s| !s.passed).map(|s| s.name).collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                eprintln!("failed properties: {}", failed.join(", "));
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
