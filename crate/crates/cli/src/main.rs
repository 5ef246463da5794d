use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use onionmail::identity::{generate_identity, generate_mail_key};
use onionmail::scenario::{parse_scenario, run_scenario};

#[derive(Parser)]
#[command(
    name = "onionmail",
    version,
    about = "Run and inspect onionmail simulation scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and evaluate its assertions.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's SEED directive.
        #[arg(long)]
        seed: Option<u64>,
        /// Event log destination; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long = "dump-mailboxes")]
        dump_mailboxes: Option<PathBuf>,
        #[arg(long = "dump-ledgers")]
        dump_ledgers: Option<PathBuf>,
    },
    /// Parse a scenario without running it.
    Check { scenario: PathBuf },
    /// Print the address and mail-key fingerprint derived from a seed.
    DemoKeys {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "user")]
        localpart: String,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            log,
            metrics,
            dump_mailboxes,
            dump_ledgers,
        } => {
            let sc = match parse_scenario(&read(&scenario)?) {
                Ok(sc) => sc,
                Err(e) => {
                    eprintln!("{}: {e}", scenario.display());
                    return Ok(2);
                }
            };
            let out = run_scenario(&sc, seed);
            match &log {
                Some(p) => write(p, &out.log)?,
                None => print!("{}", out.log),
            }
            if let Some(p) = &metrics {
                write(p, &out.metrics)?;
            }
            if let Some(p) = &dump_mailboxes {
                write(p, &out.mailboxes)?;
            }
            if let Some(p) = &dump_ledgers {
                write(p, &out.ledgers)?;
            }
            if let Some(e) = &out.error {
                eprintln!("{}: {e}", scenario.display());
            }
            for f in &out.failures {
                eprintln!("FAIL {f}");
            }
            Ok(out.exit_code as u8)
        }
        Command::Check { scenario } => match parse_scenario(&read(&scenario)?) {
            Ok(sc) => {
                println!("ok: {} directives", sc.directives.len());
                Ok(0)
            }
            Err(e) => {
                eprintln!("{}: {e}", scenario.display());
                Ok(2)
            }
        },
        Command::DemoKeys { seed, localpart } => {
            let id = generate_identity(seed);
            let addr = id.address(&localpart)?;
            println!("address={addr}");
            println!("identity-public={}", id.public().to_hex());
            println!("mail-fingerprint={}", generate_mail_key(seed).fingerprint());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
