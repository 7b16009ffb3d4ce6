use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use draft_audit::error::Error;
use draft_audit::runner::{self, demo, RunConfig};

#[derive(Parser)]
#[command(
    name = "draft-audit",
    about = "Counterfactual faithfulness auditing for reasoning-model thinking drafts",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Resume into an output directory that already holds records.
    #[arg(long, global = true)]
    resume: bool,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose every draft into labeled steps and emit them.
    Decompose,
    /// Dry run: construct and emit the intervention texts only.
    Intervene,
    /// Run the full evaluation pipeline.
    Run,
    /// Re-render the report from persisted records.
    Report,
    /// Run the end-to-end demo against the deterministic mock backend.
    MockDemo {
        /// Scripted target behavior: correct-keep, follow-faithful,
        /// follow-same-choice, always-null, or echo-conclusion.
        #[arg(long, default_value = "correct-keep")]
        behavior: String,
        /// Synthetic dataset size.
        #[arg(long, default_value_t = 10)]
        items: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if cli.resume {
        config.resume = true;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

async fn execute(cli: Cli) -> Result<u8, Error> {
    match &cli.command {
        Command::Decompose => {
            let config = load_config(&cli)?;
            let path = runner::decompose_only(&config).await?;
            println!("decompositions written to {}", path.display());
            Ok(0)
        }
        Command::Intervene => {
            let config = load_config(&cli)?;
            let path = runner::intervene_only(&config).await?;
            println!("interventions written to {}", path.display());
            Ok(0)
        }
        Command::Run => {
            let config = load_config(&cli)?;
            let outcome = runner::run(&config).await?;
            println!("report written to {}", outcome.report_dir.display());
            println!(
                "records: {} (flagged: {})",
                outcome.report.diagnostics.total_records, outcome.flagged_records
            );
            Ok(if outcome.flagged_records > 0 { 2 } else { 0 })
        }
        Command::Report => {
            let config = load_config(&cli)?;
            let path = runner::report_only(&config)?;
            println!("report written to {}", path.display());
            Ok(0)
        }
        Command::MockDemo { behavior, items } => {
            let workdir = cli
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("mock-demo"));
            let mut config = demo::demo_config(&workdir, behavior, *items)?;
            if cli.resume {
                config.resume = true;
            }
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let outcome = runner::run(&config).await?;
            let report_md = outcome.report_dir.join("report.md");
            println!(
                "{}",
                std::fs::read_to_string(&report_md)
                    .map_err(|e| Error::io(report_md.display().to_string(), e))?
            );
            println!("report written to {}", outcome.report_dir.display());
            Ok(if outcome.flagged_records > 0 { 2 } else { 0 })
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli).await {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(1)
        }
    }
}
