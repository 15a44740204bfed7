//! `hicl` command-line interface: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use hicl_core::config::{PipelineConfig, ProviderKind};
use hicl_core::http::{DenyTransport, HttpTransport, ReqwestTransport};
use hicl_core::pipeline::{Pipeline, PipelineError, Stage, StageRecord};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "hicl", version, about = "Hint-enhanced in-context learning pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "hicl.toml")]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the mock embedder and mock LLM regardless of the config, with networking disabled.
    #[arg(long, global = true)]
    mock: bool,
    /// Answer LLM calls from a replay log file or directory instead of calling the model.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Embed the training corpus and write the vector cache.
    BuildIndex,
    /// Extract one hint per test query.
    ExtractHints,
    /// Mine (query, positive, negative) triplets from training-query hints.
    BuildTriplets,
    /// Train the hint-related retriever head from the mined triplets.
    TrainHer,
    /// Run the configured experiments.
    Eval,
    /// Render tables and CSVs from the eval outputs.
    Report,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::BuildIndex => Stage::BuildIndex,
            Command::ExtractHints => Stage::ExtractHints,
            Command::BuildTriplets => Stage::BuildTriplets,
            Command::TrainHer => Stage::TrainHer,
            Command::Eval => Stage::Eval,
            Command::Report => Stage::Report,
        }
    }
}

fn headline(r: &StageRecord) -> String {
    let s = &r.summary;
    match r.stage {
        Stage::BuildIndex => format!("{} examples indexed, {} new embeddings", s["examples"], s["new_embeddings"]),
        Stage::ExtractHints => format!(
            "{} hints ({} failures), none-rate {:.3}, mean attribution {:.3}",
            s["hints"],
            s["failures"],
            s["none_rate"].as_f64().unwrap_or(0.0),
            s["mean_attribution"].as_f64().unwrap_or(0.0)
        ),
        Stage::BuildTriplets => format!("{} triplets from {} queries", s["triplets"], s["queries"]),
        Stage::TrainHer => format!(
            "best epoch {} (validation accuracy {:.4}, baseline {:.4})",
            s["best_epoch"],
            s["best"]["pairwise_accuracy"].as_f64().unwrap_or(0.0),
            s["baseline"]["pairwise_accuracy"].as_f64().unwrap_or(0.0)
        ),
        Stage::Eval => format!("{} runs", s["runs"]),
        Stage::Report => format!("{} main runs rendered", s["main_runs"]),
    }
}

fn run(cli: &Cli) -> Result<StageRecord, PipelineError> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let transport: Arc<dyn HttpTransport> = if cli.mock {
        config.embedder.kind = ProviderKind::Mock;
        config.llm.kind = ProviderKind::Mock;
        Arc::new(DenyTransport::default())
    } else {
        Arc::new(ReqwestTransport::new())
    };
    Pipeline::new(config, transport)
        .with_replay(cli.replay.clone())
        .run(cli.command.stage())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(&cli) {
        Ok(record) => {
            println!("{}: {}", record.stage.name(), headline(&record));
            println!("{}", serde_json::to_string_pretty(&record.summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let err = json!({
                "error": e.kind(),
                "stage": cli.command.stage().name(),
                "message": e.to_string(),
                "path": e.path(),
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
