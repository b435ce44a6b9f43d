use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crowdstory_cli::{
    chi2_report, cost_report, export_from_snapshot, export_from_story_file, format_export, friedman_report, ingest,
    router, simulate, to_json, ExportFormat,
};
use crowdstory_core::ingestion::DEFAULT_SAMPLE_CAP;
use crowdstory_core::{ApiError, ErrorCode, FileStore, Service};

#[derive(Parser)]
#[command(name = "crowdstory", version, about = "Crowd-written stories from clustered social media posts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an event file from posts (JSONL) and moment clusters (JSON).
    Ingest {
        #[arg(long)]
        posts: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long, default_value = "event")]
        event_id: String,
        #[arg(long, default_value = "#event")]
        hashtag: String,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline with a simulated worker pool.
    Simulate {
        #[arg(long)]
        event: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        quotas: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Serve the HTTP task API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Print a finished story, from a snapshot or a story file.
    Export {
        /// Event id inside the snapshot.
        #[arg(long, requires = "snapshot")]
        event: Option<String>,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["event", "snapshot"])]
        story: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Estimate the crowd cost of an event.
    Cost {
        #[arg(long)]
        event: PathBuf,
        #[arg(long)]
        quotas: Option<PathBuf>,
    },
    /// Statistical tests.
    Stats {
        #[command(subcommand)]
        test: StatsCommand,
    },
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Chi-square goodness of fit against a 50/50 preference.
    Chi2 {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        a: u64,
    },
    /// Friedman test on a JSON matrix (rows are participants).
    Friedman {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        tie_correction: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Structured,
}

fn write_or_print(path: Option<&PathBuf>, contents: &str) -> Result<(), ApiError> {
    match path {
        Some(p) => {
            std::fs::write(p, contents).map_err(|e| ApiError::new(ErrorCode::Internal, format!("{}: {e}", p.display())))
        }
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), ApiError> {
    match cli.command {
        Command::Ingest { posts, clusters, event_id, hashtag, cap, seed, out } => {
            let event = ingest(&event_id, &hashtag, &posts, &clusters, cap, seed)?;
            write_or_print(out.as_ref(), &to_json(&event))
        }
        Command::Simulate { event, pool, seed, quotas, out, transcript } => {
            let files = simulate(&event, &pool, seed, quotas.as_deref())?;
            if let Some(t) = transcript {
                write_or_print(Some(&t), &files.transcript_jsonl)?;
            }
            write_or_print(out.as_ref(), &files.story_text)
        }
        Command::Serve { addr, snapshot } => serve(&addr, snapshot),
        Command::Export { event, snapshot, story, format } => {
            let export = match (story, event, snapshot) {
                (Some(story), _, _) => export_from_story_file(&story)?,
                (None, Some(event), Some(snapshot)) => export_from_snapshot(&snapshot, &event)?,
                _ => return Err(ApiError::validation("pass --story FILE or --event ID --snapshot PATH")),
            };
            let format = match format {
                Format::Text => ExportFormat::Text,
                Format::Structured => ExportFormat::Structured,
            };
            write_or_print(None, &format_export(&export, format))
        }
        Command::Cost { event, quotas } => write_or_print(None, &cost_report(&event, quotas.as_deref())?),
        Command::Stats { test: StatsCommand::Chi2 { n, a } } => write_or_print(None, &chi2_report(n, a)?),
        Command::Stats { test: StatsCommand::Friedman { matrix, tie_correction } } => {
            write_or_print(None, &friedman_report(&matrix, tie_correction)?)
        }
    }
}

fn serve(addr: &str, snapshot: PathBuf) -> Result<(), ApiError> {
    let internal = |e: std::io::Error| ApiError::new(ErrorCode::Internal, e.to_string());
    let service = Arc::new(Service::open(FileStore::new(snapshot))?);
    let runtime = tokio::runtime::Runtime::new().map_err(internal)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(internal)?;
        eprintln!("listening on {}", listener.local_addr().map_err(internal)?);
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(internal)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
