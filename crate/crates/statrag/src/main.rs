use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use statrag::{AppState, Engine, ServiceConfig};
use statrag_core::eval::{bench_strategies, load_dataset, run_eval, write_bench_csv, BenchRow};
use statrag_core::index::VectorIndex;
use statrag_core::pipeline::Answer;
use statrag_core::router::{Strategy, StrategyChoice};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "statrag",
    version,
    about = "Jurisdiction-aware question answering over statute corpora"
)]
struct Cli {
    /// Service configuration file (JSON).
    #[arg(long, global = true, default_value = "statrag.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and chunk the corpus, printing one chunk per line as JSON.
    Ingest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the index from the corpus and save it.
    Index {
        /// Write here instead of the configured index path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add the chunks of another corpus directory to the saved index.
    Append {
        /// Corpus root holding the new documents.
        corpus: PathBuf,
    },
    /// Answer one question.
    Query {
        question: String,
        #[arg(long, default_value = "auto")]
        strategy: StrategyChoice,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run a Q&A dataset and write an evaluation report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave wall-clock fields out so repeated runs are byte-identical.
        #[arg(long)]
        no_timings: bool,
        /// JSON sidecar of scores from external metric tools.
        #[arg(long)]
        external_scores: Option<PathBuf>,
    },
    /// Time each query under whole-index and state-wise retrieval (CSV).
    Bench {
        /// One query per line.
        #[arg(long)]
        queries: PathBuf,
        /// `auto` runs both strategies.
        #[arg(long, default_value = "auto")]
        strategy: StrategyChoice,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        /// Overrides bind_address from the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn engine(config: &Path) -> Result<Engine> {
    let config = ServiceConfig::load(config)?;
    Ok(Engine::new(config)?)
}

fn report_warnings(warnings: &[statrag_core::corpus::IngestWarning]) {
    for w in warnings {
        tracing::warn!("{w}");
    }
}

fn render_text(answer: &Answer) -> String {
    let mut s = answer.text.clone();
    let states: Vec<&str> = answer.strategy.states.iter().map(|j| j.name()).collect();
    s.push_str(&format!("\n\nStrategy: {}", answer.strategy.strategy));
    if !states.is_empty() {
        s.push_str(&format!(" ({})", states.join(", ")));
    }
    if !answer.sources.is_empty() {
        s.push_str("\nSources:");
        for (i, src) in answer.sources.iter().enumerate() {
            s.push_str(&format!(
                "\n  [{}] {} ({}) score {:.3}",
                i + 1,
                src.citation,
                src.doc_id,
                src.score
            ));
        }
    }
    s.push('\n');
    s
}

fn k_arg(k: Option<u64>) -> Option<usize> {
    k.map(|k| k as usize)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { out } => {
            let engine = engine(&cli.config)?;
            let (chunks, warnings) = engine.chunks()?;
            report_warnings(&warnings);
            let mut w = output(out.as_deref())?;
            for c in &chunks {
                serde_json::to_writer(&mut w, c)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Command::Index { out } => {
            let engine = engine(&cli.config)?;
            let (index, warnings) = engine.build_index()?;
            report_warnings(&warnings);
            let path = out.unwrap_or_else(|| engine.config.index_path.clone());
            index.save(&path)?;
            engine.persist_cache()?;
            eprintln!(
                "indexed {} chunks in {} partitions -> {}",
                index.len(),
                index.partition_count(),
                path.display()
            );
        }
        Command::Append { corpus } => {
            let engine = engine(&cli.config)?;
            let path = &engine.config.index_path;
            if !path.exists() {
                bail!("no index at {}; run `statrag index` first", path.display());
            }
            let mut index = VectorIndex::load(path)?;
            let (chunks, warnings) = engine.chunks_from(&corpus)?;
            report_warnings(&warnings);
            let (fresh, known): (Vec<_>, Vec<_>) = chunks.into_iter().partition(|c| !index.contains(&c.chunk_id));
            let added = index.append(&fresh, engine.pipeline.embedder.as_ref())?;
            index.save(path)?;
            engine.persist_cache()?;
            eprintln!(
                "appended {added} chunks ({} already indexed); index now holds {}",
                known.len(),
                index.len()
            );
        }
        Command::Query {
            question,
            strategy,
            k,
            format,
        } => {
            let engine = engine(&cli.config)?;
            let index = engine.open_index()?;
            let answer = engine.pipeline.answer(&question, &index, strategy, k_arg(k))?;
            engine.persist_cache()?;
            let mut w = output(None)?;
            match format {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut w, &answer)?;
                    w.write_all(b"\n")?;
                }
                Format::Text => w.write_all(render_text(&answer).as_bytes())?,
            }
            w.flush()?;
        }
        Command::Eval {
            dataset,
            out,
            no_timings,
            external_scores,
        } => {
            let mut engine = engine(&cli.config)?;
            if no_timings {
                engine.pipeline.options.capture_timings = false;
            }
            let records = load_dataset(&dataset)?;
            let index = engine.open_index()?;
            let mut report = run_eval(&records, &index, &engine.pipeline, engine.fingerprint())?;
            if let Some(p) = external_scores {
                let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
                report.attach_external_scores(&text)?;
            }
            engine.persist_cache()?;
            let mut w = output(out.as_deref())?;
            w.write_all(report.to_json().as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
            if !report.excluded.is_empty() {
                eprintln!(
                    "{} record(s) failed and were excluded from the means",
                    report.excluded.len()
                );
            }
        }
        Command::Bench {
            queries,
            strategy,
            k,
            out,
        } => {
            let engine = engine(&cli.config)?;
            let text =
                std::fs::read_to_string(&queries).with_context(|| format!("cannot read {}", queries.display()))?;
            let queries: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let index = engine.open_index()?;
            let mut rows: Vec<BenchRow> = bench_strategies(&queries, &index, &engine.pipeline, k_arg(k))?;
            rows.retain(|r| match strategy {
                StrategyChoice::Auto => true,
                StrategyChoice::Wdi => r.strategy == Strategy::Wdi,
                StrategyChoice::Swi => r.strategy == Strategy::Swi,
            });
            engine.persist_cache()?;
            write_bench_csv(&rows, output(out.as_deref())?)?;
        }
        Command::Serve { bind } => {
            let engine = engine(&cli.config)?;
            let index = engine.open_index()?;
            let bind = bind.unwrap_or_else(|| engine.config.bind_address.clone());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(engine, index, bind))?;
        }
    }
    Ok(())
}

async fn serve(engine: Engine, index: VectorIndex, bind: String) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .with_context(|| format!("cannot bind {bind}"))?;
    let addr = listener.local_addr()?;
    let index_path = engine.config.index_path.clone();
    let state = Arc::new(AppState::new(engine.pipeline.clone(), index, engine.fingerprint()));
    tracing::info!(%addr, chunks = state.index().len(), "serving");
    spawn_reloader(state.clone(), index_path);
    statrag::serve(listener, state, shutdown_signal()).await?;
    engine.persist_cache()?;
    tracing::info!("shut down");
    Ok(())
}

/// SIGHUP reloads the index file and swaps it in.
#[cfg(unix)]
fn spawn_reloader(state: Arc<AppState>, path: PathBuf) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hup) = signal(SignalKind::hangup()) else {
        return;
    };
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            let p = path.clone();
            let fingerprint = state.index().fingerprint().to_string();
            match tokio::task::spawn_blocking(move || VectorIndex::load(&p)).await {
                Ok(Ok(index)) if index.fingerprint() == fingerprint => {
                    tracing::info!(chunks = index.len(), "index reloaded");
                    state.replace_index(index);
                }
                Ok(Ok(index)) => tracing::error!(
                    found = index.fingerprint(),
                    expected = %fingerprint,
                    "reload skipped: embedder fingerprint changed"
                ),
                Ok(Err(e)) => tracing::error!("reload failed: {e}"),
                Err(e) => tracing::error!("reload task failed: {e}"),
            }
        }
    });
}

#[cfg(not(unix))]
fn spawn_reloader(_state: Arc<AppState>, _path: PathBuf) {}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// The error chain, skipping causes whose text the outer message already
/// carries.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("STATRAG_LOG").unwrap_or_else(|_| "info".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
