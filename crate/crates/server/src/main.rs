use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dissect_core::corpus::ReferenceCorpus;
use dissect_core::index::{build_index, save_index, IndexConfig, DEFAULT_SAMPLE_RATE, DEFAULT_TAU, DEFAULT_TOP_K};
use dissect_core::model::load_weights;
use dissect_core::patches::DEFAULT_PATCH;
use dissect_server::demo::{write_demo, DEMO_PATCH};
use dissect_server::{api, Session, SessionConfig, SessionPaths};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "dissect", version, about = "Interactive neuron dissection service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Build an activation index over a reference corpus.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Write a synthetic demo workspace (model, corpora, index).
    Demo {
        #[arg(long, env = "DISSECT_OUT")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexAction {
    Build(BuildArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "DISSECT_MODEL")]
    model: PathBuf,
    #[arg(long, env = "DISSECT_INDEX")]
    index: PathBuf,
    /// Directory of browsable PNG images.
    #[arg(long, env = "DISSECT_CORPUS")]
    corpus: PathBuf,
    /// Concept label log (created on first write).
    #[arg(long, env = "DISSECT_LABELS")]
    labels: PathBuf,
    /// Root of the reference corpus the index was built from [default: --corpus].
    #[arg(long, env = "DISSECT_REFERENCE")]
    reference: Option<PathBuf>,
    #[arg(long, env = "DISSECT_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "DISSECT_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "DISSECT_PATCH_SIZE", default_value_t = DEFAULT_PATCH)]
    patch_size: usize,
    #[arg(long, env = "DISSECT_LESION_THRESHOLD", default_value_t = 0.5)]
    lesion_threshold: f32,
    /// Cached inference results; 0 disables caching.
    #[arg(long, env = "DISSECT_CACHE_SIZE", default_value_t = 64)]
    cache_size: usize,
    #[arg(long, env = "DISSECT_TOP_K", default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, env = "DISSECT_MODEL")]
    model: PathBuf,
    /// Reference corpus directory (manifest.tsv or *.png).
    #[arg(long, env = "DISSECT_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "DISSECT_INDEX")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match Cli::parse().command {
        Command::Serve(args) => serve(args),
        Command::Index {
            action: IndexAction::Build(args),
        } => build(args),
        Command::Demo { out } => {
            let paths = write_demo(&out)?;
            println!(
                "dissect serve --model {} --index {} --corpus {} --reference {} --labels {} --patch-size {DEMO_PATCH}",
                paths.model.display(),
                paths.index.display(),
                paths.corpus.display(),
                paths.reference.display(),
                paths.labels.display(),
            );
            Ok(())
        }
    }
}

fn build(args: BuildArgs) -> anyhow::Result<()> {
    let model = load_weights(&args.model)?;
    let corpus = ReferenceCorpus::open(&args.corpus)?;
    let config = IndexConfig {
        tau: args.tau,
        sample_rate: args.sample_rate,
        seed: args.seed,
    };
    let index = build_index(&model, &corpus, config)?;
    save_index(&index, &args.out)?;
    tracing::info!(images = corpus.len(), neurons = index.neuron_count(), out = %args.out.display(), "index written");
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let paths = SessionPaths {
        reference: args.reference.unwrap_or_else(|| args.corpus.clone()),
        model: args.model,
        index: args.index,
        corpus: args.corpus,
        labels: args.labels,
    };
    let config = SessionConfig {
        patch_size: args.patch_size,
        lesion_threshold: args.lesion_threshold,
        cache_capacity: args.cache_size,
        top_k: args.top_k,
    };
    let session = Session::open(&paths, config).context("opening session")?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("bad --host/--port")?;
    let app = api::router(Arc::new(session));
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
