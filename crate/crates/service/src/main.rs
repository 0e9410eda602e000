use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use clickseg::checkpoint::load_model;
use clickseg::model::Model;
use clickseg::ModelConfig;
use clickseg_service::{router, AppState};

/// Serve the interactive segmentation API.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Model checkpoint (JSON). Without one, a randomly initialized default model is served.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Sessions kept in memory before the least recently used is dropped.
    #[arg(long, default_value_t = 64)]
    max_sessions: usize,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_max_level(tracing::Level::INFO).init();
    let args = Args::parse();
    let model: Model<f64> = match &args.checkpoint {
        Some(p) => load_model(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            tracing::warn!("no --checkpoint given, serving an untrained model");
            Model::new(ModelConfig::default(), 0)?
        }
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("bad --host/--port")?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(model, args.max_sessions)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
