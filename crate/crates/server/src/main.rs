use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;

use navtoken_core::tvi::DEFAULT_EMBED_DIM;
use navtoken_server::{open_cache, serve, AppState};

#[derive(Parser)]
#[command(name = "navtoken-server", version, about = "Serve the navtoken engine over HTTP/JSON")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
    /// Coarse feature cache file, created when missing.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Channel count of cached tokens.
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    cache_dim: usize,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::from_default_env().add_directive("info".parse().unwrap())).init();
    let args = Args::parse();

    let cache = match args.cache.as_ref().map(|p| open_cache(p, args.cache_dim)).transpose() {
        Ok(c) => c,
        Err(e) => {
            tracing::error!("cache: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!("bind {}: {e}", args.bind);
            return ExitCode::FAILURE;
        }
    };
    tracing::info!("listening on {}", args.bind);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    match serve(listener, AppState::new(cache), shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
