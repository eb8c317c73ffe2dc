//! Local HTTP + WebSocket service for interactive diffusion sessions.
//!
//! Sessions live in memory. Each holds a dataset, at most one model and at
//! most one training run, whose per-epoch snapshots stream over
//! `/sessions/{id}/events`.

pub mod api;
pub mod session;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tracing::info;

pub use api::{router, AppState};
pub use session::{Registry, SessionError};

pub const DEFAULT_PORT: u16 = 8606;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions unused for this long are dropped (running ones are kept).
    pub idle_ttl: Duration,
    /// Directory served at `/`, if any.
    pub static_dir: Option<PathBuf>,
    pub default_seed: u64,
    pub default_dataset_n: usize,
    pub default_sample_n: usize,
    pub default_density_n: usize,
    pub default_jitter: f64,
    /// Upper bound on `n` for datasets, samples and density frames.
    pub max_points: usize,
    pub max_steps: usize,
    pub max_epochs: usize,
    /// Preview points per epoch snapshot.
    pub preview_cap: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            idle_ttl: session::DEFAULT_IDLE_TTL,
            static_dir: None,
            default_seed: 0,
            default_dataset_n: 2000,
            default_sample_n: 1000,
            default_density_n: 2000,
            default_jitter: 0.02,
            max_points: 20_000,
            max_steps: 2000,
            max_epochs: 10_000,
            preview_cap: 400,
        }
    }
}

pub fn app_state(config: ServiceConfig) -> AppState {
    Arc::new(Registry::new(config))
}

/// Serves until the listener fails, sweeping idle sessions in the background.
pub async fn serve(listener: TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    let state = app_state(config);
    let sweeper = state.clone();
    let period = (sweeper.config.idle_ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let dropped = sweeper.sweep();
            if dropped > 0 {
                info!(dropped, "expired idle sessions");
            }
        }
    });
    if let Ok(addr) = listener.local_addr() {
        info!(%addr, "listening");
    }
    axum::serve(listener, router(state)).await
}
