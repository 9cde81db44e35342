use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use navkit_annotate::{router, serve, AppState, Status, Store};

use crate::config::{serde_value, FileConfig, ENV_TOKEN};
use crate::error::CliError;

const DEFAULT_BIND: &str = "127.0.0.1:8080";

const SERVE_ABOUT: &str = "\
Runs the annotation service for one batch.

--data-dir holds the append-only event log (events.jsonl) and batch.json,
which pins the dataset the batch was opened with. The first start needs
--dataset; later starts may omit it. All state is rebuilt from the log, so a
killed server restarts exactly where it stopped.

The JSON API lives under /api (see FORMATS.md); /ui serves --ui-dir, or a
placeholder page when no bundle is given. With --token (or NAVKIT_TOKEN)
every /api request needs `Authorization: Bearer <token>`.

Once listening, prints `listening on http://ADDR` to stdout. SIGINT and
SIGTERM stop it after in-flight requests finish.";

/// Run the annotation service.
#[derive(Debug, Args)]
#[command(long_about = SERVE_ABOUT)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Listen address [default: 127.0.0.1:8080]; port 0 picks a free port.
    #[arg(long)]
    pub bind: Option<String>,
    /// Seconds an annotator's claim lasts without activity.
    #[arg(long)]
    pub lease_ttl_secs: Option<u64>,
    #[arg(long, env = ENV_TOKEN, hide_env_values = true)]
    pub token: Option<String>,
    /// Built annotation UI to serve under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

pub fn run(a: ServeArgs, file: &FileConfig) -> Result<(), CliError> {
    let f = &file.serve;
    let data_dir = a
        .data_dir
        .or_else(|| f.data_dir.clone())
        .ok_or_else(|| CliError::config("no data dir given (--data-dir)"))?;
    let dataset = a.dataset.or_else(|| f.dataset.clone());
    let bind = a.bind.or_else(|| f.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.into());
    let ttl = a.lease_ttl_secs.or(f.lease_ttl_secs).map(Duration::from_secs);
    let token = a.token.or_else(|| f.token.clone()).filter(|t| !t.is_empty());
    let ui_dir = a.ui_dir.or_else(|| f.ui_dir.clone());
    if let Some(d) = &ui_dir {
        if !d.is_dir() {
            return Err(CliError::config(format!("--ui-dir {} is not a directory", d.display())));
        }
    }

    let store = Store::open(
        &data_dir,
        dataset.as_deref(),
        ttl.unwrap_or(navkit_annotate::store::DEFAULT_LEASE_TTL),
    )?;
    let app = router(AppState::new(Arc::new(store)).with_token(token), ui_dir);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(format!("tokio runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| CliError::config(format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        serve(listener, app, shutdown_signal())
            .await
            .map_err(|e| CliError::Io(format!("server: {e}")))
    })
}

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
    eprintln!("shutting down");
}

const EXPORT_ABOUT: &str = "\
Writes the verified episodes of a batch as a dataset (manifest.json +
episodes.jsonl) into --out. Episodes still in progress, and episodes with
unresolved review flags, are left out. Run it against a stopped server, or
use POST /api/export on a running one.";

/// Export annotated episodes as a dataset.
#[derive(Debug, Args)]
#[command(long_about = EXPORT_ABOUT)]
pub struct ExportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Statuses to export: complete, truncated [default: both].
    #[arg(long, value_delimiter = ',', value_parser = serde_value::<Status>)]
    pub status: Vec<Status>,
}

pub fn export(a: ExportArgs) -> Result<(), CliError> {
    let store = Store::open(&a.data_dir, None, navkit_annotate::store::DEFAULT_LEASE_TTL)?;
    let statuses = if a.status.is_empty() {
        vec![Status::Complete, Status::Truncated]
    } else {
        a.status
    };
    let summary = store.export(&statuses, &a.out)?;
    for id in &summary.skipped_flagged {
        eprintln!("warning: episode `{id}` has unresolved review flags; skipped");
    }
    println!(
        "exported {} episodes to {}",
        summary.episodes.len(),
        summary.manifest.display()
    );
    Ok(())
}
