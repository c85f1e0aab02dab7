//! Running the HTTP service and the per-role background ticker.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::config::SiteRole;
use crate::error::ServiceError;
use crate::http::router;
use crate::link::HttpCenterLink;
use crate::node::Node;

/// A started service. Dropping it without [`Running::shutdown`] leaves the
/// server running until the runtime stops.
#[derive(Debug)]
pub struct Running {
    pub addr: SocketAddr,
    stop: oneshot::Sender<()>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    ticker: Ticker,
}

impl Running {
    pub async fn shutdown(self) -> Result<(), ServiceError> {
        let _ = self.stop.send(());
        let served = self.server.await;
        let ticker = self.ticker;
        let _ = tokio::task::spawn_blocking(move || ticker.stop()).await;
        match served {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(ServiceError::ServiceUnavailable(e.to_string())),
            Err(e) => Err(ServiceError::ServiceUnavailable(e.to_string())),
        }
    }
}

/// Binds the configured address and serves until shut down.
pub async fn start(node: Arc<Node>) -> Result<Running, ServiceError> {
    let listen = node.config().listen;
    let listener = TcpListener::bind(listen)
        .await
        .map_err(|e| ServiceError::PortUnavailable(format!("{listen}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ServiceError::PortUnavailable(e.to_string()))?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(node.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    Ok(Running {
        addr,
        stop,
        server,
        ticker: Ticker::spawn(node),
    })
}

/// Serves until Ctrl-C.
pub fn run(node: Node) -> Result<(), ServiceError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::ServiceUnavailable(e.to_string()))?;
    rt.block_on(async {
        let node = Arc::new(node);
        let running = start(node.clone()).await?;
        eprintln!(
            "medirelay {:?} site listening on {} (log at entry {})",
            node.config().role,
            running.addr,
            node.log_seq()
        );
        let _ = tokio::signal::ctrl_c().await;
        running.shutdown().await
    })
}

/// Background thread: sync ticks on a rural site, tier maintenance on a
/// center. It blocks on network and disk, so it stays off the runtime.
#[derive(Debug)]
struct Ticker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Ticker {
    fn spawn(node: Arc<Node>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let period = Duration::from_secs(node.config().tick_secs);
            let mut link = match node.config().role {
                SiteRole::Rural => {
                    let cfg = node.config();
                    let peer = cfg.peer.clone().unwrap_or_default();
                    let token = cfg.peer_token.clone().unwrap_or_default();
                    match HttpCenterLink::new(&peer, &token, Duration::from_secs(30)) {
                        Ok(l) => Some(l),
                        Err(e) => {
                            eprintln!("sync disabled: {e}");
                            None
                        }
                    }
                }
                SiteRole::Center => None,
            };
            while !flag.load(Ordering::SeqCst) {
                match link.as_mut() {
                    Some(link) => {
                        let schedule = link.schedule().ok();
                        if let Err(e) = node.sync_tick(link, schedule) {
                            eprintln!("sync tick: {e}");
                        }
                    }
                    None => {
                        if let Err(e) = node.maintain() {
                            eprintln!("maintenance: {e}");
                        }
                    }
                }
                sleep_unless_stopped(&flag, period);
            }
        });
        Self {
            stop,
            handle: Some(handle),
        }
    }

    fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn sleep_unless_stopped(flag: &AtomicBool, period: Duration) {
    let step = Duration::from_millis(50);
    let mut slept = Duration::ZERO;
    while slept < period && !flag.load(Ordering::SeqCst) {
        std::thread::sleep(step);
        slept += step;
    }
}
