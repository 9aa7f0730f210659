//! Websocket endpoint. Each connection hosts at most one session, whose tick
//! loop runs at the control rate while the episode is running.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use maze_core::config::ExperimentConfig;
use maze_core::dynamics::CONTROL_DT;
use maze_core::records::JsonlAppender;
use tokio::net::TcpListener;
use tokio::time::{interval_at, Instant, MissedTickBehavior};

use crate::protocol::{ClientFrame, ServerFrame};
use crate::session::{AgentSetup, Session};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("server i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] maze_core::Error),
}

/// Shared state of the service.
pub struct App {
    pub config: ExperimentConfig,
    pub agent: Option<AgentSetup>,
    /// Session logs are written here when set.
    pub log_dir: Option<PathBuf>,
    pub max_sessions: usize,
    pub tick_period: Duration,
    active: AtomicUsize,
    next_id: AtomicU64,
}

impl App {
    pub fn new(
        config: ExperimentConfig,
        agent: Option<AgentSetup>,
        log_dir: Option<PathBuf>,
    ) -> Self {
        App {
            max_sessions: config.server.max_sessions,
            config,
            agent,
            log_dir,
            tick_period: Duration::from_secs_f64(CONTROL_DT),
            active: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    /// Reserves a session slot, or `None` at capacity.
    fn acquire(self: &Arc<Self>) -> Option<Slot> {
        self.active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
                (n < self.max_sessions).then_some(n + 1)
            })
            .ok()
            .map(|_| Slot(self.clone()))
    }

    fn open(
        self: &Arc<Self>,
        frame: ClientFrame,
    ) -> Result<(Session, Vec<ServerFrame>, Slot), String> {
        let ClientFrame::Open { mode, seed } = frame else {
            return Err(format!("no session is open; cannot {}", frame.kind()));
        };
        let slot = self
            .acquire()
            .ok_or_else(|| format!("capacity exceeded: {} sessions are open", self.max_sessions))?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let log = match &self.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| format!("session log: {e}"))?;
                let path = dir.join(format!("session-{id:05}.jsonl"));
                Some(JsonlAppender::open(path).map_err(|e| e.to_string())?)
            }
            None => None,
        };
        let (session, frames) =
            Session::open(id, mode, seed, &self.config, self.agent.as_ref(), log)?;
        Ok((session, frames, slot))
    }
}

/// A held session slot, released on drop.
struct Slot(Arc<App>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

pub fn router(app: Arc<App>) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(app)
}

/// Serves the websocket endpoint on `listener` until the task is dropped.
pub async fn serve(listener: TcpListener, app: Arc<App>) -> Result<(), ServerError> {
    axum::serve(listener, router(app)).await?;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, app))
}

async fn send(socket: &mut WebSocket, frames: &[ServerFrame]) -> bool {
    for f in frames {
        let text = match serde_json::to_string(f) {
            Ok(t) => t,
            Err(e) => {
                tracing::error!("unserializable frame: {e}");
                return false;
            }
        };
        if socket.send(Message::Text(text)).await.is_err() {
            return false;
        }
    }
    true
}

async fn connection(mut socket: WebSocket, app: Arc<App>) {
    let mut open: Option<(Session, Slot)> = None;
    let mut ticker = interval_at(Instant::now() + app.tick_period, app.tick_period);
    // a late tick is made up so the average rate holds
    ticker.set_missed_tick_behavior(MissedTickBehavior::Burst);
    loop {
        let running = open.as_ref().is_some_and(|(s, _)| s.is_running());
        tokio::select! {
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let was_running = running;
                let frames = match &mut open {
                    Some((s, _)) => s.handle_text(&text),
                    None => match ClientFrame::parse(&text).and_then(|f| app.open(f)) {
                        Ok((s, frames, slot)) => {
                            open = Some((s, slot));
                            frames
                        }
                        Err(message) => vec![ServerFrame::Error { message }],
                    },
                };
                let now_running = open.as_ref().is_some_and(|(s, _)| s.is_running());
                if now_running && !was_running {
                    ticker.reset();
                }
                if !send(&mut socket, &frames).await {
                    break;
                }
            }
            _ = ticker.tick(), if running => {
                let Some((s, _)) = &mut open else { continue };
                let frames = s.step();
                let closed = s.is_closed();
                if !send(&mut socket, &frames).await || closed {
                    break;
                }
            }
        }
    }
    if let Some((mut s, _slot)) = open {
        s.flush_log();
    }
}
