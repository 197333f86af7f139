//! Websocket transport for [`Session`].
//!
//! `GET /session` upgrades to a websocket carrying one JSON frame per text
//! message. `GET /session?session=<id>` reattaches to a session whose client
//! disconnected less than `session_timeout_s` ago. `GET /health` reports the
//! session counts.
//!
//! The connection task is the only owner of its session while attached: it
//! alone calls `tick` and `handle`. CMI estimates run on blocking worker
//! threads over snapshots, at most one per session at a time.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use steerlab::infometrics::CmiConfig;
use steerlab::policy::Policy;
use steerlab::seed;
use steerlab::worldsim::World;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::config::{RunConfig, ServeConfig};
use crate::session::{CmiResult, ServerMsg, Session};

pub struct App {
    world: Arc<World>,
    policy: Arc<Policy>,
    cfg: ServeConfig,
    cmi: CmiConfig,
    perturb_std: f64,
    seed: u64,
    next: AtomicUsize,
    active: AtomicUsize,
    parked: Mutex<HashMap<String, (Session, Instant)>>,
}

impl App {
    pub fn new(world: World, policy: Policy, cfg: &RunConfig) -> Arc<Self> {
        Arc::new(Self {
            world: Arc::new(world),
            policy: Arc::new(policy),
            cfg: cfg.serve.clone(),
            cmi: CmiConfig { n_a: cfg.serve.cmi_n_a, ..cfg.cmi },
            perturb_std: cfg.eval.perturb_std,
            seed: cfg.seeds().serve,
            next: AtomicUsize::new(0),
            active: AtomicUsize::new(0),
            parked: Mutex::new(HashMap::new()),
        })
    }

    /// Session `s<n>`; its first episode is seeded with `derive(serve, "session", n)`.
    fn create(&self) -> Session {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        let s = seed::derive(self.seed, "session", n as u64);
        Session::new(format!("s{n}"), self.world.clone(), self.policy.clone(), self.perturb_std, self.cmi, s)
    }

    fn take(&self, id: &str) -> Option<Session> {
        self.parked.lock().expect("registry lock").remove(id).map(|(s, _)| s)
    }

    fn park(&self, s: Session) {
        if self.cfg.session_timeout_s > 0.0 {
            self.parked.lock().expect("registry lock").insert(s.id().to_string(), (s, Instant::now()));
        }
    }

    /// Drop parked sessions older than the timeout; returns how many.
    pub fn collect_garbage(&self) -> usize {
        let limit = Duration::from_secs_f64(self.cfg.session_timeout_s);
        let mut parked = self.parked.lock().expect("registry lock");
        let before = parked.len();
        parked.retain(|_, (_, since)| since.elapsed() <= limit);
        before - parked.len()
    }

    pub fn parked(&self) -> usize {
        self.parked.lock().expect("registry lock").len()
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Deserialize)]
struct Attach {
    session: Option<String>,
}

pub fn router(app: Arc<App>) -> Router {
    Router::new().route("/session", get(upgrade)).route("/health", get(health)).with_state(app)
}

async fn health(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(json!({ "active": app.active(), "parked": app.parked() }))
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>, Query(q): Query<Attach>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, app, q.session))
}

async fn send(socket: &mut WebSocket, msgs: Vec<ServerMsg>) -> bool {
    for m in msgs {
        let text = serde_json::to_string(&m).expect("server frames serialize");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn connection(mut socket: WebSocket, app: Arc<App>, resume: Option<String>) {
    let mut session = match resume {
        None => app.create(),
        Some(id) => match app.take(&id) {
            Some(s) => s,
            None => {
                let _ = send(&mut socket, vec![ServerMsg::Error { message: format!("unknown session {id:?}") }]).await;
                return;
            }
        },
    };
    app.active.fetch_add(1, Ordering::Relaxed);
    log::info!("session {} attached", session.id());

    let period = Duration::from_secs_f64(1.0 / app.cfg.tick_hz);
    let mut clock = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let (tx, mut rx) = mpsc::channel::<CmiResult>(1);
    let mut in_flight = false;
    let mut requested: Option<(u64, u32)> = None;

    let mut open = send(&mut socket, session.hello()).await;
    while open {
        let key = (session.episode(), session.tick_index());
        if !in_flight && requested != Some(key) {
            let job = session.cmi_job();
            let policy = session.policy().clone();
            let tx = tx.clone();
            in_flight = true;
            requested = Some(key);
            tokio::task::spawn_blocking(move || {
                let _ = tx.blocking_send(job.run(&policy));
            });
        }
        let out = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => session.handle_text(t.as_str()),
                Some(Ok(Message::Binary(_))) => vec![ServerMsg::Error { message: "binary frames are not supported".into() }],
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => Vec::new(),
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
            },
            _ = clock.tick() => session.tick(),
            Some(r) = rx.recv() => {
                in_flight = false;
                session.complete_cmi(r).into_iter().collect()
            }
        };
        open = send(&mut socket, out).await;
    }
    log::info!("session {} detached at tick {}", session.id(), session.tick_index());
    app.active.fetch_sub(1, Ordering::Relaxed);
    app.park(session);
}

/// Serve until the task is cancelled, collecting parked sessions once a second.
pub async fn serve(listener: TcpListener, app: Arc<App>) -> std::io::Result<()> {
    let gc = app.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(Duration::from_secs(1));
        loop {
            every.tick().await;
            let n = gc.collect_garbage();
            if n > 0 {
                log::info!("dropped {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(app)).await
}

/// Bind `addr` and serve on a fresh runtime; blocks.
pub fn run(app: Arc<App>, addr: &str, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        serve(listener, app).await
    })
}
