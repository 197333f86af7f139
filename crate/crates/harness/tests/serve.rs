//! Scripted websocket clients against a live server.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use steerlab::policy::{fit, trajectory, Policy, PolicyParams, Source};
use steerlab::worldsim::{StageLabel, World};
use steerlab_harness::commands::{self, Ctx};
use steerlab_harness::server::{self, App};
use steerlab_harness::session::{EndReason, Event, EventRecord, ServerMsg, StateFrame};
use steerlab_harness::{store, RunConfig};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

const WAIT: Duration = Duration::from_secs(20);

async fn start(world: World, policy: Policy, cfg: &RunConfig) -> (SocketAddr, Arc<App>) {
    let app = App::new(world, policy, cfg);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(server::serve(listener, app.clone()));
    (addr, app)
}

fn small_policy(world: &World) -> Policy {
    let cfg = trajectory::DemoConfig { per_task: 8, ..Default::default() };
    let demos = trajectory::expert_demos(&world.scene, &world.tasks, &cfg, 21);
    fit(&world.scene, &world.tasks, PolicyParams::default(), &[Source::new(&demos, 1.0)]).unwrap()
}

fn serve_cfg(tick_hz: f64, timeout: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.serve.tick_hz = tick_hz;
    cfg.serve.session_timeout_s = timeout;
    cfg.serve.cmi_n_a = 8;
    cfg
}

/// A client that checks every incoming frame against the protocol.
struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    log: Vec<ServerMsg>,
    episode: Option<u64>,
    last_tick: Option<u32>,
    instruction: usize,
}

impl Client {
    async fn connect(addr: SocketAddr, session: Option<&str>) -> Self {
        let url = match session {
            Some(id) => format!("ws://{addr}/session?session={id}"),
            None => format!("ws://{addr}/session"),
        };
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Self { ws, log: Vec::new(), episode: None, last_tick: None, instruction: 0 }
    }

    async fn send(&mut self, v: Value) {
        self.ws.send(Message::Text(v.to_string().into())).await.unwrap();
    }

    async fn send_raw(&mut self, s: &str) {
        self.ws.send(Message::Text(s.to_string().into())).await.unwrap();
    }

    async fn next(&mut self) -> Option<ServerMsg> {
        loop {
            let m = tokio::time::timeout(WAIT, self.ws.next()).await.expect("frame within timeout")?.unwrap();
            let Message::Text(t) = m else { continue };
            let raw: Value = serde_json::from_str(t.as_str()).unwrap();
            let ty = raw["type"].as_str().expect("every frame has a type").to_string();
            assert!(["state", "event", "cmi", "error"].contains(&ty.as_str()), "{raw}");
            let msg: ServerMsg = serde_json::from_value(raw).unwrap();
            self.check(&msg);
            self.log.push(msg.clone());
            return Some(msg);
        }
    }

    /// Frame-level invariants.
    fn check(&mut self, msg: &ServerMsg) {
        match msg {
            ServerMsg::State(s) => {
                let greeting =
                    matches!(self.log.last(), Some(ServerMsg::Event(EventRecord { event: Event::Session { .. }, .. })));
                if greeting {
                    self.instruction = s.instruction_id;
                } else if self.episode == Some(s.episode) {
                    let last = self.last_tick.unwrap();
                    assert_eq!(s.tick, last + 1, "one world step per state frame");
                } else {
                    assert_eq!(s.tick, 0, "a new episode starts at tick 0");
                }
                assert_eq!(
                    s.instruction_id, self.instruction,
                    "instruction changed without a switch event at tick {}",
                    s.tick
                );
                self.episode = Some(s.episode);
                self.last_tick = Some(s.tick);
            }
            ServerMsg::Event(EventRecord { tick, event: Event::Switch { from, to } }) => {
                assert_eq!(*from, self.instruction);
                assert_eq!(*tick, self.last_tick.unwrap() + 1, "switch applies at the next tick boundary");
                self.instruction = *to;
            }
            ServerMsg::Event(EventRecord { event: Event::Reset { .. }, .. }) => {
                self.instruction = 0;
                self.episode = None;
            }
            ServerMsg::Cmi { values, stale, tick } => {
                let now = self.last_tick.unwrap();
                assert!(*tick <= now);
                assert_eq!(*stale, *tick != now);
                assert_eq!(values.len(), 4);
            }
            _ => {}
        }
    }

    async fn until(&mut self, mut pred: impl FnMut(&ServerMsg) -> bool) -> ServerMsg {
        loop {
            let m = self.next().await.expect("connection open");
            if pred(&m) {
                return m;
            }
        }
    }

    async fn state_at(&mut self, tick: u32) -> StateFrame {
        match self.until(|m| matches!(m, ServerMsg::State(s) if s.tick >= tick)).await {
            ServerMsg::State(s) => s,
            _ => unreachable!(),
        }
    }

    async fn close(mut self) {
        self.ws.close(None).await.unwrap();
        while let Ok(Some(_)) = tokio::time::timeout(Duration::from_secs(2), self.ws.next()).await {}
    }
}

fn session_id(m: &ServerMsg) -> String {
    match m {
        ServerMsg::Event(EventRecord { event: Event::Session { session_id, instructions }, .. }) => {
            assert_eq!(instructions.len(), 4);
            session_id.clone()
        }
        other => panic!("expected the session event, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reset_run_switch_and_finish() {
    let world = World::default();
    let policy = small_policy(&world);
    let (addr, _app) = start(world, policy, &serve_cfg(50.0, 5.0)).await;
    let mut c = Client::connect(addr, None).await;
    session_id(&c.next().await.unwrap());
    assert!(matches!(c.next().await.unwrap(), ServerMsg::State(StateFrame { tick: 0, episode: 0, .. })));

    c.send(json!({"type": "reset", "seed": 5})).await;
    c.until(|m| matches!(m, ServerMsg::Event(EventRecord { tick: 0, event: Event::Reset { seed: 5 } }))).await;
    let s = c.next().await.unwrap();
    assert!(matches!(s, ServerMsg::State(StateFrame { tick: 0, episode: 1, .. })), "{s:?}");

    let seen = c.state_at(5).await.tick;
    c.send(json!({"type": "switch", "instruction_id": 2})).await;
    let ack =
        c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::SwitchRequested { .. }, .. }))).await;
    let ServerMsg::Event(EventRecord {
        tick: asked,
        event: Event::SwitchRequested { instruction_id: 2, effective_tick },
    }) = ack
    else {
        panic!("{ack:?}")
    };
    assert!(asked >= seen);
    assert_eq!(effective_tick, asked + 1);
    let sw = c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Switch { .. }, .. }))).await;
    assert!(
        matches!(sw, ServerMsg::Event(EventRecord { tick, event: Event::Switch { from: 0, to: 2 } }) if tick == effective_tick)
    );
    let after = c.state_at(effective_tick).await;
    assert_eq!((after.tick, after.instruction_id), (effective_tick, 2));

    // Malformed frames are answered and change nothing.
    c.send_raw("{\"type\":\"warp\"}").await;
    c.until(|m| matches!(m, ServerMsg::Error { .. })).await;
    c.send_raw("not json").await;
    c.until(|m| matches!(m, ServerMsg::Error { .. })).await;

    // Paused: no state frames, and a fresh estimate of the paused state arrives.
    c.send(json!({"type": "pause"})).await;
    let paused = c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Paused, .. }))).await;
    let ServerMsg::Event(EventRecord { tick: at, .. }) = paused else { unreachable!() };
    let is_fresh = |m: &ServerMsg| matches!(m, ServerMsg::Cmi { stale: false, tick, .. } if *tick == at);
    if !c.log.iter().any(is_fresh) {
        c.until(is_fresh).await;
    }
    let quiet = tokio::time::timeout(Duration::from_millis(300), c.next()).await;
    assert!(quiet.is_err(), "frame while paused: {quiet:?}");

    c.send(json!({"type": "resume"})).await;
    let next = c.state_at(at + 1).await;
    assert_eq!(next.tick, at + 1);

    let end = c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::EpisodeEnd { .. }, .. }))).await;
    let ServerMsg::Event(EventRecord { tick: end_tick, event: Event::EpisodeEnd { reason } }) = end else {
        unreachable!()
    };
    let last =
        c.log.iter().rev().find_map(|m| if let ServerMsg::State(s) = m { Some(s.clone()) } else { None }).unwrap();
    assert_eq!(last.tick, end_tick);
    assert!(last.done);
    if reason == EndReason::Success {
        let ok = c.log.iter().any(|m| {
            matches!(m, ServerMsg::Event(EventRecord { tick, event: Event::Success { instruction_id: 2 } }) if *tick == end_tick)
        });
        assert!(ok, "success event precedes episode_end");
    } else {
        assert_eq!(end_tick, 100);
    }
    c.send(json!({"type": "switch", "instruction_id": 1})).await;
    c.until(|m| matches!(m, ServerMsg::Error { .. })).await;
    c.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rapid_double_switch_keeps_the_last() {
    let world = World::default();
    let policy = small_policy(&world);
    let (addr, _app) = start(world, policy, &serve_cfg(50.0, 5.0)).await;
    let mut c = Client::connect(addr, None).await;
    c.next().await.unwrap();
    c.send(json!({"type": "pause"})).await;
    c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Paused, .. }))).await;
    c.send(json!({"type": "switch", "instruction_id": 1})).await;
    c.send(json!({"type": "switch", "instruction_id": 3})).await;
    let sup = c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Superseded { .. }, .. }))).await;
    assert!(matches!(sup, ServerMsg::Event(EventRecord { event: Event::Superseded { instruction_id: 1 }, .. })));
    c.send(json!({"type": "resume"})).await;
    let sw = c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Switch { .. }, .. }))).await;
    assert!(matches!(sw, ServerMsg::Event(EventRecord { event: Event::Switch { from: 0, to: 3 }, .. })));
    let events: Vec<&Event> =
        c.log.iter().filter_map(|m| if let ServerMsg::Event(e) = m { Some(&e.event) } else { None }).collect();
    let kinds: Vec<String> =
        events.iter().map(|e| serde_json::to_value(e).unwrap()["kind"].as_str().unwrap().to_string()).collect();
    let tail: Vec<&str> = kinds.iter().map(String::as_str).skip_while(|k| *k != "paused").collect();
    assert_eq!(tail, ["paused", "switch_requested", "superseded", "switch_requested", "resumed", "switch"]);
    c.close().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn detached_sessions_resume_then_expire() {
    let world = World::default();
    let policy = small_policy(&world);
    let (addr, app) = start(world, policy, &serve_cfg(50.0, 0.5)).await;
    let mut c = Client::connect(addr, None).await;
    let id = session_id(&c.next().await.unwrap());
    let before = c.state_at(3).await.tick;
    c.close().await;

    let mut again = Client::connect(addr, Some(&id)).await;
    assert_eq!(session_id(&again.next().await.unwrap()), id);
    let ServerMsg::State(s) = again.next().await.unwrap() else { panic!() };
    assert!(s.tick >= before && s.episode == 0);
    again.close().await;

    for _ in 0..50 {
        if app.parked() == 0 && app.active() == 0 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert_eq!((app.parked(), app.active()), (0, 0));
    let mut gone = Client::connect(addr, Some(&id)).await;
    assert!(matches!(gone.next().await, Some(ServerMsg::Error { .. })));
}

/// Operator script: grasp under instruction 0 (object 0 to site 0), switch to
/// instruction 1 (same object, site 1) a few ticks into transport.
async fn transport_switch(addr: SocketAddr, seed: u64) -> bool {
    let mut c = Client::connect(addr, None).await;
    c.next().await.unwrap();
    c.send(json!({"type": "reset", "seed": seed})).await;
    c.until(|m| matches!(m, ServerMsg::Event(EventRecord { event: Event::Reset { .. }, .. }))).await;
    let mut grasped_at = None;
    let mut switched = false;
    let ok = loop {
        let m = c.next().await.expect("open");
        match &m {
            ServerMsg::State(s) if s.episode == 1 => {
                if grasped_at.is_none() && s.held == Some(0) && s.stage == StageLabel::Transport {
                    grasped_at = Some(s.tick);
                }
                if !switched && grasped_at.is_some_and(|g| s.tick >= g + 3) {
                    c.send(json!({"type": "switch", "instruction_id": 1})).await;
                    switched = true;
                }
            }
            ServerMsg::Event(EventRecord { event: Event::EpisodeEnd { .. }, .. }) => {
                break switched
                    && c.log.iter().any(|m| {
                        matches!(m, ServerMsg::Event(EventRecord { event: Event::Success { instruction_id: 1 }, .. }))
                    });
            }
            _ => {}
        }
    };
    c.close().await;
    ok
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn steering_mid_transport_on_a_steergen_policy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.serve.tick_hz = 100.0;
    let ctx = Ctx::new(cfg.clone()).unwrap();
    commands::gen_demos(&ctx).unwrap();
    commands::fit(&ctx).unwrap();
    commands::steergen(&ctx, None).unwrap();
    let loaded = store::load_policy(&ctx.path("steergen/policy.manifest"), &ctx.world).unwrap();
    let (addr, _app) = start(ctx.world.clone(), loaded.policy, &cfg).await;

    let mut wins = 0;
    for seed in 0..10 {
        if transport_switch(addr, seed).await {
            wins += 1;
        }
    }
    println!("transport switch 0 -> 1: {wins}/10 sessions succeeded");
    assert!(wins >= 7, "{wins}/10");
}
