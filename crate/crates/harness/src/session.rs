//! One live steering session: a world, a policy and an operator.
//!
//! The session is a plain state machine. [`Session::handle`] consumes client
//! frames, [`Session::tick`] performs exactly one world step, and CMI runs on
//! an immutable [`CmiJob`] snapshot outside the tick path. The transport in
//! `server` owns one session per connection and only forwards frames.
//!
//! Frames emitted by one tick, in order:
//!
//! 1. `switch` event, if a request was pending (it applies before the step)
//! 2. the `state` frame after the step
//! 3. `grasp`, `release`, `success` and `episode_end` events caused by the step
//! 4. a `cmi` frame carrying the latest estimate, stale unless it was computed
//!    on this tick's state
//!
//! Episode `e` with seed `n` starts from `reset(scene, perturb_std,
//! derive(n, "reset", 0))`; the step at world step `t` draws its action with
//! `derive(n, "act", t)` and its transition noise with `derive(n, "env", t)`,
//! the same streams as an offline switched rollout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use steerlab::geom::Vec2;
use steerlab::infometrics::{self, CmiConfig};
use steerlab::policy::Policy;
use steerlab::seed;
use steerlab::worldsim::{self, StageLabel, World, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Switch { instruction_id: usize },
    Reset { seed: u64 },
    Pause,
    Resume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// First frame of a connection.
    Session {
        session_id: String,
        instructions: Vec<String>,
    },
    /// Acknowledgement of a switch request.
    SwitchRequested {
        instruction_id: usize,
        effective_tick: u32,
    },
    /// A pending request replaced by a later one before it took effect.
    Superseded {
        instruction_id: usize,
    },
    Switch {
        from: usize,
        to: usize,
    },
    Grasp {
        object: usize,
    },
    Release {
        object: usize,
    },
    Success {
        instruction_id: usize,
    },
    EpisodeEnd {
        reason: EndReason,
    },
    Reset {
        seed: u64,
    },
    Paused,
    Resumed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Success,
    Horizon,
}

/// An event stamped with the tick it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u32,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub episode: u64,
    pub tick: u32,
    pub instruction_id: usize,
    /// Stage of the active instruction.
    pub stage: StageLabel,
    pub gripper: Vec2,
    pub grip_closed: bool,
    pub objects: Vec<Vec2>,
    pub held: Option<usize>,
    pub paused: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    State(StateFrame),
    Event(EventRecord),
    Cmi {
        /// `values[k] = Ĥ(A|s) − Ĥ(A|s, ℓ_k)`; their mean is `Î(A;L|s)`.
        values: Vec<f64>,
        stale: bool,
        /// Tick of the snapshot the values were computed on.
        tick: u32,
    },
    Error {
        message: String,
    },
}

/// Immutable input of one CMI estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CmiJob {
    pub episode: u64,
    pub tick: u32,
    pub state: WorldState,
    pub cfg: CmiConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmiResult {
    pub episode: u64,
    pub tick: u32,
    pub values: Vec<f64>,
}

impl CmiJob {
    pub fn run(&self, policy: &Policy) -> CmiResult {
        let e = infometrics::state_cmi(policy, &self.state, &self.cfg).estimate;
        let values = e.conditional.iter().map(|h| e.marginal - h).collect();
        CmiResult { episode: self.episode, tick: self.tick, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pending {
    instruction: usize,
}

pub struct Session {
    id: String,
    world: Arc<World>,
    policy: Arc<Policy>,
    perturb_std: f64,
    cmi_cfg: CmiConfig,
    episode: u64,
    seed: u64,
    state: WorldState,
    instruction: usize,
    tick: u32,
    pending: Option<Pending>,
    paused: bool,
    done: bool,
    events: Vec<EventRecord>,
    cmi: Option<CmiResult>,
}

impl Session {
    /// A session whose first episode uses `seed` with instruction 0 active.
    pub fn new(
        id: String,
        world: Arc<World>,
        policy: Arc<Policy>,
        perturb_std: f64,
        cmi_cfg: CmiConfig,
        seed: u64,
    ) -> Self {
        let state = worldsim::reset(&world.scene, perturb_std, seed::derive(seed, "reset", 0));
        Self {
            id,
            world,
            policy,
            perturb_std,
            cmi_cfg,
            episode: 0,
            seed,
            state,
            instruction: 0,
            tick: 0,
            pending: None,
            paused: false,
            done: false,
            events: Vec::new(),
            cmi: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tick_index(&self) -> u32 {
        self.tick
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn instruction(&self) -> usize {
        self.instruction
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Event log of the current episode.
    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn policy(&self) -> &Arc<Policy> {
        &self.policy
    }

    fn emit(&mut self, event: Event) -> ServerMsg {
        let r = EventRecord { tick: self.tick, event };
        self.events.push(r.clone());
        ServerMsg::Event(r)
    }

    fn error(message: impl Into<String>) -> Vec<ServerMsg> {
        vec![ServerMsg::Error { message: message.into() }]
    }

    /// Greeting sent when a client attaches.
    pub fn hello(&self) -> Vec<ServerMsg> {
        let instructions = self.world.tasks.iter().map(|t| t.instruction.clone()).collect();
        vec![
            ServerMsg::Event(EventRecord {
                tick: self.tick,
                event: Event::Session { session_id: self.id.clone(), instructions },
            }),
            self.state_frame(),
        ]
    }

    pub fn state_frame(&self) -> ServerMsg {
        let s = &self.state;
        ServerMsg::State(StateFrame {
            episode: self.episode,
            tick: self.tick,
            instruction_id: self.instruction,
            stage: self.world.stage(s, self.instruction),
            gripper: s.gripper,
            grip_closed: s.grip_closed,
            objects: s.objects.clone(),
            held: s.held,
            paused: self.paused,
            done: self.done,
        })
    }

    /// Raw text frame; malformed input yields an error frame and leaves the
    /// session untouched.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMsg> {
        match serde_json::from_str::<ClientMsg>(text) {
            Ok(m) => self.handle(m),
            Err(e) => Self::error(format!("malformed message: {e}")),
        }
    }

    pub fn handle(&mut self, msg: ClientMsg) -> Vec<ServerMsg> {
        match msg {
            ClientMsg::Switch { instruction_id } => {
                if instruction_id >= self.world.n_tasks() {
                    return Self::error(format!(
                        "instruction_id {instruction_id} out of range (0..{})",
                        self.world.n_tasks()
                    ));
                }
                if self.done {
                    return Self::error("episode has ended; send reset");
                }
                let mut out = Vec::new();
                if let Some(old) = self.pending.take() {
                    out.push(self.emit(Event::Superseded { instruction_id: old.instruction }));
                }
                self.pending = Some(Pending { instruction: instruction_id });
                out.push(self.emit(Event::SwitchRequested { instruction_id, effective_tick: self.tick + 1 }));
                out
            }
            ClientMsg::Reset { seed } => {
                self.reset(seed);
                let r = self.emit(Event::Reset { seed });
                vec![r, self.state_frame()]
            }
            ClientMsg::Pause => {
                if self.paused {
                    return Vec::new();
                }
                self.paused = true;
                vec![self.emit(Event::Paused)]
            }
            ClientMsg::Resume => {
                if !self.paused {
                    return Vec::new();
                }
                self.paused = false;
                vec![self.emit(Event::Resumed)]
            }
        }
    }

    fn reset(&mut self, seed: u64) {
        self.episode += 1;
        self.seed = seed;
        self.state = worldsim::reset(&self.world.scene, self.perturb_std, seed::derive(seed, "reset", 0));
        self.instruction = 0;
        self.tick = 0;
        self.pending = None;
        self.done = false;
        self.events.clear();
        self.cmi = None;
    }

    /// One world step, or nothing while paused or after the episode ended.
    pub fn tick(&mut self) -> Vec<ServerMsg> {
        if self.paused || self.done {
            return Vec::new();
        }
        let mut out = Vec::new();
        let tick = self.tick + 1;
        if let Some(p) = self.pending.take() {
            let from = self.instruction;
            self.instruction = p.instruction;
            out.push(ServerMsg::Event(self.record(tick, Event::Switch { from, to: p.instruction })));
        }
        let t = u64::from(self.state.step);
        let action = self.policy.act(&self.state, self.instruction, seed::derive(self.seed, "act", t));
        let next = match worldsim::step(&self.state, &action, &self.world.scene, seed::derive(self.seed, "env", t)) {
            Ok(s) => s,
            Err(e) => {
                self.done = true;
                out.extend(Self::error(e.to_string()));
                return out;
            }
        };
        let before = self.state.held;
        self.state = next;
        self.tick = tick;

        let mut after = Vec::new();
        match (before, self.state.held) {
            (None, Some(o)) => after.push(Event::Grasp { object: o }),
            (Some(o), None) => after.push(Event::Release { object: o }),
            (Some(a), Some(b)) if a != b => {
                after.push(Event::Release { object: a });
                after.push(Event::Grasp { object: b });
            }
            _ => {}
        }
        if self.world.is_success(&self.state, self.instruction) {
            after.push(Event::Success { instruction_id: self.instruction });
            after.push(Event::EpisodeEnd { reason: EndReason::Success });
            self.done = true;
        } else if self.state.step >= self.world.horizon() {
            after.push(Event::EpisodeEnd { reason: EndReason::Horizon });
            self.done = true;
        }
        out.push(self.state_frame());
        for e in after {
            out.push(self.emit(e));
        }
        if let Some(c) = self.cmi_frame() {
            out.push(c);
        }
        out
    }

    fn record(&mut self, tick: u32, event: Event) -> EventRecord {
        let r = EventRecord { tick, event };
        self.events.push(r.clone());
        r
    }

    /// Snapshot for an estimate of the current state. The CMI seed depends
    /// on the episode seed and tick only.
    pub fn cmi_job(&self) -> CmiJob {
        let s = seed::derive(seed::derive(self.seed, "cmi", 0), "tick", u64::from(self.tick));
        CmiJob { episode: self.episode, tick: self.tick, state: self.state.clone(), cfg: self.cmi_cfg.with_seed(s) }
    }

    /// Store a finished estimate; results from an earlier episode are dropped.
    pub fn complete_cmi(&mut self, r: CmiResult) -> Option<ServerMsg> {
        if r.episode != self.episode {
            return None;
        }
        if self.cmi.as_ref().is_some_and(|c| c.tick > r.tick) {
            return None;
        }
        self.cmi = Some(r);
        self.cmi_frame()
    }

    pub fn cmi_frame(&self) -> Option<ServerMsg> {
        self.cmi.as_ref().map(|c| ServerMsg::Cmi { values: c.values.clone(), stale: c.tick != self.tick, tick: c.tick })
    }
}
