//! Stage-aware synthesis of steering trajectories.
//!
//! A start state `s` taken from a task-`i` rollout is connected to a
//! stage-matched state `s′` of a task-`j` demonstration by straight-line
//! gripper motion, after which the demonstration's recorded motion is
//! replayed from `s′`. Executions that complete task `j` are kept and
//! labelled with `ℓ_j` from the switch point on.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geom;
use crate::infometrics::{self, weights, CmiConfig, StateCmi};
use crate::par;
use crate::policy::{Actor, Policy, Record, SourceTag, Trajectory};
use crate::seed;
use crate::steerability;
use crate::worldsim::{self, Action, GripCommand, StageLabel, World, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    CmiGuided,
    UniformRandom,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::CmiGuided => "cmi-guided",
            Sampler::UniformRandom => "uniform-random",
        }
    }
}

/// How the segment continues once the gripper reaches `s′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Completion {
    DemoReplay,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Per-step interpolation displacement cap.
    pub cap: f64,
    /// Snippet length of the truncated-segment baseline.
    pub snippet_len: usize,
    /// Executions that must all complete the target task before admission.
    pub verify_rollouts: usize,
    pub sampler: Sampler,
    pub completion: Completion,
    /// Verified segments per ordered task pair.
    pub budget: usize,
    /// Attempts per pair are capped at `budget * retry_factor`.
    pub retry_factor: usize,
    /// Policy rollouts per task forming the start-state buffer.
    pub buffer_rollouts: usize,
    /// Buffer states are taken every `buffer_stride` steps.
    pub buffer_stride: u32,
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            cap: 0.05,
            snippet_len: 3,
            verify_rollouts: 1,
            sampler: Sampler::CmiGuided,
            completion: Completion::DemoReplay,
            budget: 50,
            retry_factor: 10,
            buffer_rollouts: 5,
            buffer_stride: 5,
            perturb_std: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.cap > 0.0, || "interpolation cap must be positive".into())?;
        ensure(self.snippet_len >= 1, || "snippet length must be at least 1".into())?;
        ensure(self.verify_rollouts >= 1, || "verify_rollouts must be at least 1".into())?;
        ensure(self.retry_factor >= 1, || "retry_factor must be at least 1".into())?;
        ensure(self.buffer_rollouts >= 1, || "buffer_rollouts must be at least 1".into())?;
        ensure(self.buffer_stride >= 1, || "buffer_stride must be at least 1".into())?;
        ensure(self.perturb_std >= 0.0, || "perturb_std must be nonnegative".into())?;
        Ok(())
    }
}

/// Stage of `s` relative to task `j` as used for matching, and whether the
/// gripper must open first.
///
/// A closed gripper that does not hold `o(j)` is released and the state then
/// counts as pre-grasp; `done` also matches as pre-grasp.
pub fn effective_stage(world: &World, state: &WorldState, j: usize) -> (StageLabel, bool) {
    let task = &world.tasks[j];
    let release = state.grip_closed && state.held != Some(task.object);
    if release {
        return (StageLabel::PreGrasp, true);
    }
    match world.stage(state, j) {
        StageLabel::Done => (StageLabel::PreGrasp, false),
        s => (s, false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndState {
    /// Index into the demonstration slice.
    pub demo: usize,
    /// Record index within that demonstration.
    pub index: usize,
    pub state: WorldState,
    pub stage: StageLabel,
    pub cost: f64,
    pub release: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infeasible {
    pub stage: StageLabel,
    pub reason: String,
}

/// Cheapest stage-matched target-demo state for steering `s` to task `j`.
///
/// Cost is the gripper distance. Pre-grasp candidates also require `o(j)` to
/// be free in `s` and within `r_grasp / 2` of where the demonstration found
/// it; transport and place candidates require `s` to hold `o(j)`. Ties go to
/// the earliest (demo, record).
pub fn select_end_state(
    world: &World,
    state: &WorldState,
    j: usize,
    demos: &[Trajectory],
) -> std::result::Result<EndState, Infeasible> {
    let (stage, release) = effective_stage(world, state, j);
    let object = world.tasks[j].object;
    let obj_pos = state.object(object);
    let slack = world.scene.r_grasp / 2.0;
    let mut best: Option<EndState> = None;
    let mut any_stage = false;
    for (d, demo) in demos.iter().enumerate() {
        for (idx, r) in demo.records.iter().enumerate() {
            if r.instruction != j || world.stage(&r.state, j) != stage {
                continue;
            }
            any_stage = true;
            let compatible = match stage {
                StageLabel::PreGrasp => !r.state.grip_closed && geom::dist(r.state.object(object), obj_pos) <= slack,
                _ => state.held == Some(object),
            };
            if !compatible {
                continue;
            }
            let cost = geom::dist(state.gripper, r.state.gripper);
            if best.as_ref().is_none_or(|b| cost < b.cost) {
                best = Some(EndState { demo: d, index: idx, state: r.state.clone(), stage, cost, release });
            }
        }
    }
    best.ok_or_else(|| Infeasible {
        stage,
        reason: if any_stage {
            format!("no {} demo state of task {j} is compatible with the object layout", stage.as_str())
        } else {
            format!("task {j} has no {} demo states", stage.as_str())
        },
    })
}

/// `⌈‖Δ‖ / cap⌉` equal hold steps from `from` to `to`, led by an `open` when releasing.
pub fn interpolate(from: geom::Vec2, to: geom::Vec2, cap: f64, release: bool) -> Vec<Action> {
    let delta = geom::sub(to, from);
    let n = (geom::norm(delta) / cap - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    if release {
        out.push(Action::new([0.0, 0.0], GripCommand::Open));
    }
    let d = geom::scale(delta, 1.0 / n.max(1) as f64);
    out.extend((0..n).map(|_| Action::new(d, GripCommand::Hold)));
    out
}

/// One planned step and the action recorded as supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    /// Nominal action; its displacement is used as is when there is no waypoint.
    pub executed: Action,
    pub label: Action,
    /// Gripper position to steer toward, clamped to `a_max` from wherever the gripper is.
    pub waypoint: Option<geom::Vec2>,
}

/// The demonstration's own motion from record `index` on: its recorded
/// gripper positions as waypoints with the recorded commands, labelled by the
/// recorded actions.
pub fn demo_suffix(demo: &Trajectory, index: usize) -> Vec<PlanStep> {
    let recs = &demo.records;
    (index..recs.len())
        .map(|k| {
            let next = recs.get(k + 1).map_or(&demo.final_state, |r| &r.state);
            let moved = geom::sub(next.gripper, recs[k].state.gripper);
            PlanStep {
                executed: Action::new(moved, recs[k].action.command),
                label: recs[k].action,
                waypoint: Some(next.gripper),
            }
        })
        .collect()
}

/// A start state with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartState {
    pub state: WorldState,
    pub task: usize,
    /// Source-rollout records before `state`, kept under `ℓ_i`.
    pub prefix: Vec<Record>,
    /// The source rollout's action at `state`, used as the `ℓ_i` contrast record.
    pub source_action: Option<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub sampler: Option<Sampler>,
    pub cmi: Option<f64>,
    pub candidate: Option<usize>,
    pub stage: StageLabel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSegment {
    pub source_task: usize,
    pub target_task: usize,
    pub start: StartState,
    pub end: EndState,
    pub plan: Vec<PlanStep>,
    /// Count of leading plan steps that are release or interpolation.
    pub n_interp: usize,
    pub completion: Completion,
    /// Prefix under `ℓ_i`, then everything from the switch under `ℓ_j`.
    pub trajectory: Trajectory,
    /// `(s, a_i, ℓ_i)` for the same start state.
    pub contrast: Option<Trajectory>,
    pub verified: bool,
    pub degenerate: bool,
    pub meta: SegmentMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GenFailure {
    Infeasible { stage: StageLabel, reason: String },
    Verification { reason: String },
}

/// Execute `plan` from `start` (plus policy completion if given), seeding step `t` with
/// `derive(seed, "env", t)` and `derive(seed, "act", t)`.
fn execute(
    world: &World,
    start: &StartState,
    j: usize,
    plan: &[PlanStep],
    completion: Option<&Policy>,
    seed: u64,
) -> Trajectory {
    let scene = &world.scene;
    let mut s = start.state.clone();
    let mut records: Vec<Record> = start.prefix.clone();
    for p in plan {
        if s.step >= scene.horizon {
            break;
        }
        let t = u64::from(s.step);
        let a = match p.waypoint {
            Some(w) => Action::new(geom::clamp_norm(geom::sub(w, s.gripper), scene.a_max), p.executed.command),
            None => p.executed,
        };
        let next = worldsim::advance(&s, &a, scene, scene.sigma_env, seed::derive(seed, "env", t));
        records.push(Record { step: s.step, state: s, action: p.label, instruction: j });
        s = next;
    }
    if let Some(policy) = completion {
        while s.step < scene.horizon && !world.is_success(&s, j) {
            let t = u64::from(s.step);
            let a = Actor::act(policy, &s, j, seed::derive(seed, "act", t));
            let next = worldsim::advance(&s, &a, scene, scene.sigma_env, seed::derive(seed, "env", t));
            records.push(Record { step: s.step, state: s, action: a, instruction: j });
            s = next;
        }
    }
    let switch = (start.task != j).then_some(start.state.step);
    Trajectory::assemble(records, s, switch, SourceTag::Steergen, seed, &world.tasks, scene)
}

/// Build, execute and verify one steering segment from `start` to task `j`.
#[allow(clippy::too_many_arguments)]
pub fn generate_steering_trajectory(
    world: &World,
    demos: &[Trajectory],
    start: &StartState,
    j: usize,
    cfg: &GenConfig,
    policy: Option<&Policy>,
    seed: u64,
) -> std::result::Result<SteerSegment, GenFailure> {
    let end = select_end_state(world, &start.state, j, demos)
        .map_err(|e| GenFailure::Infeasible { stage: e.stage, reason: e.reason })?;
    let interp = interpolate(start.state.gripper, end.state.gripper, cfg.cap, end.release);
    let n_interp = interp.len();
    let mut plan: Vec<PlanStep> =
        interp.into_iter().map(|a| PlanStep { executed: a, label: a, waypoint: None }).collect();
    let completion = match cfg.completion {
        Completion::DemoReplay => {
            plan.extend(demo_suffix(&demos[end.demo], end.index));
            None
        }
        Completion::Policy => Some(policy.ok_or_else(|| GenFailure::Verification {
            reason: "policy completion requested without a policy".into(),
        })?),
    };
    let budget = world.horizon().saturating_sub(start.state.step) as usize;
    if n_interp > budget {
        return Err(GenFailure::Verification {
            reason: format!("interpolation needs {n_interp} of {budget} remaining steps"),
        });
    }
    let runs: Vec<Trajectory> = (0..cfg.verify_rollouts)
        .map(|r| execute(world, start, j, &plan, completion, seed::derive(seed, "verify", r as u64)))
        .collect();
    if let Some(r) = runs.iter().position(|t| !t.achieved[j]) {
        return Err(GenFailure::Verification { reason: format!("execution {r} did not complete task {j}") });
    }
    let trajectory = runs.into_iter().next().expect("at least one verification run");
    let contrast = match (start.task != j, start.source_action) {
        (true, Some(a)) => {
            let rec = Record { step: start.state.step, state: start.state.clone(), action: a, instruction: start.task };
            let next = worldsim::advance(&start.state, &a, &world.scene, 0.0, 0);
            Some(Trajectory::assemble(vec![rec], next, None, SourceTag::Steergen, seed, &world.tasks, &world.scene))
        }
        _ => None,
    };
    Ok(SteerSegment {
        source_task: start.task,
        target_task: j,
        start: start.clone(),
        meta: SegmentMeta { sampler: None, cmi: None, candidate: None, stage: end.stage, seed },
        end,
        plan,
        n_interp,
        completion: cfg.completion,
        trajectory,
        contrast,
        verified: true,
        degenerate: start.task == j,
    })
}

/// Re-execute an admitted segment from its stored seed.
pub fn replay_segment(world: &World, seg: &SteerSegment, policy: Option<&Policy>) -> Trajectory {
    let completion = match seg.completion {
        Completion::DemoReplay => None,
        Completion::Policy => policy,
    };
    execute(world, &seg.start, seg.target_task, &seg.plan, completion, seg.trajectory.seed)
}

/// Candidate start state in the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub task: usize,
    pub rollout: usize,
    /// Record index within the rollout.
    pub index: usize,
}

/// Start-state buffer drawn from policy rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub rollouts: Vec<Trajectory>,
    pub candidates: Vec<Candidate>,
    /// Per-candidate CMI, filled by [`score_buffer`].
    pub cmi: Option<Vec<StateCmi>>,
}

impl Buffer {
    pub fn state(&self, c: usize) -> &WorldState {
        let cand = self.candidates[c];
        &self.rollouts[cand.rollout].records[cand.index].state
    }

    pub fn start(&self, c: usize) -> StartState {
        let cand = self.candidates[c];
        let rollout = &self.rollouts[cand.rollout];
        StartState {
            state: rollout.records[cand.index].state.clone(),
            task: cand.task,
            prefix: rollout.records[..cand.index].to_vec(),
            source_action: Some(rollout.records[cand.index].action),
        }
    }
}

/// Plain rollouts of `actor` per task, states every `buffer_stride` steps.
pub fn build_buffer(actor: &dyn Actor, world: &World, cfg: &GenConfig) -> Buffer {
    let jobs: Vec<(usize, usize)> =
        (0..world.n_tasks()).flat_map(|k| (0..cfg.buffer_rollouts).map(move |r| (k, r))).collect();
    let rollouts = par::map(jobs.len(), |idx| {
        let (k, r) = jobs[idx];
        let s = seed::derive_path(cfg.seed, "buffer", &[k as u64, r as u64]);
        let start = worldsim::reset(&world.scene, cfg.perturb_std, seed::derive(s, "reset", 0));
        steerability::rollout(actor, world, k, &start, world.horizon(), s)
    });
    let mut candidates = Vec::new();
    for (ri, (&(k, _), traj)) in jobs.iter().zip(&rollouts).enumerate() {
        for (index, rec) in traj.records.iter().enumerate() {
            if rec.step % cfg.buffer_stride == 0 {
                candidates.push(Candidate { task: k, rollout: ri, index });
            }
        }
    }
    Buffer { rollouts, candidates, cmi: None }
}

pub fn score_buffer(policy: &Policy, buffer: &mut Buffer, cmi_cfg: &CmiConfig) {
    let states: Vec<&WorldState> = (0..buffer.candidates.len()).map(|c| buffer.state(c)).collect();
    buffer.cmi = Some(infometrics::cmi_sweep(policy, &states, cmi_cfg));
}

/// Fixed per-pair sampling distribution over the feasible candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampler {
    pub i: usize,
    pub j: usize,
    pub candidates: Vec<usize>,
    pub cmi: Vec<Option<f64>>,
    pub q: Vec<f64>,
}

impl PairSampler {
    pub fn draw(&self, u: f64) -> usize {
        let w = weights::SamplingWeights { raw: self.q.clone(), q: self.q.clone(), uniform_fallback: false };
        self.candidates[w.pick(u)]
    }
}

/// Sampler for pair `(i, j)` over the task-`i` candidates with a finite-cost end state.
pub fn pair_sampler(
    world: &World,
    demos: &[Trajectory],
    buffer: &Buffer,
    (i, j): (usize, usize),
    sampler: Sampler,
    cmi_cfg: &CmiConfig,
) -> Result<Option<PairSampler>> {
    let candidates: Vec<usize> = (0..buffer.candidates.len())
        .filter(|&c| buffer.candidates[c].task == i && select_end_state(world, buffer.state(c), j, demos).is_ok())
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let cmi: Vec<Option<f64>> = candidates
        .iter()
        .map(|&c| {
            buffer.cmi.as_ref().and_then(|all| {
                let sc = &all[c];
                match cmi_cfg.weight_input {
                    infometrics::WeightInput::Raw => Some(sc.pair(i, j)),
                    infometrics::WeightInput::Normalized => sc.estimate.normalized,
                }
            })
        })
        .collect();
    let q = match sampler {
        Sampler::UniformRandom => vec![1.0 / candidates.len() as f64; candidates.len()],
        Sampler::CmiGuided => {
            ensure(buffer.cmi.is_some(), || "cmi-guided sampling needs a scored buffer".into())?;
            weights::sampling_weights(&cmi, cmi_cfg.t_g)?.q
        }
    };
    Ok(Some(PairSampler { i, j, candidates, cmi, q }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub i: usize,
    pub j: usize,
    pub admitted: usize,
    pub attempts: usize,
    pub infeasible: usize,
    pub failed: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerGenDataset {
    pub sampler: Sampler,
    pub budget: usize,
    pub segments: Vec<SteerSegment>,
    pub counts: Vec<PairCount>,
    /// Some pair stopped at the retry cap short of its budget.
    pub partial: bool,
}

impl SteerGenDataset {
    /// Fitting input: every segment trajectory plus its contrast record.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.segments.iter().flat_map(|s| std::iter::once(s.trajectory.clone()).chain(s.contrast.clone())).collect()
    }

    pub fn empty(sampler: Sampler) -> Self {
        Self { sampler, budget: 0, segments: Vec::new(), counts: Vec::new(), partial: false }
    }
}

/// Generate up to `cfg.budget` verified segments for every ordered task pair.
pub fn generate_dataset(
    world: &World,
    demos: &[Trajectory],
    buffer: &Buffer,
    policy: Option<&Policy>,
    cfg: &GenConfig,
    cmi_cfg: &CmiConfig,
) -> Result<SteerGenDataset> {
    cfg.validate()?;
    let n = world.n_tasks();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let mut samplers = Vec::with_capacity(pairs.len());
    for &p in &pairs {
        samplers.push(pair_sampler(world, demos, buffer, p, cfg.sampler, cmi_cfg)?);
    }
    let results = par::map(pairs.len(), |k| {
        let (i, j) = pairs[k];
        let mut count = PairCount { i, j, ..PairCount::default() };
        let mut segments = Vec::new();
        let Some(ps) = &samplers[k] else {
            return (segments, count, cfg.budget > 0);
        };
        count.candidates = ps.candidates.len();
        let cap = cfg.budget * cfg.retry_factor;
        let mut rng = seed::rng(seed::derive_path(cfg.seed, "draw", &[i as u64, j as u64]));
        while segments.len() < cfg.budget && count.attempts < cap {
            let attempt = count.attempts as u64;
            count.attempts += 1;
            let c = ps.draw(rng.random());
            let s = seed::derive_path(cfg.seed, "segment", &[i as u64, j as u64, attempt]);
            match generate_steering_trajectory(world, demos, &buffer.start(c), j, cfg, policy, s) {
                Ok(mut seg) => {
                    let pos = ps.candidates.iter().position(|&x| x == c).expect("drawn from candidates");
                    seg.meta.sampler = Some(cfg.sampler);
                    seg.meta.cmi = ps.cmi[pos];
                    seg.meta.candidate = Some(c);
                    segments.push(seg);
                }
                Err(GenFailure::Infeasible { .. }) => count.infeasible += 1,
                Err(GenFailure::Verification { .. }) => count.failed += 1,
            }
        }
        count.admitted = segments.len();
        let short = segments.len() < cfg.budget;
        (segments, count, short)
    });
    let mut out = SteerGenDataset {
        sampler: cfg.sampler,
        budget: cfg.budget,
        segments: Vec::new(),
        counts: Vec::new(),
        partial: false,
    };
    for (segs, count, short) in results {
        if short {
            log::warn!("pair {}->{} reached {} of {} segments", count.i, count.j, count.admitted, cfg.budget);
            out.partial = true;
        }
        out.segments.extend(segs);
        out.counts.push(count);
    }
    Ok(out)
}

/// Truncated-segment baseline: the first `min(m, n_interp)` post-switch
/// records of every segment, never any demonstration suffix.
pub fn cast_snippets(dataset: &SteerGenDataset, m: usize) -> Result<Vec<Trajectory>> {
    ensure(m >= 1, || "snippet length must be at least 1".into())?;
    Ok(dataset
        .segments
        .iter()
        .filter_map(|seg| {
            let post = seg.trajectory.training_records();
            let take = m.min(seg.n_interp).min(post.len());
            if take == 0 {
                return None;
            }
            let records = post[..take].to_vec();
            let final_state = post.get(take).map_or(seg.trajectory.final_state.clone(), |r| r.state.clone());
            Some(Trajectory {
                success: seg.trajectory.success.clone(),
                achieved: vec![false; seg.trajectory.success.len()],
                records,
                final_state,
                switch_step: None,
                source: SourceTag::Steergen,
                seed: seg.trajectory.seed,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{trajectory, DemoConfig};

    fn setup() -> (World, Vec<Trajectory>) {
        let world = World::default();
        let demos = trajectory::expert_demos(&world.scene, &world.tasks, &DemoConfig::default(), 8);
        (world, demos)
    }

    fn start(state: WorldState, task: usize) -> StartState {
        StartState { state, task, prefix: Vec::new(), source_action: None }
    }

    #[test]
    fn interpolation_arithmetic() {
        assert!(interpolate([0.2, 0.2], [0.2, 0.2], 0.05, false).is_empty());
        let a = interpolate([0.1, 0.5], [0.22, 0.5], 0.05, false);
        assert_eq!(a.len(), 3);
        for x in &a {
            assert!((x.displacement[0] - 0.04).abs() < 1e-12 && x.displacement[1].abs() < 1e-15);
            assert_eq!(x.command, GripCommand::Hold);
        }
        // Exact multiples of the cap do not gain a step from rounding.
        assert_eq!(interpolate([0.0, 0.0], [0.15, 0.0], 0.05, false).len(), 3);
        let r = interpolate([0.0, 0.0], [0.0, 0.0], 0.05, true);
        assert_eq!(r, vec![Action::new([0.0, 0.0], GripCommand::Open)]);
    }

    #[test]
    fn noiseless_interpolation_lands_on_target() {
        let world = World::new(worldsim::SceneConfig { sigma_env: 0.0, ..Default::default() }).unwrap();
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        let target = [0.83, 0.12];
        for a in interpolate(s.gripper, target, 0.05, false) {
            assert!(geom::norm(a.displacement) <= 0.05 + 1e-12);
            s = worldsim::step(&s, &a, &world.scene, 0).unwrap();
        }
        assert!(geom::dist(s.gripper, target) < 1e-9);
    }

    #[test]
    fn demo_state_selects_itself() {
        let (world, demos) = setup();
        let d = &demos[25];
        let j = d.records[0].instruction;
        let idx = d.records.iter().position(|r| world.stage(&r.state, j) == StageLabel::Transport).unwrap();
        let e = select_end_state(&world, &d.records[idx].state, j, &demos).unwrap();
        assert_eq!(e.cost, 0.0);
        assert_eq!(e.state.gripper, d.records[idx].state.gripper);
    }

    #[test]
    fn nearer_candidate_wins() {
        let (world, _) = setup();
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        s.gripper = [0.5, 0.1];
        let demo_at = |g: [f64; 2]| {
            let mut st = worldsim::reset(&world.scene, 0.0, 0);
            st.gripper = g;
            let rec = Record { step: 0, state: st.clone(), action: Action::NOOP, instruction: 0 };
            Trajectory::assemble(vec![rec], st, None, SourceTag::Demo, 0, &world.tasks, &world.scene)
        };
        let demos = vec![demo_at([0.5, 0.4]), demo_at([0.5, 0.2])];
        let e = select_end_state(&world, &s, 0, &demos).unwrap();
        assert_eq!(e.demo, 1);
        assert!((e.cost - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stage_compatibility_table() {
        let (world, demos) = setup();
        // Hold object 0 mid-transport toward site 0.
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        s.gripper = [0.3, 0.55];
        s.objects[0] = s.gripper;
        s.grip_closed = true;
        s.held = Some(0);
        let table: Vec<(StageLabel, bool, bool)> = (0..4)
            .map(|j| {
                let (stage, release) = effective_stage(&world, &s, j);
                (stage, release, select_end_state(&world, &s, j, &demos).is_ok())
            })
            .collect();
        assert_eq!(
            table,
            vec![
                (StageLabel::Transport, false, true),
                (StageLabel::Transport, false, true),
                (StageLabel::PreGrasp, true, true),
                (StageLabel::PreGrasp, true, true),
            ]
        );
        // Object 0 delivered to site 0: the other object is still reachable,
        // but object 0 no longer sits where any task-1 demo found it.
        let mut done = worldsim::reset(&world.scene, 0.0, 0);
        done.objects[0] = world.scene.sites[0];
        assert_eq!(effective_stage(&world, &done, 0), (StageLabel::PreGrasp, false));
        assert!(select_end_state(&world, &done, 1, &demos).is_err());
        assert!(select_end_state(&world, &done, 2, &demos).is_ok());
    }

    #[test]
    fn replay_from_reset_always_verifies_without_noise() {
        let world = World::new(worldsim::SceneConfig { sigma_env: 0.0, ..Default::default() }).unwrap();
        let demos = trajectory::expert_demos(&world.scene, &world.tasks, &DemoConfig::default(), 8);
        let cfg = GenConfig::default();
        for k in 0..20u64 {
            let s0 = worldsim::reset(&world.scene, 0.02, k);
            for j in 0..4 {
                let seg =
                    generate_steering_trajectory(&world, &demos, &start(s0.clone(), (j + 1) % 4), j, &cfg, None, k)
                        .unwrap_or_else(|e| panic!("seed {k} task {j}: {e:?}"));
                assert!(seg.verified && seg.trajectory.achieved[j]);
            }
        }
    }

    #[test]
    fn release_remap_and_relabelling() {
        let (world, demos) = setup();
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        s.gripper = [0.3, 0.5];
        s.objects[0] = s.gripper;
        s.grip_closed = true;
        s.held = Some(0);
        s.step = 12;
        let prefix: Vec<Record> = (0..12)
            .map(|t| Record {
                step: t,
                state: worldsim::reset(&world.scene, 0.0, 0),
                action: Action::NOOP,
                instruction: 0,
            })
            .collect();
        let st =
            StartState { state: s, task: 0, prefix, source_action: Some(Action::new([0.0, -0.05], GripCommand::Hold)) };
        let seg = generate_steering_trajectory(&world, &demos, &st, 3, &GenConfig::default(), None, 4).unwrap();
        assert!(seg.end.release);
        assert_eq!(seg.plan[0].executed.command, GripCommand::Open);
        let t = &seg.trajectory;
        assert_eq!(t.switch_step, Some(12));
        t.validate(&world.tasks, &world.scene).unwrap();
        assert!(t.training_records().iter().all(|r| r.instruction == 3));
        assert_eq!(t.training_records()[0].state, st.state);
        let c = seg.contrast.as_ref().unwrap();
        assert_eq!((c.records.len(), c.records[0].instruction), (1, 0));
        assert_eq!(c.records[0].state, st.state);
        assert_eq!(replay_segment(&world, &seg, None), seg.trajectory);
    }

    #[test]
    fn same_task_segment_is_degenerate() {
        let (world, demos) = setup();
        let s = worldsim::reset(&world.scene, 0.0, 1);
        let seg =
            generate_steering_trajectory(&world, &demos, &start(s, 2), 2, &GenConfig::default(), None, 0).unwrap();
        assert!(seg.degenerate);
        assert!(seg.contrast.is_none());
        assert_eq!(seg.trajectory.switch_step, None);
    }

    #[test]
    fn snippets_never_reach_the_suffix() {
        let (world, demos) = setup();
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        s.gripper = [0.9, 0.1];
        let seg =
            generate_steering_trajectory(&world, &demos, &start(s, 0), 2, &GenConfig::default(), None, 0).unwrap();
        let ds = SteerGenDataset { segments: vec![seg.clone()], ..SteerGenDataset::empty(Sampler::UniformRandom) };
        assert_eq!(cast_snippets(&ds, 1).unwrap()[0].records.len(), 1);
        let all = cast_snippets(&ds, 1000).unwrap();
        assert_eq!(all[0].records.len(), seg.n_interp);
        assert!(seg.n_interp < seg.trajectory.training_records().len());
        assert!(cast_snippets(&ds, 0).is_err());
    }
}
