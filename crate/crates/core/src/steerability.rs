//! Rollouts, success-probability estimates, steerable sets, SCR and the
//! exhaustive switch-evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::par;
use crate::policy::{Actor, Record, SourceTag, Trajectory};
use crate::seed;
use crate::worldsim::{self, World, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub start: u32,
    pub end: u32,
    pub stride: u32,
}

impl Default for Grid {
    fn default() -> Self {
        Self { start: 0, end: 100, stride: 5 }
    }
}

impl Grid {
    /// Inclusive of `end` when it falls on the stride.
    pub fn steps(&self) -> Vec<u32> {
        (self.start..=self.end).step_by(self.stride.max(1) as usize).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub rollouts_per_task: usize,
    /// States are taken every `stride` steps, excluding the terminal state.
    pub stride: u32,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { rollouts_per_task: 5, stride: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Success threshold for visitation membership.
    pub alpha: f64,
    /// Failure tolerance of the competence assumption; reported, not enforced.
    pub delta: f64,
    pub n_est: usize,
    pub n_repeat: usize,
    pub grid: Grid,
    pub probe: ProbeSpec,
    /// Object-start perturbation used for every evaluation reset.
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            delta: 0.1,
            n_est: 10,
            n_repeat: 10,
            grid: Grid::default(),
            probe: ProbeSpec::default(),
            perturb_std: 0.02,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, horizon: u32) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.alpha), || format!("alpha must lie in [0, 1], got {}", self.alpha))?;
        ensure((0.0..1.0).contains(&self.delta), || format!("delta must lie in [0, 1), got {}", self.delta))?;
        ensure(self.n_est >= 1, || "n_est must be at least 1".into())?;
        ensure(self.n_repeat >= 1, || "n_repeat must be at least 1".into())?;
        let g = self.grid;
        ensure(g.stride >= 1, || "grid stride must be at least 1".into())?;
        ensure(g.start <= g.end && g.end <= horizon, || {
            format!("grid [{}, {}] must lie within [0, {horizon}]", g.start, g.end)
        })?;
        ensure(self.probe.stride >= 1, || "probe stride must be at least 1".into())?;
        ensure(self.perturb_std >= 0.0, || "perturb_std must be nonnegative".into())?;
        Ok(())
    }
}

/// Closed-loop execution of `actor` under one instruction.
///
/// Step seeds depend on the absolute step index, so a run resumed from an
/// intermediate state follows the same noise stream as the full run.
pub fn rollout(
    actor: &dyn Actor,
    world: &World,
    task: usize,
    start: &WorldState,
    horizon: u32,
    seed: u64,
) -> Trajectory {
    run(actor, world, start, &[(task, horizon)], None, seed, false)
}

/// As [`rollout`], stopping at the first successful state.
pub fn rollout_until_success(
    actor: &dyn Actor,
    world: &World,
    task: usize,
    start: &WorldState,
    horizon: u32,
    seed: u64,
) -> Trajectory {
    run(actor, world, start, &[(task, horizon)], None, seed, true)
}

fn run(
    actor: &dyn Actor,
    world: &World,
    start: &WorldState,
    phases: &[(usize, u32)],
    switch_step: Option<u32>,
    seed: u64,
    stop_on_success: bool,
) -> Trajectory {
    let scene = &world.scene;
    let mut s = start.clone();
    let mut records = Vec::new();
    let last = phases.len() - 1;
    for (p, &(task, len)) in phases.iter().enumerate() {
        let stop = stop_on_success && p == last;
        for _ in 0..len {
            if s.step >= scene.horizon || (stop && world.is_success(&s, task)) {
                break;
            }
            let t = u64::from(s.step);
            let a = actor.act(&s, task, seed::derive(seed, "act", t));
            let next = worldsim::advance(&s, &a, scene, scene.sigma_env, seed::derive(seed, "env", t));
            records.push(Record { step: s.step, state: s, action: a, instruction: task });
            s = next;
        }
    }
    Trajectory::assemble(records, s, switch_step, SourceTag::Rollout, seed, &world.tasks, scene)
}

/// Run under task `i` for `t_switch` steps, then under `j` for the rest of the horizon.
pub fn rollout_with_switch(
    actor: &dyn Actor,
    world: &World,
    i: usize,
    j: usize,
    t_switch: u32,
    perturb_std: f64,
    seed: u64,
) -> Trajectory {
    let start = worldsim::reset(&world.scene, perturb_std, seed::derive(seed, "reset", 0));
    switch_from(actor, world, &start, i, j, t_switch, seed, false)
}

/// Switched run from an explicit start state.
#[allow(clippy::too_many_arguments)]
pub fn switch_from(
    actor: &dyn Actor,
    world: &World,
    start: &WorldState,
    i: usize,
    j: usize,
    t_switch: u32,
    seed: u64,
    stop_on_success: bool,
) -> Trajectory {
    let pre = t_switch.saturating_sub(start.step);
    let post = world.horizon().saturating_sub(start.step.max(t_switch));
    let switch = (i != j && t_switch > start.step).then_some(t_switch);
    run(actor, world, start, &[(i, pre), (j, post)], switch, seed, stop_on_success)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub p: f64,
    /// Binomial standard error.
    pub std: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_counts(successes: usize, n: usize) -> Self {
        let p = successes as f64 / n as f64;
        Self { p, std: (p * (1.0 - p) / n as f64).sqrt(), n }
    }
}

pub fn estimate_success_prob(
    actor: &dyn Actor,
    world: &World,
    task: usize,
    state: &WorldState,
    n_est: usize,
    seed: u64,
) -> Estimate {
    let horizon = world.horizon().saturating_sub(state.step);
    let ok = (0..n_est)
        .filter(|&r| {
            let t = rollout_until_success(actor, world, task, state, horizon, seed::derive(seed, "est", r as u64));
            t.achieved[task]
        })
        .count();
    Estimate::from_counts(ok, n_est)
}

/// Fraction of plain rollouts from reset that complete their task, per task.
pub fn single_task_success(actor: &dyn Actor, world: &World, n: usize, perturb_std: f64, seed: u64) -> Vec<f64> {
    (0..world.n_tasks())
        .map(|k| {
            let ok = par::map(n, |r| {
                let s = seed::derive_path(seed, "single", &[k as u64, r as u64]);
                let start = worldsim::reset(&world.scene, perturb_std, seed::derive(s, "reset", 0));
                rollout_until_success(actor, world, k, &start, world.horizon(), s).achieved[k]
            });
            ok.iter().filter(|&&b| b).count() as f64 / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeState {
    pub state: WorldState,
    pub task: usize,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub probes: Vec<ProbeState>,
    pub weights: Vec<f64>,
}

impl ProbeSet {
    pub fn new(probes: Vec<ProbeState>) -> Self {
        let n = probes.len();
        Self { probes, weights: vec![1.0 / n.max(1) as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// States sampled every `stride` steps along fresh rollouts of each task.
pub fn build_probe_set(actor: &dyn Actor, world: &World, cfg: &EvalConfig) -> ProbeSet {
    let spec = cfg.probe;
    let jobs: Vec<(usize, usize)> =
        (0..world.n_tasks()).flat_map(|k| (0..spec.rollouts_per_task).map(move |r| (k, r))).collect();
    let runs = par::map(jobs.len(), |idx| {
        let (k, r) = jobs[idx];
        let s = seed::derive_path(cfg.seed, "probe", &[k as u64, r as u64]);
        let start = worldsim::reset(&world.scene, cfg.perturb_std, seed::derive(s, "reset", 0));
        rollout(actor, world, k, &start, world.horizon(), s)
    });
    let mut probes = Vec::new();
    for ((k, _), traj) in jobs.iter().zip(runs) {
        for rec in traj.records.into_iter().filter(|r| r.step % spec.stride == 0) {
            probes.push(ProbeState { step: rec.step, state: rec.state, task: *k });
        }
    }
    ProbeSet::new(probes)
}

/// Membership bitmaps over a probe set, one MC estimate per (state, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSets {
    pub n_tasks: usize,
    pub alpha: f64,
    /// Source task of each probe.
    pub probe_task: Vec<usize>,
    /// `estimates[k][p]`.
    pub estimates: Vec<Vec<Estimate>>,
    /// `member[k][p]`: probe `p` lies in the visitation set of task `k`.
    pub member: Vec<Vec<bool>>,
}

pub type Bitmap = Vec<bool>;

impl SteerSets {
    pub fn n_probes(&self) -> usize {
        self.probe_task.len()
    }

    pub fn visitation(&self, k: usize) -> Bitmap {
        self.member[k].clone()
    }

    fn pooled(&self, i: usize, j: usize) -> impl Iterator<Item = bool> + '_ {
        self.probe_task.iter().map(move |&t| t == i || t == j)
    }

    /// Union of the two visitation sets over the pooled probes of `i` and `j`.
    pub fn union(&self, i: usize, j: usize) -> Bitmap {
        self.pooled(i, j).enumerate().map(|(p, pool)| pool && (self.member[i][p] || self.member[j][p])).collect()
    }

    pub fn intersection(&self, i: usize, j: usize) -> Bitmap {
        self.pooled(i, j).enumerate().map(|(p, pool)| pool && self.member[i][p] && self.member[j][p]).collect()
    }

    /// Task-`i` probe states from which switching to `j` succeeds.
    pub fn directional(&self, i: usize, j: usize) -> Bitmap {
        self.probe_task.iter().enumerate().map(|(p, &t)| t == i && self.member[j][p]).collect()
    }

    /// Pooled probe states where both switching directions succeed.
    pub fn bidirectional(&self, i: usize, j: usize) -> Bitmap {
        self.intersection(i, j)
    }

    /// Inclusion violations; empty when the set algebra is sound.
    pub fn inclusion_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let sub = |a: &Bitmap, b: &Bitmap| a.iter().zip(b).all(|(&x, &y)| !x || y);
        for i in 0..self.n_tasks {
            for j in (0..self.n_tasks).filter(|&j| j != i) {
                let dir = self.directional(i, j);
                if !sub(&dir, &self.member[j]) {
                    out.push(format!("steer {i}->{j} not within visitation set of {j}"));
                }
                if !sub(&self.bidirectional(i, j), &self.intersection(i, j)) {
                    out.push(format!("steer {i}<->{j} not within the joint visitation set"));
                }
                let either: Bitmap = (0..self.n_probes()).map(|p| self.member[i][p] || self.member[j][p]).collect();
                if !sub(&dir, &either) {
                    out.push(format!("steer {i}->{j} outside the union"));
                }
            }
        }
        out
    }
}

pub fn compute_steer_sets(actor: &dyn Actor, world: &World, probes: &ProbeSet, cfg: &EvalConfig) -> SteerSets {
    let n = world.n_tasks();
    let m = probes.len();
    let flat = par::map(n * m, |idx| {
        let (k, p) = (idx / m, idx % m);
        let s = seed::derive_path(cfg.seed, "member", &[p as u64, k as u64]);
        estimate_success_prob(actor, world, k, &probes.probes[p].state, cfg.n_est, s)
    });
    let estimates: Vec<Vec<Estimate>> = flat.chunks(m.max(1)).map(<[Estimate]>::to_vec).take(n).collect();
    let estimates = if m == 0 { vec![Vec::new(); n] } else { estimates };
    let member = estimates.iter().map(|row| row.iter().map(|e| e.p >= cfg.alpha).collect()).collect();
    SteerSets {
        n_tasks: n,
        alpha: cfg.alpha,
        probe_task: probes.probes.iter().map(|p| p.task).collect(),
        estimates,
        member,
    }
}

/// Bidirectional steer-set size over union size; `None` when the union is empty.
pub fn compute_scr(sets: &SteerSets, i: usize, j: usize) -> Option<f64> {
    let count = |b: Bitmap| b.into_iter().filter(|&x| x).count();
    let union = count(sets.union(i, j));
    (union > 0).then(|| count(sets.bidirectional(i, j)) as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub successes: usize,
    pub n: usize,
}

impl Cell {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

/// Post-switch success rates for one source task: rows = targets, columns = steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMatrix {
    pub source: usize,
    pub targets: Vec<usize>,
    pub steps: Vec<u32>,
    pub cells: Vec<Vec<Cell>>,
    pub rollouts: usize,
}

impl SourceMatrix {
    pub fn score(&self) -> f64 {
        let rates: Vec<f64> = self.cells.iter().flatten().map(Cell::rate).collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// One evaluation rollout of the switch protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub source: usize,
    pub target: usize,
    pub switch_step: u32,
    pub repeat: usize,
    pub seed: u64,
    pub success: bool,
}

pub fn steerability_matrix(actor: &dyn Actor, world: &World, source: usize, cfg: &EvalConfig) -> SourceMatrix {
    steerability_matrix_logged(actor, world, source, cfg).0
}

/// [`steerability_matrix`] plus every rollout it ran, in (target, step, repeat) order.
pub fn steerability_matrix_logged(
    actor: &dyn Actor,
    world: &World,
    source: usize,
    cfg: &EvalConfig,
) -> (SourceMatrix, Vec<RolloutLog>) {
    let targets: Vec<usize> = (0..world.n_tasks()).filter(|&j| j != source).collect();
    let steps = cfg.grid.steps();
    let cols = steps.len();
    let flat = par::map(targets.len() * cols, |idx| {
        let (j, t) = (targets[idx / cols], steps[idx % cols]);
        let src_seed = seed::derive_path(cfg.seed, "source", &[source as u64, j as u64, u64::from(t)]);
        let start = worldsim::reset(&world.scene, cfg.perturb_std, seed::derive(src_seed, "reset", 0));
        let prefix = rollout(actor, world, source, &start, t, src_seed);
        (0..cfg.n_repeat)
            .map(|r| {
                let s = seed::derive_path(cfg.seed, "cell", &[source as u64, j as u64, u64::from(t), r as u64]);
                let cont = switch_from(actor, world, &prefix.final_state, source, j, t, s, true);
                RolloutLog { source, target: j, switch_step: t, repeat: r, seed: s, success: cont.achieved[j] }
            })
            .collect::<Vec<_>>()
    });
    let cells: Vec<Vec<Cell>> = flat
        .chunks(cols)
        .map(|row| row.iter().map(|c| Cell { successes: c.iter().filter(|l| l.success).count(), n: c.len() }).collect())
        .collect();
    let logs: Vec<RolloutLog> = flat.into_iter().flatten().collect();
    let m = SourceMatrix { source, rollouts: logs.len(), targets, steps, cells };
    (m, logs)
}

/// Full protocol output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub matrices: Vec<SourceMatrix>,
    pub scr: Vec<PairScr>,
    pub score: f64,
    pub rollouts: usize,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScr {
    pub i: usize,
    pub j: usize,
    /// `None` when the union is empty.
    pub scr: Option<f64>,
}

/// Every source matrix plus the overall score.
pub fn evaluate(actor: &dyn Actor, world: &World, cfg: &EvalConfig, sets: Option<&SteerSets>) -> SteerReport {
    evaluate_logged(actor, world, cfg, sets).0
}

/// [`evaluate`] plus the rollout log, sources in order.
pub fn evaluate_logged(
    actor: &dyn Actor,
    world: &World,
    cfg: &EvalConfig,
    sets: Option<&SteerSets>,
) -> (SteerReport, Vec<RolloutLog>) {
    let (matrices, logs): (Vec<SourceMatrix>, Vec<Vec<RolloutLog>>) =
        (0..world.n_tasks()).map(|i| steerability_matrix_logged(actor, world, i, cfg)).unzip();
    let score = matrices.iter().map(SourceMatrix::score).sum::<f64>() / matrices.len() as f64;
    let rollouts = matrices.iter().map(|m| m.rollouts).sum();
    let scr = sets.map(scr_table).unwrap_or_default();
    (SteerReport { matrices, scr, score, rollouts, config: *cfg }, logs.into_iter().flatten().collect())
}

pub fn scr_table(sets: &SteerSets) -> Vec<PairScr> {
    let n = sets.n_tasks;
    (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| PairScr { i, j, scr: compute_scr(sets, i, j) })
        .collect()
}

pub fn steerability_score(actor: &dyn Actor, world: &World, cfg: &EvalConfig) -> f64 {
    evaluate(actor, world, cfg, None).score
}

/// `n (n - 1) |grid| n_repeat`.
pub fn expected_rollouts(n_tasks: usize, cfg: &EvalConfig) -> usize {
    n_tasks * n_tasks.saturating_sub(1) * cfg.grid.steps().len() * cfg.n_repeat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ExpertActor;
    use proptest::prelude::*;

    fn expert(world: &World) -> ExpertActor {
        ExpertActor { scene: world.scene.clone(), tasks: world.tasks.clone(), noise_std: 0.01 }
    }

    fn sets_from(probe_task: Vec<usize>, member: Vec<Vec<bool>>) -> SteerSets {
        let estimates =
            member.iter().map(|row| row.iter().map(|&b| Estimate::from_counts(usize::from(b), 1)).collect()).collect();
        SteerSets { n_tasks: member.len(), alpha: 0.5, probe_task, estimates, member }
    }

    #[test]
    fn grid_and_rollout_accounting() {
        let cfg = EvalConfig::default();
        assert_eq!(cfg.grid.steps().len(), 21);
        assert_eq!(expected_rollouts(4, &cfg), 2520);
        let world = World::default();
        let one = EvalConfig { n_repeat: 10, grid: Grid { start: 40, end: 40, stride: 5 }, ..cfg };
        let mut two = crate::worldsim::World::new(world.scene.clone()).unwrap();
        two.tasks.truncate(2);
        let m = steerability_matrix(&expert(&two), &two, 0, &one);
        assert_eq!((m.rollouts, m.cells.len(), m.cells[0].len(), m.cells[0][0].n), (10, 1, 1, 10));
    }

    #[test]
    fn rollout_log_matches_the_cells() {
        let world = World::default();
        let cfg = EvalConfig { n_repeat: 3, grid: Grid { start: 0, end: 60, stride: 30 }, ..EvalConfig::default() };
        let (report, logs) = evaluate_logged(&expert(&world), &world, &cfg, None);
        assert_eq!(logs.len(), expected_rollouts(4, &cfg));
        assert_eq!(report.rollouts, logs.len());
        for m in &report.matrices {
            for (row, &j) in m.cells.iter().zip(&m.targets) {
                for (cell, &t) in row.iter().zip(&m.steps) {
                    let hits: Vec<_> =
                        logs.iter().filter(|l| l.source == m.source && l.target == j && l.switch_step == t).collect();
                    assert_eq!(hits.len(), cell.n);
                    assert_eq!(hits.iter().filter(|l| l.success).count(), cell.successes);
                }
            }
        }
        assert_eq!(report, evaluate(&expert(&world), &world, &cfg, None));
    }

    #[test]
    fn alpha_validation() {
        let h = 100;
        assert!(EvalConfig { alpha: 0.0, ..EvalConfig::default() }.validate(h).is_ok());
        assert!(EvalConfig { alpha: 1.0, ..EvalConfig::default() }.validate(h).is_ok());
        assert!(EvalConfig { alpha: 1.0 + 1e-9, ..EvalConfig::default() }.validate(h).is_err());
        assert!(EvalConfig { grid: Grid { start: 0, end: 105, stride: 5 }, ..EvalConfig::default() }
            .validate(h)
            .is_err());
    }

    #[test]
    fn scr_arithmetic() {
        // 84 union probes, 21 of them bidirectional.
        let probe_task: Vec<usize> = (0..84).map(|p| p % 2).collect();
        let m0 = vec![true; 84];
        let m1: Vec<bool> = (0..84).map(|p| p < 21).collect();
        let s = sets_from(probe_task, vec![m0, m1]);
        assert_eq!(compute_scr(&s, 0, 1), Some(0.25));
        let empty = sets_from(vec![0, 1], vec![vec![false; 2], vec![false; 2]]);
        assert_eq!(compute_scr(&empty, 0, 1), None);
        let full = sets_from(vec![0, 1], vec![vec![true; 2], vec![true; 2]]);
        assert_eq!(compute_scr(&full, 0, 1), Some(1.0));
    }

    #[test]
    fn directional_sets_are_not_symmetrized() {
        // Task-0 probe reaches task 1; task-1 probe does not reach task 0.
        let s = sets_from(vec![0, 1], vec![vec![true, false], vec![true, true]]);
        assert_eq!(s.directional(0, 1), vec![true, false]);
        assert_eq!(s.directional(1, 0), vec![false, false]);
    }

    #[test]
    fn zero_horizon_rollout() {
        let world = World::default();
        let s0 = worldsim::reset(&world.scene, 0.0, 0);
        let t = rollout(&expert(&world), &world, 1, &s0, 0, 3);
        assert!(t.records.is_empty());
        assert_eq!(t.final_state, s0);
        assert_eq!(t.achieved[1], world.is_success(&s0, 1));
    }

    #[test]
    fn degenerate_switches() {
        let world = World::default();
        let ex = expert(&world);
        let seed = 11;
        let start = worldsim::reset(&world.scene, 0.02, seed::derive(seed, "reset", 0));
        let plain = rollout(&ex, &world, 2, &start, world.horizon(), seed);
        assert_eq!(rollout_with_switch(&ex, &world, 0, 2, 0, 0.02, seed), plain);
        assert_eq!(rollout_with_switch(&ex, &world, 2, 2, 40, 0.02, seed), plain);
        assert_eq!(
            rollout_with_switch(&ex, &world, 1, 3, 30, 0.02, seed),
            rollout_with_switch(&ex, &world, 1, 3, 30, 0.02, seed)
        );
        let sw = rollout_with_switch(&ex, &world, 1, 3, 30, 0.02, seed);
        assert_eq!(sw.switch_step, Some(30));
        assert!(sw.records.iter().all(|r| r.instruction == if r.step < 30 { 1 } else { 3 }));
    }

    #[test]
    fn successful_state_has_probability_one() {
        let world = World::default();
        let mut s = worldsim::reset(&world.scene, 0.0, 0);
        s.objects[1] = world.scene.sites[1];
        let task = world.tasks.iter().position(|t| t.object == 1 && t.site == 1).unwrap();
        let e = estimate_success_prob(&expert(&world), &world, task, &s, 10, 0);
        assert_eq!((e.p, e.std), (1.0, 0.0));
    }

    #[test]
    fn vacuous_threshold_admits_every_probe() {
        let world = World::default();
        let cfg = EvalConfig {
            alpha: 0.0,
            n_est: 1,
            probe: ProbeSpec { rollouts_per_task: 1, stride: 50 },
            ..EvalConfig::default()
        };
        let ex = expert(&world);
        let probes = build_probe_set(&ex, &world, &cfg);
        assert_eq!(probes.len(), 4 * 2);
        let sets = compute_steer_sets(&ex, &world, &probes, &cfg);
        assert!(sets.member.iter().flatten().all(|&b| b));
    }

    #[test]
    fn stride_equal_to_horizon_keeps_reset_states() {
        let world = World::default();
        let cfg = EvalConfig { probe: ProbeSpec { rollouts_per_task: 3, stride: 100 }, ..EvalConfig::default() };
        let probes = build_probe_set(&expert(&world), &world, &cfg);
        assert_eq!(probes.len(), 12);
        assert!(probes.probes.iter().all(|p| p.step == 0));
        assert!((probes.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expert_steers_wherever_time_allows() {
        let world = World::default();
        let cfg =
            EvalConfig { n_repeat: 2, grid: Grid { start: 0, end: 60, stride: 10 }, seed: 4, ..EvalConfig::default() };
        let r = evaluate(&expert(&world), &world, &cfg, None);
        assert!(r.score >= 0.95, "score {}", r.score);
        assert_eq!(r.rollouts, expected_rollouts(4, &cfg));
    }

    fn arb_sets() -> impl Strategy<Value = SteerSets> {
        (2usize..5, 1usize..30).prop_flat_map(|(n, m)| {
            (prop::collection::vec(0..n, m), prop::collection::vec(prop::collection::vec(any::<bool>(), m), n))
                .prop_map(|(pt, member)| sets_from(pt, member))
        })
    }

    proptest! {
        #[test]
        fn inclusions_hold_on_any_membership(sets in arb_sets()) {
            prop_assert!(sets.inclusion_violations().is_empty());
            for i in 0..sets.n_tasks {
                for j in 0..sets.n_tasks {
                    if let Some(scr) = compute_scr(&sets, i, j) {
                        prop_assert!((0.0..=1.0).contains(&scr));
                    }
                }
            }
        }

        #[test]
        fn scr_grows_with_the_steer_set(mut sets in arb_sets(), pick in any::<prop::sample::Index>()) {
            let (i, j) = (0, 1);
            let before = compute_scr(&sets, i, j);
            let union = sets.union(i, j);
            // Promote one union probe into both visitation sets: the union is unchanged.
            let cands: Vec<usize> = (0..sets.n_probes()).filter(|&p| union[p]).collect();
            prop_assume!(!cands.is_empty());
            let p = cands[pick.index(cands.len())];
            sets.member[i][p] = true;
            sets.member[j][p] = true;
            prop_assert_eq!(sets.union(i, j), union);
            prop_assert!(compute_scr(&sets, i, j).unwrap() >= before.unwrap());
        }
    }
}
