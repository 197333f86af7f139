//! Kernel behaviour cloning over weighted demonstration sources.
//!
//! A query `(s, ℓ)` scores every record `r` by
//!
//! ```text
//! key_r = d_s²/2h_s² + d_ℓ²/2h_ℓ²
//! ```
//!
//! where `d_s` is the state-feature distance and `d_ℓ = λ·√2` when the record's
//! instruction differs from `ℓ` (the distance between two λ-scaled one-hot
//! blocks), `0` otherwise. The `k_nn` records with the smallest key form the
//! mixture, weighted by `source_weight(r) / |source(r)| · exp(−key_r)`. At
//! `λ = 0` every instruction sees the same mixture; as `λ` grows the
//! instruction overrides state proximity over ever larger distances.
//!
//! The gripper command is the weight-majority vote over the retrieved records,
//! and the displacement mixture keeps only the records that agree with it.

pub mod index;
pub mod trajectory;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geom::{self, Vec2};
use crate::seed;
use crate::worldsim::{self, Action, GripCommand, SceneConfig, TaskSpec, WorldState};
pub use index::{KdTree, Neighbor};
pub use trajectory::{DemoConfig, Record, SourceTag, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub k_nn: usize,
    /// Language weight.
    pub lambda: f64,
    /// State kernel bandwidth, feature units.
    pub h_s: f64,
    /// Language kernel bandwidth, feature units.
    pub h_lang: f64,
    /// Per-component displacement std.
    pub sigma_a: f64,
    /// Queries whose nearest record lies farther than this emit a zero action.
    pub reach: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { k_nn: 32, lambda: 8.0, h_s: 0.02, h_lang: 0.25, sigma_a: 0.01, reach: 1.2 }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.k_nn >= 1, || "k_nn must be at least 1".into())?;
        ensure(self.lambda >= 0.0 && self.lambda.is_finite(), || "lambda must be a finite nonnegative number".into())?;
        ensure(self.h_s > 0.0, || "h_s must be positive".into())?;
        ensure(self.h_lang > 0.0, || "h_lang must be positive".into())?;
        ensure(self.sigma_a > 0.0, || "sigma_a must be positive".into())?;
        ensure(self.reach > 0.0, || "reach must be positive".into())?;
        Ok(())
    }
}

/// Layout of the feature vector: state block then instruction block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_objects: usize,
    pub n_instructions: usize,
}

impl FeatureMap {
    /// Gripper (2), grip bit (1), object positions (2M), held one-hot (M).
    pub fn state_dim(&self) -> usize {
        3 + 3 * self.n_objects
    }

    pub fn dim(&self) -> usize {
        self.state_dim() + self.n_instructions
    }

    pub fn state_features(&self, state: &WorldState, out: &mut Vec<f64>) {
        out.extend_from_slice(&state.gripper);
        out.push(if state.grip_closed { 1.0 } else { 0.0 });
        for p in &state.objects {
            out.extend_from_slice(p);
        }
        out.extend((0..self.n_objects).map(|k| if state.held == Some(k) { 1.0 } else { 0.0 }));
    }

    /// Full feature vector with the λ-scaled instruction one-hot appended.
    pub fn featurize(&self, state: &WorldState, instruction: usize, lambda: f64) -> Result<Vec<f64>> {
        if instruction >= self.n_instructions {
            return Err(Error::UnknownTask(instruction));
        }
        let mut f = Vec::with_capacity(self.dim());
        self.state_features(state, &mut f);
        f.extend((0..self.n_instructions).map(|k| if k == instruction { lambda } else { 0.0 }));
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    action: Action,
    instruction: usize,
    weight: f64,
    source: usize,
}

/// A demonstration source offered to [`fit`].
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub trajectories: &'a [Trajectory],
    pub weight: f64,
}

impl<'a> Source<'a> {
    pub fn new(trajectories: &'a [Trajectory], weight: f64) -> Self {
        Self { trajectories, weight }
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    params: PolicyParams,
    scene: SceneConfig,
    features: FeatureMap,
    /// One state-feature index per instruction, over local record ids.
    trees: Vec<KdTree>,
    /// Global entry id of each local record, per instruction.
    members: Vec<Vec<usize>>,
    entries: Vec<Entry>,
    /// Normalized weight per offered source, zero for dropped sources.
    source_weights: Vec<f64>,
}

/// Build a policy over the weighted union of `sources`.
///
/// Source weights are normalized over the sources that carry at least one
/// training record; each record gets its source's weight divided by the
/// source's record count.
pub fn fit(scene: &SceneConfig, tasks: &[TaskSpec], params: PolicyParams, sources: &[Source<'_>]) -> Result<Policy> {
    params.validate()?;
    let features = FeatureMap { n_objects: scene.objects.len(), n_instructions: tasks.len() };
    for s in sources {
        ensure(s.weight >= 0.0 && s.weight.is_finite(), || format!("source weight {} is invalid", s.weight))?;
    }
    let counts: Vec<usize> =
        sources.iter().map(|s| s.trajectories.iter().map(|t| t.training_records().len()).sum()).collect();
    let total: f64 = sources.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(s, _)| s.weight).sum();
    if total <= 0.0 {
        return Err(Error::EmptyUnion);
    }
    let source_weights: Vec<f64> =
        sources.iter().zip(&counts).map(|(s, &n)| if n > 0 { s.weight / total } else { 0.0 }).collect();

    let n_instr = tasks.len();
    let mut points = vec![Vec::new(); n_instr];
    let mut members = vec![Vec::new(); n_instr];
    let mut entries = Vec::new();
    for (si, s) in sources.iter().enumerate() {
        if source_weights[si] == 0.0 {
            continue;
        }
        let w = source_weights[si] / counts[si] as f64;
        for r in s.trajectories.iter().flat_map(|t| t.training_records()) {
            if r.instruction >= n_instr {
                return Err(Error::UnknownTask(r.instruction));
            }
            features.state_features(&r.state, &mut points[r.instruction]);
            members[r.instruction].push(entries.len());
            entries.push(Entry { action: r.action, instruction: r.instruction, weight: w, source: si });
        }
    }
    let trees = points.into_iter().map(|pts| KdTree::build(features.state_dim(), pts)).collect();
    Ok(Policy { params, scene: scene.clone(), features, trees, members, entries, source_weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec2,
    pub weight: f64,
    pub command: GripCommand,
    /// Index of the contributing source in the `fit` call.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub components: Vec<Component>,
    pub sigma: f64,
    pub a_max: f64,
    /// Weight-majority gripper command.
    pub command: GripCommand,
}

impl ActionDistribution {
    /// Mixture density over displacements, before clamping.
    pub fn log_density(&self, x: Vec2) -> f64 {
        let s2 = self.sigma * self.sigma;
        let norm = -(2.0 * std::f64::consts::PI * s2).ln();
        let terms: Vec<f64> =
            self.components.iter().map(|c| c.weight.ln() + norm - geom::dist2(x, c.mean) / (2.0 * s2)).collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: Vec2) -> f64 {
        self.log_density(x).exp()
    }

    pub fn mean(&self) -> Vec2 {
        self.components.iter().fold([0.0, 0.0], |acc, c| geom::add(acc, geom::scale(c.mean, c.weight)))
    }

    /// Weight-majority vote; any tie resolves to `hold`.
    fn vote(components: &[Component]) -> GripCommand {
        let mut mass = [0.0; 3];
        for c in components {
            mass[c.command.index()] += c.weight;
        }
        let best = mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<GripCommand> = GripCommand::ALL.into_iter().filter(|c| mass[c.index()] == best).collect();
        match winners.as_slice() {
            [only] => *only,
            _ => GripCommand::Hold,
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn pick_component(dist: &ActionDistribution, rng: &mut seed::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in dist.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return i;
        }
    }
    dist.components.len() - 1
}

/// Draw one action: pick a component, add isotropic noise, clamp.
pub fn sample_action(dist: &ActionDistribution, seed: u64) -> Action {
    let mut rng = seed::rng(seed);
    let c = dist.components[pick_component(dist, &mut rng)];
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let d = [c.mean[0] + dist.sigma * nx, c.mean[1] + dist.sigma * ny];
    Action::new(geom::clamp_norm(d, dist.a_max), dist.command)
}

/// The noiseless counterpart of `sample_action(dist, seed)`: the chosen
/// component's mean, clamped, with the voted command.
pub fn sample_label(dist: &ActionDistribution, seed: u64) -> Action {
    let mut rng = seed::rng(seed);
    let c = dist.components[pick_component(dist, &mut rng)];
    Action::new(geom::clamp_norm(c.mean, dist.a_max), dist.command)
}

/// An open-loop action chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub actions: Vec<Action>,
    /// Final minus initial gripper position over the chunk.
    pub displacement: Vec2,
}

impl Policy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn n_instructions(&self) -> usize {
        self.features.n_instructions
    }

    pub fn n_records(&self) -> usize {
        self.entries.len()
    }

    pub fn source_weights(&self) -> &[f64] {
        &self.source_weights
    }

    /// Same records, different parameters. The indexes do not depend on the
    /// parameters, so λ sweeps reuse one fit.
    pub fn with_params(&self, params: PolicyParams) -> Result<Policy> {
        params.validate()?;
        Ok(Policy { params, ..self.clone() })
    }

    /// The `k_nn` smallest-key records as `(key, state dist², entry id)`,
    /// ascending, plus the smallest dist² seen and the indexes left unsearched.
    fn retrieve(&self, q: &[f64], instruction: usize) -> (Vec<(f64, f64, usize)>, f64, Vec<usize>) {
        let p = &self.params;
        let k = p.k_nn;
        let hs2 = 2.0 * p.h_s * p.h_s;
        let lang = p.lambda * p.lambda / (p.h_lang * p.h_lang);
        let mut out: Vec<(f64, f64, usize)> = Vec::with_capacity(k * 2);
        let mut nearest = f64::INFINITY;
        let mut skipped = Vec::new();
        let order = std::iter::once(instruction).chain((0..self.trees.len()).filter(move |&c| c != instruction));
        for c in order {
            let pen = if c == instruction { 0.0 } else { lang };
            if out.len() >= k && pen > out[k - 1].0 {
                skipped.push(c);
                continue;
            }
            let found = self.trees[c].knn(q, k);
            if let Some(n) = found.first() {
                nearest = nearest.min(n.dist2);
            }
            for n in found {
                out.push((n.dist2 / hs2 + pen, n.dist2, self.members[c][n.id]));
            }
            out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            out.truncate(k);
        }
        (out, nearest, skipped)
    }

    pub fn action_dist(&self, state: &WorldState, instruction: usize) -> ActionDistribution {
        let p = &self.params;
        let mut q = Vec::with_capacity(self.features.state_dim());
        self.features.state_features(state, &mut q);
        let (nn, mut nearest, skipped) = self.retrieve(&q, instruction);
        if nearest.sqrt() > p.reach {
            for c in skipped {
                if let Some(n) = self.trees[c].knn(&q, 1).first() {
                    nearest = nearest.min(n.dist2);
                }
            }
        }
        if nn.is_empty() || nearest.sqrt() > p.reach {
            let hold = Component { mean: [0.0, 0.0], weight: 1.0, command: GripCommand::Hold, source: usize::MAX };
            return ActionDistribution {
                components: vec![hold],
                sigma: p.sigma_a,
                a_max: self.scene.a_max,
                command: GripCommand::Hold,
            };
        }
        let logw: Vec<f64> = nn.iter().map(|&(key, _, id)| self.entries[id].weight.ln() - key).collect();
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = raw.iter().sum();
        let all: Vec<Component> = nn
            .iter()
            .zip(&raw)
            .map(|(&(_, _, id), w)| {
                let e = &self.entries[id];
                Component { mean: e.action.displacement, weight: w / z, command: e.action.command, source: e.source }
            })
            .collect();
        let command = ActionDistribution::vote(&all);
        let mut components: Vec<Component> = all.iter().copied().filter(|c| c.command == command).collect();
        if components.is_empty() {
            components = all;
        } else {
            let z: f64 = components.iter().map(|c| c.weight).sum();
            components.iter_mut().for_each(|c| c.weight /= z);
        }
        ActionDistribution { components, sigma: p.sigma_a, a_max: self.scene.a_max, command }
    }

    pub fn act(&self, state: &WorldState, instruction: usize, seed: u64) -> Action {
        sample_action(&self.action_dist(state, instruction), seed)
    }

    /// Noiseless label of the action `act` draws with the same seed.
    pub fn label(&self, state: &WorldState, instruction: usize, seed: u64) -> Action {
        sample_label(&self.action_dist(state, instruction), seed)
    }

    /// Open-loop roll of `k` actions on a noiseless private copy of the world.
    pub fn sample_chunk(&self, state: &WorldState, instruction: usize, k: usize, seed: u64) -> Chunk {
        let mut s = state.clone();
        let mut actions = Vec::with_capacity(k);
        for i in 0..k {
            let a = self.act(&s, instruction, seed::derive(seed, "chunk", i as u64));
            s = worldsim::advance(&s, &a, &self.scene, 0.0, 0);
            actions.push(a);
        }
        Chunk { actions, displacement: geom::sub(s.gripper, state.gripper) }
    }
}

/// Anything that maps (state, instruction, seed) to an action.
pub trait Actor: Sync {
    fn act(&self, state: &WorldState, instruction: usize, seed: u64) -> Action;
}

impl Actor for Policy {
    fn act(&self, state: &WorldState, instruction: usize, seed: u64) -> Action {
        Policy::act(self, state, instruction, seed)
    }
}

/// The scripted expert as an actor: an upper reference for steering.
#[derive(Debug, Clone)]
pub struct ExpertActor {
    pub scene: SceneConfig,
    pub tasks: Vec<TaskSpec>,
    pub noise_std: f64,
}

impl Actor for ExpertActor {
    fn act(&self, state: &WorldState, instruction: usize, seed: u64) -> Action {
        worldsim::scripted_expert(state, &self.tasks[instruction], &self.scene, self.noise_std, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SceneConfig, Vec<TaskSpec>, Vec<Trajectory>) {
        let scene = SceneConfig::default();
        let tasks = scene.tasks();
        let demos = trajectory::expert_demos(&scene, &tasks, &DemoConfig { per_task: 10, ..DemoConfig::default() }, 2);
        (scene, tasks, demos)
    }

    #[test]
    fn featurize_geometry() {
        let scene = SceneConfig::default();
        let fm = FeatureMap { n_objects: 2, n_instructions: 4 };
        let s = worldsim::reset(&scene, 0.0, 0);
        assert_eq!(fm.featurize(&s, 0, 0.0).unwrap(), fm.featurize(&s, 3, 0.0).unwrap());
        let a = fm.featurize(&s, 0, 8.0).unwrap();
        let b = fm.featurize(&s, 1, 8.0).unwrap();
        assert!((index::dist2(&a, &b).sqrt() - 8.0 * 2f64.sqrt()).abs() < 1e-12);
        let one = fm.featurize(&s, 2, 1.0).unwrap();
        let two = fm.featurize(&s, 2, 2.0).unwrap();
        let sd = fm.state_dim();
        assert_eq!(one[..sd], two[..sd]);
        assert_eq!(two[sd + 2], 2.0 * one[sd + 2]);
        assert!(matches!(fm.featurize(&s, 4, 1.0), Err(Error::UnknownTask(4))));
    }

    #[test]
    fn empty_union_is_rejected() {
        let (scene, tasks, demos) = setup();
        assert_eq!(fit(&scene, &tasks, PolicyParams::default(), &[]).unwrap_err(), Error::EmptyUnion);
        let none: Vec<Trajectory> = Vec::new();
        let err = fit(&scene, &tasks, PolicyParams::default(), &[Source::new(&none, 1.0), Source::new(&demos, 0.0)]);
        assert_eq!(err.unwrap_err(), Error::EmptyUnion);
    }

    #[test]
    fn exact_match_retrieval() {
        let (scene, tasks, demos) = setup();
        let p = fit(&scene, &tasks, PolicyParams { k_nn: 1, ..PolicyParams::default() }, &[Source::new(&demos, 1.0)])
            .unwrap();
        let r = &demos[13].records[5];
        let d = p.action_dist(&r.state, r.instruction);
        assert_eq!(d.components.len(), 1);
        assert_eq!(d.mean(), r.action.displacement);
        assert_eq!(d.command, r.action.command);
    }

    #[test]
    fn zero_lambda_is_instruction_blind() {
        let (scene, tasks, demos) = setup();
        let p =
            fit(&scene, &tasks, PolicyParams { lambda: 0.0, ..PolicyParams::default() }, &[Source::new(&demos, 1.0)])
                .unwrap();
        for r in demos.iter().flat_map(|t| &t.records).step_by(7) {
            let d0 = p.action_dist(&r.state, 0);
            for k in 1..tasks.len() {
                assert_eq!(p.action_dist(&r.state, k), d0);
            }
        }
    }

    #[test]
    fn zero_weight_source_changes_nothing() {
        let (scene, tasks, demos) = setup();
        let extra = trajectory::expert_demos(&scene, &tasks, &DemoConfig { per_task: 3, ..DemoConfig::default() }, 9);
        let params = PolicyParams::default();
        let a = fit(&scene, &tasks, params, &[Source::new(&demos, 1.0)]).unwrap();
        let b = fit(&scene, &tasks, params, &[Source::new(&demos, 1.0), Source::new(&extra, 0.0)]).unwrap();
        for r in extra.iter().flat_map(|t| &t.records).step_by(5) {
            assert_eq!(a.action_dist(&r.state, r.instruction), b.action_dist(&r.state, r.instruction));
            assert_eq!(a.act(&r.state, r.instruction, 4), b.act(&r.state, r.instruction, 4));
        }
    }

    #[test]
    fn far_queries_fall_back_to_a_zero_hold_action() {
        let (scene, tasks, demos) = setup();
        let p =
            fit(&scene, &tasks, PolicyParams { reach: 0.05, ..PolicyParams::default() }, &[Source::new(&demos, 1.0)])
                .unwrap();
        let mut s = worldsim::reset(&scene, 0.0, 0);
        s.gripper = [0.0, 1.0];
        s.grip_closed = true;
        let d = p.action_dist(&s, 0);
        assert_eq!(d.mean(), [0.0, 0.0]);
        assert_eq!(d.command, GripCommand::Hold);
    }

    #[test]
    fn vote_ties_go_to_hold() {
        let c = |command, weight| Component { mean: [0.0, 0.0], weight, command, source: 0 };
        assert_eq!(
            ActionDistribution::vote(&[c(GripCommand::Open, 0.5), c(GripCommand::Close, 0.5)]),
            GripCommand::Hold
        );
        assert_eq!(
            ActionDistribution::vote(&[c(GripCommand::Open, 0.6), c(GripCommand::Hold, 0.4)]),
            GripCommand::Open
        );
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let (scene, tasks, demos) = setup();
        let p = fit(&scene, &tasks, PolicyParams::default(), &[Source::new(&demos, 1.0)]).unwrap();
        let s = worldsim::reset(&scene, 0.0, 0);
        let d = p.action_dist(&s, 2);
        assert_eq!(sample_action(&d, 17), sample_action(&d, 17));
        for seed in 0..200 {
            assert!(geom::norm(sample_action(&d, seed).displacement) <= scene.a_max + 1e-12);
        }
        assert_eq!(p.sample_chunk(&s, 1, 5, 8), p.sample_chunk(&s, 1, 5, 8));
    }

    #[test]
    fn single_step_chunk_matches_one_draw() {
        let (scene, tasks, demos) = setup();
        let p = fit(&scene, &tasks, PolicyParams::default(), &[Source::new(&demos, 1.0)]).unwrap();
        let s = worldsim::reset(&scene, 0.0, 0);
        let c = p.sample_chunk(&s, 3, 1, 21);
        assert_eq!(c.actions, vec![p.act(&s, 3, seed::derive(21, "chunk", 0))]);
        assert!(geom::dist(c.displacement, c.actions[0].displacement) < 1e-15);
    }
}
