//! Deterministic 2-D pick-and-place world.
//!
//! A point-mass gripper moves inside an axis-aligned box, grasps point objects
//! and drops them on goal sites. Every function here is pure: the next state
//! depends only on `(state, action, scene, seed)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geom::{self, Vec2};
use crate::seed;

/// Static description of a scene. Serialized with exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// `[[x_min, y_min], [x_max, y_max]]`.
    pub bounds: [Vec2; 2],
    /// Object start positions.
    pub objects: Vec<Vec2>,
    /// Goal-site positions.
    pub sites: Vec<Vec2>,
    pub r_grasp: f64,
    pub r_goal: f64,
    pub d_place: f64,
    /// Maximum displacement per step.
    pub a_max: f64,
    /// Std of the Gaussian noise added to every commanded displacement.
    pub sigma_env: f64,
    /// Episode horizon in steps.
    pub horizon: u32,
}

impl Default for SceneConfig {
    /// The shipped scene: two objects, two sites, four tasks.
    fn default() -> Self {
        Self {
            bounds: [[0.0, 0.0], [1.0, 1.0]],
            objects: vec![[0.3, 0.7], [0.7, 0.7]],
            sites: vec![[0.3, 0.3], [0.7, 0.3]],
            r_grasp: 0.05,
            r_goal: 0.05,
            d_place: 0.12,
            a_max: 0.05,
            sigma_env: 0.002,
            horizon: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.bounds;
        ensure(lo[0] < hi[0] && lo[1] < hi[1], || "bounds must have min < max".into())?;
        ensure(!self.objects.is_empty(), || "scene needs at least one object".into())?;
        ensure(!self.sites.is_empty(), || "scene needs at least one goal site".into())?;
        for (what, pts) in [("object", &self.objects), ("site", &self.sites)] {
            for (i, p) in pts.iter().enumerate() {
                ensure(self.contains(*p), || format!("{what} {i} at {p:?} lies outside bounds"))?;
            }
        }
        for (name, v) in [("r_grasp", self.r_grasp), ("r_goal", self.r_goal), ("d_place", self.d_place)] {
            ensure(v > 0.0 && v < 1.0, || format!("{name} must lie in (0, 1), got {v}"))?;
        }
        ensure(self.a_max > 0.0, || format!("a_max must be positive, got {}", self.a_max))?;
        ensure(self.sigma_env >= 0.0, || "sigma_env must be nonnegative".into())?;
        ensure(self.horizon >= 1, || "horizon must be at least 1".into())?;
        Ok(())
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let [lo, hi] = self.bounds;
        (lo[0]..=hi[0]).contains(&p[0]) && (lo[1]..=hi[1]).contains(&p[1])
    }

    pub fn clip(&self, p: Vec2) -> Vec2 {
        let [lo, hi] = self.bounds;
        [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1])]
    }

    /// Gripper start position.
    pub fn center(&self) -> Vec2 {
        let [lo, hi] = self.bounds;
        [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0]
    }

    /// One task per (object, site) pair, object-major.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut tasks = Vec::new();
        for o in 0..self.objects.len() {
            for g in 0..self.sites.len() {
                tasks.push(TaskSpec {
                    id: tasks.len(),
                    instruction: format!("put object {o} on site {g}"),
                    object: o,
                    site: g,
                });
            }
        }
        tasks
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub instruction: String,
    pub object: usize,
    pub site: usize,
}

/// Check ids, uniqueness of instructions and validity against `scene`.
pub fn validate_tasks(tasks: &[TaskSpec], scene: &SceneConfig) -> Result<()> {
    for (k, t) in tasks.iter().enumerate() {
        ensure(t.id == k, || format!("task at position {k} has id {}", t.id))?;
        ensure(t.object < scene.objects.len(), || format!("task {k}: object {} out of range", t.object))?;
        ensure(t.site < scene.sites.len(), || format!("task {k}: site {} out of range", t.site))?;
        ensure(tasks[..k].iter().all(|o| o.instruction != t.instruction), || {
            format!("duplicate instruction {:?}", t.instruction)
        })?;
    }
    Ok(())
}

/// A validated scene together with its task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub scene: SceneConfig,
    pub tasks: Vec<TaskSpec>,
}

impl World {
    /// The scene with one task per (object, site) pair.
    pub fn new(scene: SceneConfig) -> Result<Self> {
        let tasks = scene.tasks();
        Self::with_tasks(scene, tasks)
    }

    pub fn with_tasks(scene: SceneConfig, tasks: Vec<TaskSpec>) -> Result<Self> {
        scene.validate()?;
        validate_tasks(&tasks, &scene)?;
        Ok(Self { scene, tasks })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn horizon(&self) -> u32 {
        self.scene.horizon
    }

    pub fn is_success(&self, state: &WorldState, task: usize) -> bool {
        is_success(state, &self.tasks[task], &self.scene)
    }

    pub fn stage(&self, state: &WorldState, task: usize) -> StageLabel {
        stage_label(state, &self.tasks[task], &self.scene)
    }
}

impl Default for World {
    fn default() -> Self {
        Self::new(SceneConfig::default()).expect("default scene is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: Vec2,
    pub grip_closed: bool,
    pub objects: Vec<Vec2>,
    pub held: Option<usize>,
    pub step: u32,
}

impl WorldState {
    pub fn object(&self, id: usize) -> Vec2 {
        self.objects[id]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripCommand {
    Open,
    Close,
    Hold,
}

impl GripCommand {
    pub const ALL: [GripCommand; 3] = [GripCommand::Open, GripCommand::Close, GripCommand::Hold];

    pub fn index(self) -> usize {
        match self {
            GripCommand::Open => 0,
            GripCommand::Close => 1,
            GripCommand::Hold => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub displacement: Vec2,
    pub command: GripCommand,
}

impl Action {
    pub const NOOP: Action = Action { displacement: [0.0, 0.0], command: GripCommand::Hold };

    pub fn new(displacement: Vec2, command: GripCommand) -> Self {
        Self { displacement, command }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageLabel {
    PreGrasp,
    Transport,
    Place,
    Done,
}

impl StageLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::PreGrasp => "pre-grasp",
            StageLabel::Transport => "transport",
            StageLabel::Place => "place",
            StageLabel::Done => "done",
        }
    }
}

/// Initial state: gripper at the scene center, objects at their configured
/// starts plus clipped Gaussian perturbation.
pub fn reset(scene: &SceneConfig, perturb_std: f64, seed: u64) -> WorldState {
    let mut rng = seed::rng(seed);
    let objects = scene
        .objects
        .iter()
        .map(|&p| {
            if perturb_std > 0.0 {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                scene.clip([p[0] + perturb_std * dx, p[1] + perturb_std * dy])
            } else {
                p
            }
        })
        .collect();
    WorldState { gripper: scene.center(), grip_closed: false, objects, held: None, step: 0 }
}

/// Advance one step. Terminal states (`step == horizon`) are rejected.
pub fn step(state: &WorldState, action: &Action, scene: &SceneConfig, seed: u64) -> Result<WorldState> {
    if state.step >= scene.horizon {
        return Err(Error::Terminal { step: state.step, horizon: scene.horizon });
    }
    Ok(advance(state, action, scene, scene.sigma_env, seed))
}

/// Raw transition without the horizon check, with explicit noise level.
/// Used by open-loop lookahead on private world copies.
pub(crate) fn advance(
    state: &WorldState,
    action: &Action,
    scene: &SceneConfig,
    sigma_env: f64,
    seed: u64,
) -> WorldState {
    let mut next = state.clone();
    let mut disp = geom::clamp_norm(action.displacement, scene.a_max);
    if sigma_env > 0.0 {
        let mut rng = seed::rng(seed);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        disp = [disp[0] + sigma_env * nx, disp[1] + sigma_env * ny];
    }
    next.gripper = scene.clip(geom::add(state.gripper, disp));
    match action.command {
        GripCommand::Open => {
            next.grip_closed = false;
            next.held = None;
        }
        GripCommand::Close => {
            next.grip_closed = true;
            if next.held.is_none() {
                next.held = nearest_free_object(&next, scene.r_grasp);
            }
        }
        GripCommand::Hold => {}
    }
    if let Some(h) = next.held {
        next.objects[h] = next.gripper;
    }
    next.step = state.step.saturating_add(1);
    next
}

/// Nearest object within `radius` of the gripper; ties go to the lowest id.
fn nearest_free_object(state: &WorldState, radius: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &p) in state.objects.iter().enumerate() {
        let d = geom::dist(p, state.gripper);
        if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

pub fn is_success(state: &WorldState, task: &TaskSpec, scene: &SceneConfig) -> bool {
    state.held != Some(task.object) && geom::dist(state.object(task.object), scene.sites[task.site]) <= scene.r_goal
}

pub fn stage_label(state: &WorldState, task: &TaskSpec, scene: &SceneConfig) -> StageLabel {
    if is_success(state, task, scene) {
        StageLabel::Done
    } else if state.held == Some(task.object) {
        if geom::dist(state.gripper, scene.sites[task.site]) <= scene.d_place {
            StageLabel::Place
        } else {
            StageLabel::Transport
        }
    } else {
        StageLabel::PreGrasp
    }
}

/// Scripted demonstrator.
///
/// Approaches the task object, closes in place once within `r_grasp / 2`,
/// carries the object to its site, opens in place once within `r_goal / 2`,
/// then retreats to the scene center. Wrongly held objects are released first.
pub fn scripted_expert(state: &WorldState, task: &TaskSpec, scene: &SceneConfig, noise_std: f64, seed: u64) -> Action {
    let toward = |target: Vec2| geom::clamp_norm(geom::sub(target, state.gripper), scene.a_max);
    let mut action = if is_success(state, task, scene) {
        Action::new(toward(scene.center()), GripCommand::Hold)
    } else {
        match state.held {
            Some(h) if h == task.object => {
                let goal = scene.sites[task.site];
                if geom::dist(goal, state.gripper) <= scene.r_goal / 2.0 {
                    Action::new([0.0, 0.0], GripCommand::Open)
                } else {
                    Action::new(toward(goal), GripCommand::Hold)
                }
            }
            Some(_) => Action::new([0.0, 0.0], GripCommand::Open),
            None => {
                let obj = state.object(task.object);
                if geom::dist(obj, state.gripper) <= scene.r_grasp / 2.0 {
                    Action::new([0.0, 0.0], GripCommand::Close)
                } else if state.grip_closed {
                    Action::new(toward(obj), GripCommand::Open)
                } else {
                    Action::new(toward(obj), GripCommand::Hold)
                }
            }
        }
    };
    if noise_std > 0.0 {
        let mut rng = seed::rng(seed);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let d = action.displacement;
        action.displacement = geom::clamp_norm([d[0] + noise_std * nx, d[1] + noise_std * ny], scene.a_max);
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene0() -> SceneConfig {
        SceneConfig { sigma_env: 0.0, ..SceneConfig::default() }
    }

    #[test]
    fn zero_perturbation_reset_is_canonical() {
        let scene = scene0();
        let s = reset(&scene, 0.0, 99);
        assert_eq!(s.objects, scene.objects);
        assert_eq!(s.gripper, [0.5, 0.5]);
        assert!(!s.grip_closed);
        assert_eq!(s.held, None);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn reset_is_deterministic() {
        let scene = scene0();
        assert_eq!(reset(&scene, 0.05, 3), reset(&scene, 0.05, 3));
        assert_ne!(reset(&scene, 0.05, 3), reset(&scene, 0.05, 4));
    }

    #[test]
    fn reset_perturbation_statistics() {
        let scene = scene0();
        let n = 1000;
        for axis in 0..2 {
            let xs: Vec<f64> =
                (0..n).map(|s| reset(&scene, 0.02, s).objects[0][axis] - scene.objects[0][axis]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var.sqrt() - 0.02).abs() <= 0.005, "axis {axis} std {}", var.sqrt());
        }
    }

    #[test]
    fn noop_changes_only_step_counter() {
        let scene = scene0();
        let s = reset(&scene, 0.0, 0);
        let n = step(&s, &Action::NOOP, &scene, 1).unwrap();
        assert_eq!(n.step, 1);
        assert_eq!(WorldState { step: 0, ..n }, s);
    }

    #[test]
    fn close_at_object_grasps_it() {
        let scene = scene0();
        let mut s = reset(&scene, 0.0, 0);
        s.gripper = scene.objects[1];
        let n = step(&s, &Action::new([0.0, 0.0], GripCommand::Close), &scene, 0).unwrap();
        assert_eq!(n.held, Some(1));
        assert!(n.grip_closed);
    }

    #[test]
    fn grasp_prefers_nearest_then_lowest_id() {
        let mut scene = scene0();
        scene.objects = vec![[0.5, 0.52], [0.5, 0.48], [0.5, 0.51]];
        let s = reset(&scene, 0.0, 0);
        let n = step(&s, &Action::new([0.0, 0.0], GripCommand::Close), &scene, 0).unwrap();
        assert_eq!(n.held, Some(2));
        scene.objects = vec![[0.5, 0.52], [0.5, 0.48]];
        let s = reset(&scene, 0.0, 0);
        let n = step(&s, &Action::new([0.0, 0.0], GripCommand::Close), &scene, 0).unwrap();
        assert_eq!(n.held, Some(0));
    }

    #[test]
    fn terminal_state_is_rejected() {
        let scene = scene0();
        let mut s = reset(&scene, 0.0, 0);
        s.step = scene.horizon;
        assert!(matches!(step(&s, &Action::NOOP, &scene, 0), Err(Error::Terminal { .. })));
    }

    #[test]
    fn expert_solves_canonical_task_in_twenty_steps() {
        let scene = scene0();
        let task = &scene.tasks()[0];
        let mut s = reset(&scene, 0.0, 0);
        for t in 0..20 {
            let a = scripted_expert(&s, task, &scene, 0.0, t);
            s = step(&s, &a, &scene, t).unwrap();
        }
        assert!(is_success(&s, task, &scene));
    }

    #[test]
    fn success_predicate_edges() {
        let scene = scene0();
        let task = &scene.tasks()[0];
        let site = scene.sites[task.site];
        let mut s = reset(&scene, 0.0, 0);
        s.objects[task.object] = site;
        assert!(is_success(&s, task, &scene));
        s.held = Some(task.object);
        s.grip_closed = true;
        s.gripper = site;
        assert!(!is_success(&s, task, &scene));
        s.held = None;
        s.objects[task.object] = [site[0] + scene.r_goal + 1e-6, site[1]];
        assert!(!is_success(&s, task, &scene));
    }

    #[test]
    fn stage_labels() {
        let scene = scene0();
        let task = &scene.tasks()[0];
        let mut s = reset(&scene, 0.0, 0);
        assert_eq!(stage_label(&s, task, &scene), StageLabel::PreGrasp);
        let site = scene.sites[task.site];
        s.held = Some(task.object);
        s.grip_closed = true;
        s.gripper = [site[0], site[1] + 0.4];
        s.objects[task.object] = s.gripper;
        assert_eq!(stage_label(&s, task, &scene), StageLabel::Transport);
        s.gripper = [site[0], site[1] + 0.05];
        s.objects[task.object] = s.gripper;
        assert_eq!(stage_label(&s, task, &scene), StageLabel::Place);
        s.held = None;
        s.objects[task.object] = site;
        assert_eq!(stage_label(&s, task, &scene), StageLabel::Done);
    }

    #[test]
    fn expert_closes_on_object_and_heads_to_goal() {
        let scene = scene0();
        let task = &scene.tasks()[1];
        let mut s = reset(&scene, 0.0, 0);
        s.gripper = scene.objects[task.object];
        assert_eq!(scripted_expert(&s, task, &scene, 0.0, 0).command, GripCommand::Close);
        s.held = Some(task.object);
        s.grip_closed = true;
        let a = scripted_expert(&s, task, &scene, 0.0, 0);
        let to_goal = geom::sub(scene.sites[task.site], s.gripper);
        assert!(geom::angle_deg(a.displacement, to_goal) < 1.0);
        assert!(geom::norm(a.displacement) <= scene.a_max + 1e-12);
    }

    #[test]
    fn expert_success_rate_over_noisy_episodes() {
        let scene = SceneConfig::default();
        let mut ok = 0;
        let mut total = 0;
        for task in scene.tasks() {
            for demo in 0..50u64 {
                let seed = seed::derive(11, "demo", demo * 8 + task.id as u64);
                let mut s = reset(&scene, 0.02, seed);
                let mut done = false;
                while s.step < scene.horizon && !done {
                    let a = scripted_expert(&s, &task, &scene, 0.01, seed::derive(seed, "act", s.step.into()));
                    s = step(&s, &a, &scene, seed::derive(seed, "env", s.step.into())).unwrap();
                    done = is_success(&s, &task, &scene);
                }
                ok += usize::from(done);
                total += 1;
            }
        }
        assert!(ok as f64 / total as f64 >= 0.98, "{ok}/{total}");
    }

    #[test]
    fn scene_json_keys_are_exact() {
        let json = serde_json::to_string(&SceneConfig::default()).unwrap();
        let keys = ["bounds", "objects", "sites", "r_grasp", "r_goal", "d_place", "a_max", "sigma_env", "horizon"];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{json}");
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v.as_object().unwrap().len(), keys.len());
        let back: SceneConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SceneConfig::default());
    }
}
