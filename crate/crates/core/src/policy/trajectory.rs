use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::worldsim::{self, Action, SceneConfig, TaskSpec, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Demo,
    Steergen,
    Srbc,
    Rollout,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Demo => "demo",
            SourceTag::Steergen => "steergen",
            SourceTag::Srbc => "srbc",
            SourceTag::Rollout => "rollout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u32,
    pub state: WorldState,
    pub action: Action,
    pub instruction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub final_state: WorldState,
    /// Step at which the active instruction changed.
    pub switch_step: Option<u32>,
    /// `is_success` per task on the final state.
    pub success: Vec<bool>,
    /// Per task: success held at some state at or after the switch step.
    pub achieved: Vec<bool>,
    pub source: SourceTag,
    pub seed: u64,
}

impl Trajectory {
    /// Assemble a trajectory, deriving both success vectors from the visited states.
    pub fn assemble(
        records: Vec<Record>,
        final_state: WorldState,
        switch_step: Option<u32>,
        source: SourceTag,
        seed: u64,
        tasks: &[TaskSpec],
        scene: &SceneConfig,
    ) -> Self {
        let from = switch_step.unwrap_or(0);
        let success = tasks.iter().map(|t| worldsim::is_success(&final_state, t, scene)).collect();
        let achieved = tasks
            .iter()
            .map(|t| {
                worldsim::is_success(&final_state, t, scene)
                    || records.iter().filter(|r| r.step >= from).any(|r| worldsim::is_success(&r.state, t, scene))
            })
            .collect();
        Self { records, final_state, switch_step, success, achieved, source, seed }
    }

    /// Records used for fitting: everything from the switch step onward.
    pub fn training_records(&self) -> &[Record] {
        match self.switch_step {
            None => &self.records,
            Some(t) => {
                let first = self.records.partition_point(|r| r.step < t);
                &self.records[first..]
            }
        }
    }

    /// Instruction active after the switch (or throughout).
    pub fn final_instruction(&self) -> Option<usize> {
        self.records.last().map(|r| r.instruction)
    }

    pub fn validate(&self, tasks: &[TaskSpec], scene: &SceneConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.records.windows(2).any(|w| w[0].step >= w[1].step) {
            return bad("record steps are not strictly increasing".into());
        }
        if let Some(r) = self.records.iter().find(|r| r.instruction >= tasks.len()) {
            return Err(Error::UnknownTask(r.instruction));
        }
        let split = self.switch_step.unwrap_or(0);
        for side in [
            self.records.iter().filter(|r| r.step < split).collect::<Vec<_>>(),
            self.records.iter().filter(|r| r.step >= split).collect::<Vec<_>>(),
        ] {
            if side.windows(2).any(|w| w[0].instruction != w[1].instruction) {
                return bad("instruction changes away from the switch marker".into());
            }
        }
        for (k, t) in tasks.iter().enumerate() {
            if self.success.get(k) != Some(&worldsim::is_success(&self.final_state, t, scene)) {
                return bad(format!("success flag for task {k} disagrees with the final state"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub per_task: usize,
    /// Std of the object-start perturbation at reset.
    pub perturb_std: f64,
    /// Std of the displacement noise on executed expert actions. Records keep
    /// the noiseless expert label, so demos carry corrective supervision.
    pub noise_std: f64,
    /// Steps recorded after success while the expert retreats.
    pub done_tail: u32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { per_task: 50, perturb_std: 0.02, noise_std: 0.01, done_tail: 10 }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.per_task >= 1, || "per_task must be at least 1".into())?;
        ensure(self.perturb_std >= 0.0, || "perturb_std must be nonnegative".into())?;
        ensure(self.noise_std >= 0.0, || "noise_std must be nonnegative".into())?;
        Ok(())
    }
}

/// One scripted-expert episode under `task`.
pub fn expert_episode(
    scene: &SceneConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    cfg: &DemoConfig,
    seed: u64,
) -> Trajectory {
    let mut s = worldsim::reset(scene, cfg.perturb_std, seed::derive(seed, "reset", 0));
    let mut records = Vec::new();
    let mut tail = None;
    while s.step < scene.horizon && tail != Some(0) {
        let t = u64::from(s.step);
        let label = worldsim::scripted_expert(&s, task, scene, 0.0, 0);
        let a = worldsim::scripted_expert(&s, task, scene, cfg.noise_std, seed::derive(seed, "act", t));
        let next = worldsim::advance(&s, &a, scene, scene.sigma_env, seed::derive(seed, "env", t));
        records.push(Record { step: s.step, state: s, action: label, instruction: task.id });
        s = next;
        tail = match tail {
            Some(n) => Some(n - 1),
            None if worldsim::is_success(&s, task, scene) => Some(cfg.done_tail),
            None => None,
        };
    }
    Trajectory::assemble(records, s, None, SourceTag::Demo, seed, tasks, scene)
}

/// `per_task` expert demos for every task, task-major order.
pub fn expert_demos(scene: &SceneConfig, tasks: &[TaskSpec], cfg: &DemoConfig, seed: u64) -> Vec<Trajectory> {
    tasks
        .iter()
        .flat_map(|task| {
            (0..cfg.per_task).map(move |n| {
                expert_episode(scene, tasks, task, cfg, seed::derive_path(seed, "demo", &[task.id as u64, n as u64]))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demos_succeed_and_validate() {
        let scene = SceneConfig::default();
        let tasks = scene.tasks();
        let cfg = DemoConfig { per_task: 5, ..DemoConfig::default() };
        let demos = expert_demos(&scene, &tasks, &cfg, 1);
        assert_eq!(demos.len(), 20);
        for d in &demos {
            d.validate(&tasks, &scene).unwrap();
            let k = d.final_instruction().unwrap();
            assert!(d.success[k]);
            let done = d.records.iter().filter(|r| worldsim::is_success(&r.state, &tasks[k], &scene)).count();
            assert_eq!(done as u32, cfg.done_tail);
        }
    }

    #[test]
    fn training_records_skip_the_prefix() {
        let scene = SceneConfig::default();
        let tasks = scene.tasks();
        let mut t = expert_episode(&scene, &tasks, &tasks[0], &DemoConfig::default(), 3);
        assert_eq!(t.training_records().len(), t.records.len());
        t.switch_step = Some(4);
        assert_eq!(t.training_records()[0].step, 4);
        t.switch_step = Some(10_000);
        assert!(t.training_records().is_empty());
    }

    #[test]
    fn validation_catches_broken_trajectories() {
        let scene = SceneConfig::default();
        let tasks = scene.tasks();
        let good = expert_episode(&scene, &tasks, &tasks[1], &DemoConfig::default(), 5);
        let mut t = good.clone();
        t.records[3].instruction = 0;
        assert!(t.validate(&tasks, &scene).is_err());
        let mut t = good.clone();
        t.records[2].step = t.records[1].step;
        assert!(t.validate(&tasks, &scene).is_err());
        let mut t = good.clone();
        t.success[1] = !t.success[1];
        assert!(t.validate(&tasks, &scene).is_err());
        let mut t = good;
        t.switch_step = Some(3);
        for r in &mut t.records[..3] {
            r.instruction = 2;
        }
        t.validate(&tasks, &scene).unwrap();
    }
}
