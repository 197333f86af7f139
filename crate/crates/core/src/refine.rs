//! Iterative refinement: SteerGen augmentation followed by
//! success-filtered behaviour cloning on switched rollouts (SRBC).

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::infometrics::CmiConfig;
use crate::par;
use crate::policy::{self, Policy, Source, SourceTag, Trajectory};
use crate::seed;
use crate::steerability::{self, EvalConfig, PairScr, ProbeSet, ProbeSpec, SteerSets};
use crate::steergen::{self, GenConfig, SteerGenDataset};
use crate::worldsim::{self, World};

/// Relative source weights used for every refit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceWeights {
    pub demo: f64,
    pub steergen: f64,
    pub srbc: f64,
}

impl Default for SourceWeights {
    fn default() -> Self {
        Self { demo: 1.0, steergen: 3.0, srbc: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Switched rollouts per SRBC iteration.
    pub n_srbc: usize,
    pub weights: SourceWeights,
    /// Disables SRBC entirely, leaving SteerGen-only refinement.
    pub srbc_enabled: bool,
    /// Only sample pairs whose SCR on the scenario probe set is below 1.
    pub restrict_to_unsteerable: bool,
    /// Probe states and membership rollouts for that SCR estimate.
    pub scr_probe: ProbeSpec,
    pub scr_n_est: usize,
    /// Store each kept action's noiseless component mean instead of the executed draw.
    pub denoise_labels: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            n_srbc: 4800,
            weights: SourceWeights::default(),
            srbc_enabled: true,
            restrict_to_unsteerable: true,
            scr_probe: ProbeSpec { rollouts_per_task: 2, stride: 10 },
            scr_n_est: 5,
            denoise_labels: true,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.iterations >= 1, || "iteration count must be at least 1".into())?;
        let w = self.weights;
        for (name, v) in [("demo", w.demo), ("steergen", w.steergen), ("srbc", w.srbc)] {
            ensure(v >= 0.0 && v.is_finite(), || format!("{name} weight must be finite and nonnegative, got {v}"))?;
        }
        ensure(self.scr_n_est >= 1, || "scr_n_est must be at least 1".into())?;
        ensure(self.scr_probe.stride >= 1, || "scr probe stride must be at least 1".into())?;
        Ok(())
    }
}

/// One sampled switch scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub i: usize,
    pub j: usize,
    pub t: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrbcOutcome {
    /// Kept rollouts; only their post-switch records train.
    pub kept: Vec<Trajectory>,
    pub attempted: usize,
    pub pairs: Vec<(usize, usize)>,
    /// No rollout succeeded, so the policy was returned unchanged.
    pub unchanged: bool,
}

impl SrbcOutcome {
    pub fn success_rate(&self) -> Option<f64> {
        (self.attempted > 0).then(|| self.kept.len() as f64 / self.attempted as f64)
    }
}

/// Ordered pairs eligible for SRBC sampling.
pub fn srbc_pairs(sets: Option<&SteerSets>, n_tasks: usize) -> Vec<(usize, usize)> {
    (0..n_tasks)
        .flat_map(|i| (0..n_tasks).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter(|&(i, j)| sets.is_none_or(|s| steerability::compute_scr(s, i, j).is_none_or(|scr| scr < 1.0)))
        .collect()
}

/// Scenario probe set and membership estimates used to pick SRBC pairs.
pub fn scenario_sets(policy: &Policy, world: &World, eval: &EvalConfig, cfg: &RefineConfig) -> SteerSets {
    let ecfg =
        EvalConfig { probe: cfg.scr_probe, n_est: cfg.scr_n_est, seed: seed::derive(cfg.seed, "scr", 0), ..*eval };
    let probes = steerability::build_probe_set(policy, world, &ecfg);
    steerability::compute_steer_sets(policy, world, &probes, &ecfg)
}

/// Roll `n_srbc` switched scenarios drawn uniformly from `pairs` × the
/// evaluation grid, keeping those that complete the target task after the switch.
pub fn collect_srbc(
    policy: &Policy,
    world: &World,
    pairs: &[(usize, usize)],
    eval: &EvalConfig,
    cfg: &RefineConfig,
) -> SrbcOutcome {
    let steps = eval.grid.steps();
    if pairs.is_empty() || steps.is_empty() || cfg.n_srbc == 0 {
        return SrbcOutcome { kept: Vec::new(), attempted: 0, pairs: pairs.to_vec(), unchanged: true };
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, "scenario", 0));
    let scenarios: Vec<Scenario> = (0..cfg.n_srbc)
        .map(|_| {
            let (i, j) = pairs[rng.random_range(0..pairs.len())];
            Scenario { i, j, t: steps[rng.random_range(0..steps.len())] }
        })
        .collect();
    let runs = par::map(scenarios.len(), |n| {
        let sc = scenarios[n];
        let s = seed::derive(cfg.seed, "srbc", n as u64);
        let start = worldsim::reset(&world.scene, eval.perturb_std, seed::derive(s, "reset", 0));
        let mut traj = steerability::switch_from(policy, world, &start, sc.i, sc.j, sc.t, s, true);
        traj.source = SourceTag::Srbc;
        if !(traj.achieved[sc.j] && !traj.training_records().is_empty()) {
            return None;
        }
        if cfg.denoise_labels {
            for r in &mut traj.records {
                r.action = policy.label(&r.state, r.instruction, seed::derive(s, "act", u64::from(r.step)));
            }
        }
        Some(traj)
    });
    let kept: Vec<Trajectory> = runs.into_iter().flatten().collect();
    let unchanged = kept.is_empty();
    SrbcOutcome { kept, attempted: scenarios.len(), pairs: pairs.to_vec(), unchanged }
}

/// Refit on the three datasets at the configured weights.
pub fn refit(
    policy: &Policy,
    world: &World,
    demos: &[Trajectory],
    steergen: &[Trajectory],
    srbc: &[Trajectory],
    weights: &SourceWeights,
) -> Result<Policy> {
    let sources =
        [Source::new(demos, weights.demo), Source::new(steergen, weights.steergen), Source::new(srbc, weights.srbc)];
    policy::fit(&world.scene, &world.tasks, *policy.params(), &sources)
}

/// One SRBC step on top of `policy`, whose training data were `demos` and `steergen`.
///
/// `sets` restricts sampling to pairs with SCR below 1 when given.
#[allow(clippy::too_many_arguments)]
pub fn srbc_iteration(
    policy: &Policy,
    world: &World,
    demos: &[Trajectory],
    steergen: &[Trajectory],
    prior_srbc: &[Trajectory],
    sets: Option<&SteerSets>,
    eval: &EvalConfig,
    cfg: &RefineConfig,
) -> Result<(SrbcOutcome, Policy)> {
    cfg.validate()?;
    let pairs = srbc_pairs(sets, world.n_tasks());
    let outcome = collect_srbc(policy, world, &pairs, eval, cfg);
    if outcome.unchanged {
        log::warn!("SRBC kept no rollouts out of {}; policy unchanged", outcome.attempted);
        return Ok((outcome, policy.clone()));
    }
    let all: Vec<Trajectory> = prior_srbc.iter().chain(&outcome.kept).cloned().collect();
    let refitted = refit(policy, world, demos, steergen, &all, &cfg.weights)?;
    Ok((outcome, refitted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub steergen_added: usize,
    pub srbc_added: usize,
    /// Cumulative sizes after this iteration.
    pub steergen_total: usize,
    pub srbc_total: usize,
    pub srbc_success_rate: Option<f64>,
    pub srbc_unchanged: bool,
    pub score_before: f64,
    pub score_after: f64,
    pub scr_before: Vec<PairScr>,
    pub scr_after: Vec<PairScr>,
    pub seeds: IterationSeeds,
    /// Set when a stage failed and the iteration was abandoned.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSeeds {
    pub steergen: u64,
    pub cmi: u64,
    pub srbc: u64,
    pub eval: u64,
}

/// Everything one loop iteration produced.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub report: IterationReport,
    pub steergen: SteerGenDataset,
    pub srbc: Option<SrbcOutcome>,
    pub steergen_policy: Option<Policy>,
    pub policy: Option<Policy>,
    pub wall_time_s: f64,
}

/// Configuration bundle for [`resteer_loop`].
#[derive(Debug, Clone, Copy)]
pub struct LoopConfig<'a> {
    pub gen: &'a GenConfig,
    pub cmi: &'a CmiConfig,
    pub refine: &'a RefineConfig,
    pub eval: &'a EvalConfig,
}

/// The refinement loop for `refine.iterations` rounds: buffer rollouts, CMI
/// scoring, SteerGen, refit, SRBC, refit. `sink` sees every iteration,
/// including a failed one, before the loop moves on or aborts.
pub fn resteer_loop(
    base: &Policy,
    world: &World,
    demos: &[Trajectory],
    cfg: LoopConfig<'_>,
    sink: &mut dyn FnMut(&IterationOutcome) -> Result<()>,
) -> Result<(Policy, Vec<IterationReport>)> {
    cfg.refine.validate()?;
    cfg.gen.validate()?;
    cfg.cmi.validate()?;
    cfg.eval.validate(world.horizon())?;
    let probes = steerability::build_probe_set(base, world, cfg.eval);
    let mut policy = base.clone();
    let mut steergen_all: Vec<Trajectory> = Vec::new();
    let mut srbc_all: Vec<Trajectory> = Vec::new();
    let mut reports = Vec::new();
    let mut before = measure(&policy, world, &probes, cfg.eval);
    for it in 0..cfg.refine.iterations {
        let clock = Instant::now();
        let k = it as u64;
        let seeds = IterationSeeds {
            steergen: seed::derive(cfg.gen.seed, "iter", k),
            cmi: seed::derive(cfg.cmi.seed, "iter", k),
            srbc: seed::derive(cfg.refine.seed, "iter", k),
            eval: cfg.eval.seed,
        };
        let gen = GenConfig { seed: seeds.steergen, ..*cfg.gen };
        let cmi = CmiConfig { seed: seeds.cmi, ..*cfg.cmi };
        let refine = RefineConfig { seed: seeds.srbc, ..*cfg.refine };
        let mut report = IterationReport {
            iteration: it,
            steergen_added: 0,
            srbc_added: 0,
            steergen_total: steergen_all.len(),
            srbc_total: srbc_all.len(),
            srbc_success_rate: None,
            srbc_unchanged: true,
            score_before: before.0,
            score_after: before.0,
            scr_before: before.1.clone(),
            scr_after: before.1.clone(),
            seeds,
            error: None,
        };
        let stage = (|| -> Result<IterationOutcome> {
            let mut buffer = steergen::build_buffer(&policy, world, &gen);
            steergen::score_buffer(&policy, &mut buffer, &cmi);
            let dataset = steergen::generate_dataset(world, demos, &buffer, Some(&policy), &gen, &cmi)?;
            let added = dataset.trajectories();
            report.steergen_added = added.len();
            steergen_all.extend(added);
            let sg_policy = refit(&policy, world, demos, &steergen_all, &srbc_all, &refine.weights)?;
            let (srbc, next) = if refine.srbc_enabled {
                let sets = refine.restrict_to_unsteerable.then(|| scenario_sets(&sg_policy, world, cfg.eval, &refine));
                let (out, p) = srbc_iteration(
                    &sg_policy,
                    world,
                    demos,
                    &steergen_all,
                    &srbc_all,
                    sets.as_ref(),
                    cfg.eval,
                    &refine,
                )?;
                (Some(out), p)
            } else {
                (None, sg_policy.clone())
            };
            if let Some(o) = &srbc {
                report.srbc_added = o.kept.len();
                report.srbc_success_rate = o.success_rate();
                report.srbc_unchanged = o.unchanged;
                srbc_all.extend(o.kept.iter().cloned());
            }
            Ok(IterationOutcome {
                report: report.clone(),
                steergen: dataset,
                srbc,
                steergen_policy: Some(sg_policy),
                policy: Some(next),
                wall_time_s: 0.0,
            })
        })();
        match stage {
            Ok(mut outcome) => {
                let next = outcome.policy.clone().expect("completed iteration has a policy");
                let after = measure(&next, world, &probes, cfg.eval);
                let r = &mut outcome.report;
                r.steergen_total = steergen_all.len();
                r.srbc_total = srbc_all.len();
                r.score_after = after.0;
                r.scr_after = after.1.clone();
                outcome.wall_time_s = clock.elapsed().as_secs_f64();
                sink(&outcome)?;
                reports.push(outcome.report);
                policy = next;
                before = after;
            }
            Err(e) => {
                report.error = Some(e.to_string());
                let outcome = IterationOutcome {
                    report,
                    steergen: SteerGenDataset::empty(gen.sampler),
                    srbc: None,
                    steergen_policy: None,
                    policy: None,
                    wall_time_s: clock.elapsed().as_secs_f64(),
                };
                sink(&outcome)?;
                return Err(e);
            }
        }
    }
    Ok((policy, reports))
}

/// Score and SCR table on the loop's fixed probe set.
fn measure(policy: &Policy, world: &World, probes: &ProbeSet, eval: &EvalConfig) -> (f64, Vec<PairScr>) {
    let sets = steerability::compute_steer_sets(policy, world, probes, eval);
    let report = steerability::evaluate(policy, world, eval, Some(&sets));
    (report.score, report.scr)
}
