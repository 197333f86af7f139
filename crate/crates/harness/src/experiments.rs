//! Desk-scale drivers for the four hypotheses.
//!
//! Every driver consumes the same per-seed pipeline ([`SeedRun`]): demos, the
//! demo-only base policy, a CMI-scored start-state buffer, a CMI-guided
//! SteerGen dataset at the configured budget, and the refit on it.
//!
//! - h1: SteerGen policy vs the demo-only base (plus the truncated-snippet baseline).
//! - h2: rank correlation of mean CMI and score over a λ sweep, with and without SteerGen.
//! - h3: CMI-guided vs uniform start-state sampling at several budgets.
//! - h4: one SRBC iteration on top of the SteerGen policy.

use serde::{Deserialize, Serialize};
use steerlab::infometrics::{self, CmiConfig};
use steerlab::policy::{trajectory, ExpertActor, Policy, PolicyParams, Source, Trajectory};
use steerlab::refine::{self, RefineConfig};
use steerlab::seed;
use steerlab::steerability::{self, EvalConfig, ProbeSet, ProbeSpec};
use steerlab::steergen::{self, Buffer, GenConfig, Sampler, SteerGenDataset};
use steerlab::worldsim::{World, WorldState};

use crate::config::RunConfig;
use crate::error::Result;

pub const H1_MIN_GAIN: f64 = 0.10;
pub const H1_MAX_SINGLE_DROP: f64 = 0.05;
pub const H2_MIN_RHO: f64 = 0.6;
pub const H4_MIN_GAIN: f64 = 0.02;

/// Reduced settings pinned by the drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Independent seeds per experiment.
    pub seeds: usize,
    /// Continuations per matrix cell when scoring.
    pub n_repeat: usize,
    /// Reset episodes per task for single-task success.
    pub single_task_n: usize,
    /// Action chunks per instruction when scoring the start-state buffer.
    pub buffer_n_a: usize,
    /// Probe states (from expert rollouts) for the h2 mean-CMI column.
    pub cmi_probe: ProbeSpec,
    pub lambdas: Vec<f64>,
    /// Segments per pair compared in h3.
    pub budgets: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            n_repeat: 4,
            single_task_n: 50,
            buffer_n_a: 16,
            cmi_probe: ProbeSpec { rollouts_per_task: 2, stride: 20 },
            lambdas: vec![0.0, 0.5, 2.0, 8.0],
            budgets: vec![10, 25, 50],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, horizon: u32) -> std::result::Result<(), String> {
        if self.seeds == 0 || self.n_repeat == 0 || self.single_task_n == 0 {
            return Err("seeds, n_repeat and single_task_n must be at least 1".into());
        }
        if self.buffer_n_a < 2 {
            return Err("buffer_n_a must be at least 2".into());
        }
        if self.cmi_probe.rollouts_per_task == 0 || self.cmi_probe.stride == 0 || self.cmi_probe.stride > horizon {
            return Err(format!("cmi_probe needs rollouts_per_task >= 1 and stride in 1..={horizon}"));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err("lambdas must be a nonempty list of finite nonnegative values".into());
        }
        if self.budgets.is_empty() {
            return Err("budgets must be nonempty".into());
        }
        Ok(())
    }
}

/// Seeds of one experiment seed, all derived from its root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub demos: u64,
    pub steergen: u64,
    pub cmi: u64,
    pub eval: u64,
    pub refine: u64,
    pub probe: u64,
}

impl RunSeeds {
    pub fn new(root: u64) -> Self {
        let d = |label| seed::derive(root, label, 0);
        Self {
            root,
            demos: d("demos"),
            steergen: d("steergen"),
            cmi: d("cmi"),
            eval: d("eval"),
            refine: d("refine"),
            probe: d("probe"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub score: f64,
    /// Mean single-task success from reset.
    pub single: f64,
}

/// Shared pipeline output for one seed.
pub struct SeedRun {
    pub index: usize,
    pub seeds: RunSeeds,
    pub demos: Vec<Trajectory>,
    pub base: Policy,
    pub buffer: Buffer,
    pub steergen: SteerGenDataset,
    pub steergen_policy: Policy,
    pub base_eval: PolicyEval,
    pub steergen_eval: PolicyEval,
}

/// Settings and world shared by the drivers.
pub struct Lab {
    pub world: World,
    pub cfg: RunConfig,
}

impl Lab {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let world = cfg.world().map_err(crate::error::Error::Invalid)?;
        Ok(Self { world, cfg: cfg.clone() })
    }

    pub fn exp(&self) -> &ExperimentConfig {
        &self.cfg.experiment
    }

    pub fn score_config(&self, seeds: &RunSeeds) -> EvalConfig {
        EvalConfig { n_repeat: self.exp().n_repeat, seed: seeds.eval, ..self.cfg.eval }
    }

    pub fn buffer_cmi(&self, seeds: &RunSeeds) -> CmiConfig {
        CmiConfig { n_a: self.exp().buffer_n_a, seed: seeds.cmi, ..self.cfg.cmi }
    }

    pub fn gen_config(&self, seeds: &RunSeeds) -> GenConfig {
        GenConfig { seed: seeds.steergen, ..self.cfg.steergen }
    }

    pub fn refine_config(&self, seeds: &RunSeeds) -> RefineConfig {
        RefineConfig { seed: seeds.refine, ..self.cfg.refine }
    }

    pub fn evaluate(&self, policy: &Policy, seeds: &RunSeeds, with_single: bool) -> PolicyEval {
        let ecfg = self.score_config(seeds);
        let score = steerability::steerability_score(policy, &self.world, &ecfg);
        let single = if with_single {
            let s = steerability::single_task_success(
                policy,
                &self.world,
                self.exp().single_task_n,
                ecfg.perturb_std,
                ecfg.seed,
            );
            s.iter().sum::<f64>() / s.len() as f64
        } else {
            f64::NAN
        };
        PolicyEval { score, single }
    }

    pub fn refit(&self, run: &SeedRun, extra: &[Trajectory], params: PolicyParams) -> Result<Policy> {
        let w = self.cfg.refine.weights;
        let sources = [Source::new(&run.demos, w.demo), Source::new(extra, w.steergen)];
        Ok(steerlab::policy::fit(&self.world.scene, &self.world.tasks, params, &sources)?)
    }

    /// The shared pipeline for experiment seed `index`.
    pub fn seed_run(&self, index: usize) -> Result<SeedRun> {
        let seeds = RunSeeds::new(self.cfg.experiment_seed(index));
        let w = &self.world;
        let demos = trajectory::expert_demos(&w.scene, &w.tasks, &self.cfg.demos, seeds.demos);
        let base = steerlab::policy::fit(&w.scene, &w.tasks, self.cfg.policy, &[Source::new(&demos, 1.0)])?;
        let gen = self.gen_config(&seeds);
        let cmi = self.buffer_cmi(&seeds);
        let mut buffer = steergen::build_buffer(&base, w, &gen);
        steergen::score_buffer(&base, &mut buffer, &cmi);
        let dataset = steergen::generate_dataset(w, &demos, &buffer, Some(&base), &gen, &cmi)?;
        let mut run = SeedRun {
            index,
            seeds,
            demos,
            base_eval: PolicyEval { score: f64::NAN, single: f64::NAN },
            steergen_eval: PolicyEval { score: f64::NAN, single: f64::NAN },
            steergen_policy: base.clone(),
            base,
            buffer,
            steergen: dataset,
        };
        run.steergen_policy = self.refit(&run, &run.steergen.trajectories(), self.cfg.policy)?;
        run.base_eval = self.evaluate(&run.base, &seeds, true);
        run.steergen_eval = self.evaluate(&run.steergen_policy, &seeds, true);
        log::info!(
            "seed {index}: base {:.4} steergen {:.4} ({} segments)",
            run.base_eval.score,
            run.steergen_eval.score,
            run.steergen.segments.len()
        );
        Ok(run)
    }

    pub fn seed_runs(&self) -> Result<Vec<SeedRun>> {
        (0..self.exp().seeds).map(|s| self.seed_run(s)).collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && xs[order[end + 1]] == xs[order[k]] {
            end += 1;
        }
        let r = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            out[i] = r;
        }
        k = end + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Row {
    pub seed: usize,
    pub base: PolicyEval,
    pub steergen: PolicyEval,
    pub snippet_score: f64,
    pub segments: usize,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Report {
    pub budget: usize,
    pub rows: Vec<H1Row>,
    pub base_score: f64,
    pub steergen_score: f64,
    pub snippet_score: f64,
    pub gain: f64,
    pub single_drop: f64,
    pub pass: bool,
}

pub fn h1(lab: &Lab, runs: &[SeedRun]) -> Result<H1Report> {
    let mut rows = Vec::new();
    for run in runs {
        let snippets = steergen::cast_snippets(&run.steergen, lab.cfg.steergen.snippet_len)?;
        let snip = lab.refit(run, &snippets, lab.cfg.policy)?;
        rows.push(H1Row {
            seed: run.index,
            base: run.base_eval,
            steergen: run.steergen_eval,
            snippet_score: lab.evaluate(&snip, &run.seeds, false).score,
            segments: run.steergen.segments.len(),
            partial: run.steergen.partial,
        });
    }
    let col = |f: &dyn Fn(&H1Row) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let base_score = col(&|r| r.base.score);
    let steergen_score = col(&|r| r.steergen.score);
    let single_drop = col(&|r| r.base.single - r.steergen.single);
    let gain = steergen_score - base_score;
    Ok(H1Report {
        budget: lab.cfg.steergen.budget,
        snippet_score: col(&|r| r.snippet_score),
        base_score,
        steergen_score,
        gain,
        single_drop,
        pass: gain >= H1_MIN_GAIN && single_drop <= H1_MAX_SINGLE_DROP,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Variant {
    pub name: String,
    pub lambda: f64,
    pub steergen: bool,
    /// Per-seed mean CMI over the probe states.
    pub cmi: Vec<f64>,
    pub scores: Vec<f64>,
    pub mean_cmi: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Report {
    pub variants: Vec<H2Variant>,
    pub n_probe_states: usize,
    pub spearman: Option<f64>,
    pub pass: bool,
}

/// Expert-rollout probe states shared by every variant of a seed.
pub fn reference_probes(lab: &Lab, seeds: &RunSeeds) -> ProbeSet {
    let expert = ExpertActor {
        scene: lab.world.scene.clone(),
        tasks: lab.world.tasks.clone(),
        noise_std: lab.cfg.demos.noise_std,
    };
    let ecfg = EvalConfig { probe: lab.exp().cmi_probe, seed: seeds.probe, ..lab.cfg.eval };
    steerability::build_probe_set(&expert, &lab.world, &ecfg)
}

pub fn mean_cmi(policy: &Policy, probes: &ProbeSet, cfg: &CmiConfig) -> f64 {
    let states: Vec<&WorldState> = probes.probes.iter().map(|p| &p.state).collect();
    let sweep = infometrics::cmi_sweep(policy, &states, cfg);
    mean(&sweep.iter().map(|c| c.estimate.cmi).collect::<Vec<_>>())
}

pub fn h2(lab: &Lab, runs: &[SeedRun]) -> Result<H2Report> {
    let mut variants: Vec<H2Variant> = Vec::new();
    for steergen in [false, true] {
        for &lambda in &lab.exp().lambdas {
            let kind = if steergen { "steergen" } else { "demo" };
            variants.push(H2Variant {
                name: format!("{kind}-lambda-{lambda}"),
                lambda,
                steergen,
                cmi: Vec::new(),
                scores: Vec::new(),
                mean_cmi: 0.0,
                mean_score: 0.0,
            });
        }
    }
    let mut n_probe_states = 0;
    for run in runs {
        let probes = reference_probes(lab, &run.seeds);
        n_probe_states = probes.len();
        let cmi = CmiConfig { seed: seed::derive(run.seeds.cmi, "probe", 0), ..lab.cfg.cmi };
        for v in &mut variants {
            let trained = if v.steergen { &run.steergen_policy } else { &run.base };
            let params = PolicyParams { lambda: v.lambda, ..*trained.params() };
            let score = if params == *trained.params() {
                if v.steergen {
                    run.steergen_eval.score
                } else {
                    run.base_eval.score
                }
            } else {
                lab.evaluate(&trained.with_params(params)?, &run.seeds, false).score
            };
            let policy = trained.with_params(params)?;
            v.cmi.push(mean_cmi(&policy, &probes, &cmi));
            v.scores.push(score);
        }
        log::info!("h2 seed {} done", run.index);
    }
    for v in &mut variants {
        v.mean_cmi = mean(&v.cmi);
        v.mean_score = mean(&v.scores);
    }
    let x: Vec<f64> = variants.iter().map(|v| v.mean_cmi).collect();
    let y: Vec<f64> = variants.iter().map(|v| v.mean_score).collect();
    let rho = spearman(&x, &y);
    Ok(H2Report { n_probe_states, pass: rho.is_some_and(|r| r >= H2_MIN_RHO), spearman: rho, variants })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H3Point {
    pub sampler: Sampler,
    pub budget: usize,
    /// Per seed.
    pub dataset_sizes: Vec<usize>,
    pub scores: Vec<f64>,
    pub mean_size: f64,
    pub mean_score: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H3Report {
    pub points: Vec<H3Point>,
    /// Guided mean is at least the random mean at every budget.
    pub guided_dominates: bool,
    /// Random variance is at least the guided variance at the smallest budget.
    pub random_noisier: bool,
    pub pass: bool,
}

impl H3Report {
    pub fn point(&self, sampler: Sampler, budget: usize) -> Option<&H3Point> {
        self.points.iter().find(|p| p.sampler == sampler && p.budget == budget)
    }
}

pub fn h3(lab: &Lab, runs: &[SeedRun]) -> Result<H3Report> {
    let mut budgets = lab.exp().budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let mut points = Vec::new();
    for &budget in &budgets {
        for sampler in [Sampler::CmiGuided, Sampler::UniformRandom] {
            points.push(H3Point {
                sampler,
                budget,
                dataset_sizes: Vec::new(),
                scores: Vec::new(),
                mean_size: 0.0,
                mean_score: 0.0,
                variance: 0.0,
            });
        }
    }
    for run in runs {
        for p in &mut points {
            let gen = GenConfig { budget: p.budget, sampler: p.sampler, ..lab.gen_config(&run.seeds) };
            let (size, score) = if gen == lab.gen_config(&run.seeds) {
                (run.steergen.trajectories().len(), run.steergen_eval.score)
            } else {
                let cmi = lab.buffer_cmi(&run.seeds);
                let ds = steergen::generate_dataset(&lab.world, &run.demos, &run.buffer, Some(&run.base), &gen, &cmi)?;
                let trajs = ds.trajectories();
                let policy = lab.refit(run, &trajs, lab.cfg.policy)?;
                (trajs.len(), lab.evaluate(&policy, &run.seeds, false).score)
            };
            p.dataset_sizes.push(size);
            p.scores.push(score);
        }
        log::info!("h3 seed {} done", run.index);
    }
    for p in &mut points {
        p.mean_size = mean(&p.dataset_sizes.iter().map(|&s| s as f64).collect::<Vec<_>>());
        p.mean_score = mean(&p.scores);
        p.variance = variance(&p.scores);
    }
    let get = |s, b| points.iter().find(|p: &&H3Point| p.sampler == s && p.budget == b).expect("point exists");
    let guided_dominates =
        budgets.iter().all(|&b| get(Sampler::CmiGuided, b).mean_score >= get(Sampler::UniformRandom, b).mean_score);
    let smallest = budgets[0];
    let random_noisier = get(Sampler::UniformRandom, smallest).variance >= get(Sampler::CmiGuided, smallest).variance;
    Ok(H3Report { pass: guided_dominates && random_noisier, guided_dominates, random_noisier, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H4Row {
    pub seed: usize,
    pub steergen_score: f64,
    pub srbc_score: f64,
    pub attempted: usize,
    pub kept: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H4Report {
    pub rows: Vec<H4Row>,
    pub steergen_score: f64,
    pub srbc_score: f64,
    pub gain: f64,
    pub pass: bool,
}

pub fn h4(lab: &Lab, runs: &[SeedRun]) -> Result<H4Report> {
    let mut rows = Vec::new();
    for run in runs {
        let rcfg = lab.refine_config(&run.seeds);
        let ecfg = lab.score_config(&run.seeds);
        let sets =
            rcfg.restrict_to_unsteerable.then(|| refine::scenario_sets(&run.steergen_policy, &lab.world, &ecfg, &rcfg));
        let sg = run.steergen.trajectories();
        let (out, policy) = refine::srbc_iteration(
            &run.steergen_policy,
            &lab.world,
            &run.demos,
            &sg,
            &[],
            sets.as_ref(),
            &ecfg,
            &rcfg,
        )?;
        let score = lab.evaluate(&policy, &run.seeds, false).score;
        log::info!("h4 seed {}: {:.4} -> {score:.4}", run.index, run.steergen_eval.score);
        rows.push(H4Row {
            seed: run.index,
            steergen_score: run.steergen_eval.score,
            srbc_score: score,
            attempted: out.attempted,
            kept: out.kept.len(),
            pairs: out.pairs.len(),
        });
    }
    let steergen_score = mean(&rows.iter().map(|r| r.steergen_score).collect::<Vec<_>>());
    let srbc_score = mean(&rows.iter().map(|r| r.srbc_score).collect::<Vec<_>>());
    let gain = srbc_score - steergen_score;
    Ok(H4Report { rows, steergen_score, srbc_score, gain, pass: gain >= H4_MIN_GAIN })
}
