//! Subcommand bodies. Each reads its inputs from the output directory, writes
//! its artifacts there and returns the JSON summary printed by the CLI.
//!
//! ```text
//! <out>/demos.jsonl                      gen-demos
//! <out>/policy.manifest                  fit
//! <out>/eval/<label>/                    eval-steer: steer_report.json, steer_sets.json,
//!                                        matrix_source<i>.csv, rollouts.csv
//! <out>/cmi/<label>/                     eval-cmi: cmi_sweep.csv, info_bound.json, probes.json
//! <out>/steergen/                        steergen.jsonl, steergen.manifest.json,
//!                                        buffer_cmi.csv, policy.manifest
//! <out>/srbc/                            srbc.jsonl, report.json, policy.manifest
//! <out>/runs/<id>/iter<k>/               resteer: steergen.jsonl, srbc.jsonl,
//!                                        policy.manifest, report.json
//! <out>/experiments/                     h1..h4 .json and .csv
//! <out>/report/                          summary.md, bundle/*.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use steerlab::infometrics::{self, divergence::GridSpec, weights};
use steerlab::policy::{trajectory, SourceTag, Trajectory};
use steerlab::refine::{self, IterationOutcome, IterationReport, LoopConfig};
use steerlab::steerability::{self, PairScr};
use steerlab::steergen::{self, PairCount, Sampler};
use steerlab::worldsim::{World, WorldState};

use crate::config::RunConfig;
use crate::error::{io, Error, Result};
use crate::experiments::{self, Lab};
use crate::store::{self, TrajectoryHeader};
use crate::table;

/// Tolerance added to `Pr[Î ≥ τ]` in the coverage-bound check.
pub const BOUND_TOLERANCE: f64 = 0.05;

pub struct Ctx {
    pub cfg: RunConfig,
    pub world: World,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let world = cfg.world().map_err(Error::Invalid)?;
        let out = cfg.output_dir.clone();
        Ok(Self { cfg, world, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, hint: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing { path: p, hint })
        }
    }

    fn policy_path(&self, given: Option<&Path>, default: &str, hint: &'static str) -> Result<PathBuf> {
        match given {
            Some(p) if p.exists() => Ok(p.to_path_buf()),
            Some(p) => Err(Error::Missing { path: p.to_path_buf(), hint }),
            None => self.require(default, hint),
        }
    }

    /// Short name for a policy manifest, used as the eval subdirectory.
    pub fn label(&self, manifest: &Path) -> String {
        let rel = manifest.strip_prefix(&self.out).unwrap_or(manifest);
        let dir = rel.parent().map(|d| d.to_string_lossy().replace(['/', '\\'], "-")).unwrap_or_default();
        let stem = rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match (dir.as_str(), stem.as_str()) {
            ("", "policy") => "base".into(),
            (d, "policy") => d.into(),
            ("", s) => s.into(),
            (d, s) => format!("{d}-{s}"),
        }
    }
}

pub fn gen_demos(ctx: &Ctx) -> Result<Value> {
    let seed = ctx.cfg.seeds().demos;
    let demos = trajectory::expert_demos(&ctx.world.scene, &ctx.world.tasks, &ctx.cfg.demos, seed);
    let header = TrajectoryHeader::new(&ctx.world.scene, &ctx.cfg.demos, SourceTag::Demo, seed, &demos);
    let path = ctx.path("demos.jsonl");
    let sha = store::save_trajectories(&path, &header, &demos)?;
    Ok(json!({
        "trajectories": demos.len(),
        "records": header.records,
        "seed": seed,
        "path": path,
        "sha256": sha,
    }))
}

pub fn fit(ctx: &Ctx) -> Result<Value> {
    let demos = ctx.require("demos.jsonl", "gen-demos")?;
    let path = ctx.path("policy.manifest");
    let w = ctx.cfg.refine.weights.demo;
    let loaded = store::save_policy(&path, &ctx.world, ctx.cfg.policy, &[(demos, SourceTag::Demo, w)])?;
    Ok(json!({ "records": loaded.policy.n_records(), "path": path }))
}

pub fn eval_steer(ctx: &Ctx, policy: Option<&Path>) -> Result<Value> {
    let manifest = ctx.policy_path(policy, "policy.manifest", "fit")?;
    let loaded = store::load_policy(&manifest, &ctx.world)?;
    let label = ctx.label(&manifest);
    let dir = ctx.path(&format!("eval/{label}"));
    let ecfg = ctx.cfg.eval_config();
    let probes = steerability::build_probe_set(&loaded.policy, &ctx.world, &ecfg);
    let sets = steerability::compute_steer_sets(&loaded.policy, &ctx.world, &probes, &ecfg);
    let (report, logs) = steerability::evaluate_logged(&loaded.policy, &ctx.world, &ecfg, Some(&sets));
    let expected = steerability::expected_rollouts(ctx.world.n_tasks(), &ecfg);
    if logs.len() != expected {
        return Err(Error::Invalid(format!("logged {} rollouts, protocol requires {expected}", logs.len())));
    }
    for m in &report.matrices {
        store::write_atomic(&dir.join(format!("matrix_source{}.csv", m.source)), table::matrix_csv(m).as_bytes())?;
    }
    store::write_atomic(&dir.join("rollouts.csv"), table::rollouts_csv(&logs).as_bytes())?;
    store::write_json(&dir.join("steer_sets.json"), &sets)?;
    store::write_json(&dir.join("steer_report.json"), &report)?;
    let per_source: Vec<usize> = report.matrices.iter().map(|m| m.rollouts).collect();
    log::info!("eval-steer: {} rollouts ({per_source:?} per source)", report.rollouts);
    Ok(json!({
        "policy": label,
        "score": report.score,
        "rollouts": report.rollouts,
        "expected_rollouts": expected,
        "per_source": per_source,
        "probes": probes.len(),
        "dir": dir,
    }))
}

/// Summary persisted next to a CMI sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiSummary {
    pub policy: String,
    pub n_states: usize,
    pub mean_cmi: f64,
    pub mean_normalized: Option<f64>,
    pub bound_satisfied: bool,
    pub min_pinsker_margin: Option<f64>,
}

pub fn eval_cmi(ctx: &Ctx, policy: Option<&Path>) -> Result<Value> {
    let manifest = ctx.policy_path(policy, "policy.manifest", "fit")?;
    let loaded = store::load_policy(&manifest, &ctx.world)?;
    let label = ctx.label(&manifest);
    let dir = ctx.path(&format!("cmi/{label}"));
    let ecfg = ctx.cfg.eval_config();
    let ccfg = ctx.cfg.cmi_config();
    let probes = steerability::build_probe_set(&loaded.policy, &ctx.world, &ecfg);
    let states: Vec<&WorldState> = probes.probes.iter().map(|p| &p.state).collect();
    let sweep = infometrics::cmi_sweep(&loaded.policy, &states, &ccfg);
    let input: Vec<Option<f64>> = sweep.iter().map(|c| c.estimate.weight_input(ccfg.weight_input)).collect();
    let q = weights::sampling_weights(&input, ccfg.t_g)?.q;
    let sets = steerability::compute_steer_sets(&loaded.policy, &ctx.world, &probes, &ecfg);
    let bound = infometrics::bound::info_bound_report(
        &loaded.policy,
        &probes,
        &sets,
        &sweep,
        &GridSpec::default(),
        BOUND_TOLERANCE,
    )?;
    let normalized: Vec<f64> = sweep.iter().filter_map(|c| c.estimate.normalized).collect();
    let summary = CmiSummary {
        policy: label.clone(),
        n_states: sweep.len(),
        mean_cmi: experiments::mean(&sweep.iter().map(|c| c.estimate.cmi).collect::<Vec<_>>()),
        mean_normalized: (!normalized.is_empty()).then(|| experiments::mean(&normalized)),
        bound_satisfied: bound.all_satisfied(),
        min_pinsker_margin: bound.min_pinsker_margin(),
    };
    store::write_atomic(&dir.join("cmi_sweep.csv"), table::cmi_csv(&probes, &sweep, &q).as_bytes())?;
    store::write_json(&dir.join("info_bound.json"), &bound)?;
    store::write_json(&dir.join("summary.json"), &summary)?;
    Ok(json!({
        "policy": label,
        "states": summary.n_states,
        "mean_cmi": summary.mean_cmi,
        "bound_satisfied": summary.bound_satisfied,
        "min_pinsker_margin": summary.min_pinsker_margin,
        "dir": dir,
    }))
}

/// Sidecar of a SteerGen dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerGenManifest {
    pub sampler: Sampler,
    pub budget: usize,
    pub partial: bool,
    pub segments: usize,
    pub trajectories: usize,
    pub counts: Vec<PairCount>,
    pub dataset: String,
    pub cmi_snapshot: String,
}

pub fn steergen(ctx: &Ctx, policy: Option<&Path>) -> Result<Value> {
    let manifest = ctx.policy_path(policy, "policy.manifest", "fit")?;
    let base = store::load_policy(&manifest, &ctx.world)?;
    let demos = base.tagged(SourceTag::Demo);
    let gen = ctx.cfg.gen_config();
    let ccfg = ctx.cfg.cmi_config();
    let mut buffer = steergen::build_buffer(&base.policy, &ctx.world, &gen);
    if gen.sampler == Sampler::CmiGuided {
        steergen::score_buffer(&base.policy, &mut buffer, &ccfg);
    }
    let ds = steergen::generate_dataset(&ctx.world, &demos, &buffer, Some(&base.policy), &gen, &ccfg)?;
    let trajs = ds.trajectories();
    let dir = ctx.path("steergen");
    let file = dir.join("steergen.jsonl");
    let header =
        TrajectoryHeader::new(&ctx.world.scene, &(base.manifest.params, gen), SourceTag::Steergen, gen.seed, &trajs);
    store::save_trajectories(&file, &header, &trajs)?;
    let snapshot = buffer_cmi_csv(&buffer, ccfg.weight_input, ccfg.t_g);
    store::write_atomic(&dir.join("buffer_cmi.csv"), snapshot.as_bytes())?;
    let side = SteerGenManifest {
        sampler: ds.sampler,
        budget: ds.budget,
        partial: ds.partial,
        segments: ds.segments.len(),
        trajectories: trajs.len(),
        counts: ds.counts.clone(),
        dataset: "steergen.jsonl".into(),
        cmi_snapshot: "buffer_cmi.csv".into(),
    };
    store::write_json(&dir.join("steergen.manifest.json"), &side)?;
    let w = ctx.cfg.refine.weights;
    let mut files = base.files();
    files.push((file, SourceTag::Steergen, w.steergen));
    let refit = store::save_policy(&dir.join("policy.manifest"), &ctx.world, base.manifest.params, &files)?;
    Ok(json!({
        "sampler": ds.sampler.as_str(),
        "budget": ds.budget,
        "segments": ds.segments.len(),
        "trajectories": trajs.len(),
        "partial": ds.partial,
        "records": refit.policy.n_records(),
        "dir": dir,
    }))
}

fn buffer_cmi_csv(buffer: &steergen::Buffer, which: infometrics::WeightInput, t_g: f64) -> String {
    let mut out = String::from("candidate,task_id,timestep,cmi,cmi_normalized,q\n");
    let Some(cmi) = &buffer.cmi else {
        return out;
    };
    let input: Vec<Option<f64>> = cmi.iter().map(|c| c.estimate.weight_input(which)).collect();
    let q = weights::sampling_weights(&input, t_g).map(|w| w.q).unwrap_or_default();
    for (k, (c, cand)) in cmi.iter().zip(&buffer.candidates).enumerate() {
        let norm = c.estimate.normalized.map_or_else(String::new, |v| v.to_string());
        let qk = q.get(k).map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!("{k},{},{},{},{norm},{qk}\n", cand.task, buffer.state(k).step, c.estimate.cmi));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrbcReport {
    pub attempted: usize,
    pub kept: usize,
    pub success_rate: Option<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub unchanged: bool,
}

pub fn srbc(ctx: &Ctx, policy: Option<&Path>) -> Result<Value> {
    let manifest = ctx.policy_path(policy, "steergen/policy.manifest", "steergen")?;
    let loaded = store::load_policy(&manifest, &ctx.world)?;
    let rcfg = ctx.cfg.refine_config();
    let ecfg = ctx.cfg.eval_config();
    let sets = rcfg.restrict_to_unsteerable.then(|| refine::scenario_sets(&loaded.policy, &ctx.world, &ecfg, &rcfg));
    let pairs = refine::srbc_pairs(sets.as_ref(), ctx.world.n_tasks());
    let outcome = refine::collect_srbc(&loaded.policy, &ctx.world, &pairs, &ecfg, &rcfg);
    let dir = ctx.path("srbc");
    let file = dir.join("srbc.jsonl");
    let header = TrajectoryHeader::new(
        &ctx.world.scene,
        &(loaded.manifest.params, rcfg),
        SourceTag::Srbc,
        rcfg.seed,
        &outcome.kept,
    );
    store::save_trajectories(&file, &header, &outcome.kept)?;
    let report = SrbcReport {
        attempted: outcome.attempted,
        kept: outcome.kept.len(),
        success_rate: outcome.success_rate(),
        pairs: outcome.pairs.clone(),
        unchanged: outcome.unchanged,
    };
    store::write_json(&dir.join("report.json"), &report)?;
    let mut files = loaded.files();
    files.push((file, SourceTag::Srbc, rcfg.weights.srbc));
    if outcome.unchanged {
        log::warn!("SRBC kept no rollouts; the refit equals the input policy");
    }
    let refit = store::save_policy(&dir.join("policy.manifest"), &ctx.world, loaded.manifest.params, &files)?;
    Ok(json!({
        "attempted": report.attempted,
        "kept": report.kept,
        "success_rate": report.success_rate,
        "unchanged": report.unchanged,
        "records": refit.policy.n_records(),
        "dir": dir,
    }))
}

pub fn resteer(ctx: &Ctx, run_id: &str, policy: Option<&Path>) -> Result<Value> {
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(Error::Invalid(format!("invalid run id {run_id:?}")));
    }
    let manifest = ctx.policy_path(policy, "policy.manifest", "fit")?;
    let base = store::load_policy(&manifest, &ctx.world)?;
    let demos = base.tagged(SourceTag::Demo);
    let run_dir = ctx.path(&format!("runs/{run_id}"));
    let (gen, cmi, rcfg, ecfg) =
        (ctx.cfg.gen_config(), ctx.cfg.cmi_config(), ctx.cfg.refine_config(), ctx.cfg.eval_config());
    let weights = rcfg.weights;
    let mut files = base.files();
    files.retain(|(_, tag, _)| *tag == SourceTag::Demo);
    let mut written = Vec::new();
    let mut sink = |o: &IterationOutcome| -> steerlab::Result<()> {
        let k = o.report.iteration;
        let done = run_dir.join(format!("iter{k}"));
        let staging = run_dir.join(format!("iter{k}.partial"));
        let r = (|| -> Result<()> {
            if staging.exists() {
                fs::remove_dir_all(&staging).map_err(io(&staging))?;
            }
            store::write_json(&staging.join("report.json"), &o.report)?;
            let Some(_) = &o.policy else {
                return Ok(());
            };
            let sg = o.steergen.trajectories();
            let sg_file = staging.join("steergen.jsonl");
            let h = TrajectoryHeader::new(
                &ctx.world.scene,
                &(base.manifest.params, o.report.seeds),
                SourceTag::Steergen,
                o.report.seeds.steergen,
                &sg,
            );
            store::save_trajectories(&sg_file, &h, &sg)?;
            let kept: &[Trajectory] = o.srbc.as_ref().map_or(&[], |s| &s.kept);
            let srbc_file = staging.join("srbc.jsonl");
            let h = TrajectoryHeader::new(
                &ctx.world.scene,
                &(base.manifest.params, o.report.seeds),
                SourceTag::Srbc,
                o.report.seeds.srbc,
                kept,
            );
            store::save_trajectories(&srbc_file, &h, kept)?;
            let mut listed = files.clone();
            listed.push((sg_file, SourceTag::Steergen, weights.steergen));
            listed.push((srbc_file, SourceTag::Srbc, weights.srbc));
            store::save_policy(&staging.join("policy.manifest"), &ctx.world, base.manifest.params, &listed)?;
            if done.exists() {
                fs::remove_dir_all(&done).map_err(io(&done))?;
            }
            fs::rename(&staging, &done).map_err(io(&done))?;
            files.push((done.join("steergen.jsonl"), SourceTag::Steergen, weights.steergen));
            files.push((done.join("srbc.jsonl"), SourceTag::Srbc, weights.srbc));
            written.push((k, o.wall_time_s));
            Ok(())
        })();
        r.map_err(|e| steerlab::Error::Invalid(e.to_string()))
    };
    let cfg = LoopConfig { gen: &gen, cmi: &cmi, refine: &rcfg, eval: &ecfg };
    let (_, reports) = refine::resteer_loop(&base.policy, &ctx.world, &demos, cfg, &mut sink)?;
    let iterations: Vec<Value> = reports.iter().map(iteration_summary).collect();
    let wall: Vec<f64> = written.iter().map(|w| w.1).collect();
    log::info!("resteer {run_id}: wall times {wall:?}");
    Ok(json!({ "run_id": run_id, "iterations": iterations, "dir": run_dir }))
}

fn iteration_summary(r: &IterationReport) -> Value {
    json!({
        "iteration": r.iteration,
        "score_before": r.score_before,
        "score_after": r.score_after,
        "steergen_added": r.steergen_added,
        "srbc_added": r.srbc_added,
    })
}

pub fn mean_scr(scr: &[PairScr]) -> Option<f64> {
    let v: Vec<f64> = scr.iter().filter_map(|p| p.scr).collect();
    (!v.is_empty()).then(|| experiments::mean(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
}

impl Hypothesis {
    pub fn name(self) -> &'static str {
        match self {
            Hypothesis::H1 => "h1",
            Hypothesis::H2 => "h2",
            Hypothesis::H3 => "h3",
            Hypothesis::H4 => "h4",
        }
    }
}

pub fn experiment(ctx: &Ctx, which: Hypothesis) -> Result<Value> {
    let lab = Lab::new(&ctx.cfg)?;
    let runs = lab.seed_runs()?;
    let dir = ctx.path("experiments");
    let name = which.name();
    let (summary, csv) = match which {
        Hypothesis::H1 => {
            let r = experiments::h1(&lab, &runs)?;
            store::write_json(&dir.join("h1.json"), &r)?;
            let mut csv = String::from("seed,base_score,steergen_score,snippet_score,base_single,steergen_single\n");
            for row in &r.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.seed,
                    row.base.score,
                    row.steergen.score,
                    row.snippet_score,
                    row.base.single,
                    row.steergen.single
                ));
            }
            (json!({ "gain": r.gain, "single_drop": r.single_drop, "pass": r.pass }), csv)
        }
        Hypothesis::H2 => {
            let r = experiments::h2(&lab, &runs)?;
            store::write_json(&dir.join("h2.json"), &r)?;
            let mut csv = String::from("variant,mean_cmi,score\n");
            for v in &r.variants {
                csv.push_str(&format!("{},{},{}\n", v.name, v.mean_cmi, v.mean_score));
            }
            (json!({ "spearman": r.spearman, "variants": r.variants.len(), "pass": r.pass }), csv)
        }
        Hypothesis::H3 => {
            let r = experiments::h3(&lab, &runs)?;
            store::write_json(&dir.join("h3.json"), &r)?;
            let mut csv = String::from("sampler,budget,mean_dataset_size,mean_score,variance\n");
            for p in &r.points {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.sampler.as_str(),
                    p.budget,
                    p.mean_size,
                    p.mean_score,
                    p.variance
                ));
            }
            (json!({ "guided_dominates": r.guided_dominates, "random_noisier": r.random_noisier, "pass": r.pass }), csv)
        }
        Hypothesis::H4 => {
            let r = experiments::h4(&lab, &runs)?;
            store::write_json(&dir.join("h4.json"), &r)?;
            let mut csv = String::from("seed,steergen_score,srbc_score,attempted,kept\n");
            for row in &r.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.seed, row.steergen_score, row.srbc_score, row.attempted, row.kept
                ));
            }
            (json!({ "gain": r.gain, "pass": r.pass }), csv)
        }
    };
    store::write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    let mut s = summary;
    s["experiment"] = json!(name);
    s["seeds"] = json!(runs.len());
    Ok(s)
}
