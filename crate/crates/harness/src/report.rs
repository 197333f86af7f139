//! Markdown summary and CSV bundle over a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use steerlab::refine::IterationReport;
use steerlab::steerability::SteerReport;
use steerlab::steergen::Sampler;

use crate::commands::mean_scr;
use crate::error::{io, Result};
use crate::experiments::{self, H1Report, H2Report, H3Report, H4Report};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub artifacts: usize,
    pub missing: Vec<String>,
    pub summary: Option<PathBuf>,
    pub hypotheses: Vec<(String, bool)>,
}

struct Eval {
    label: String,
    report: SteerReport,
    /// Data rows of rollouts.csv, when present.
    logged: Option<usize>,
}

struct Iter {
    run: String,
    report: IterationReport,
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> =
        fs::read_dir(dir).map_err(io(dir))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.is_file() {
        store::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), f4)
}

fn signed(x: f64) -> String {
    format!("{x:+.4}")
}

/// Render `out/report/summary.md` and `out/report/bundle/*.csv`.
pub fn emit_report(out: &Path) -> Result<ReportSummary> {
    let mut missing = Vec::new();
    let mut artifacts = 0;
    for f in ["demos.jsonl", "policy.manifest"] {
        if out.join(f).is_file() {
            artifacts += 1;
        } else {
            missing.push(f.to_string());
        }
    }

    let mut evals = Vec::new();
    for dir in subdirs(&out.join("eval"))? {
        let Some(report) = optional::<SteerReport>(&dir.join("steer_report.json"))? else {
            missing.push(format!("eval/{}/steer_report.json", name(&dir)));
            continue;
        };
        let rollouts = dir.join("rollouts.csv");
        let logged = if rollouts.is_file() {
            Some(fs::read_to_string(&rollouts).map_err(io(&rollouts))?.lines().count().saturating_sub(1))
        } else {
            None
        };
        evals.push(Eval { label: name(&dir), report, logged });
    }
    if evals.is_empty() {
        missing.push("eval/<policy>/steer_report.json".into());
    }
    artifacts += evals.len();

    let mut iters = Vec::new();
    for run in subdirs(&out.join("runs"))? {
        for it in subdirs(&run)? {
            if name(&it).ends_with(".partial") {
                missing.push(format!("runs/{}/{} (incomplete iteration)", name(&run), name(&it)));
                continue;
            }
            match optional::<IterationReport>(&it.join("report.json"))? {
                Some(report) => iters.push(Iter { run: name(&run), report }),
                None => missing.push(format!("runs/{}/{}/report.json", name(&run), name(&it))),
            }
        }
    }
    iters.sort_by(|a, b| (&a.run, a.report.iteration).cmp(&(&b.run, b.report.iteration)));
    artifacts += iters.len();

    let exp = out.join("experiments");
    let h1: Option<H1Report> = optional(&exp.join("h1.json"))?;
    let h2: Option<H2Report> = optional(&exp.join("h2.json"))?;
    let h3: Option<H3Report> = optional(&exp.join("h3.json"))?;
    let h4: Option<H4Report> = optional(&exp.join("h4.json"))?;
    for (k, present) in [("h1", h1.is_some()), ("h2", h2.is_some()), ("h3", h3.is_some()), ("h4", h4.is_some())] {
        if present {
            artifacts += 1;
        } else {
            missing.push(format!("experiments/{k}.json"));
        }
    }

    if artifacts == 0 {
        return Ok(ReportSummary { artifacts, missing, summary: None, hypotheses: Vec::new() });
    }

    let mut md = String::from("# Steerability report\n\n");
    let bundle = out.join("report/bundle");

    md.push_str("## Steerability scores\n\n");
    if evals.is_empty() {
        md.push_str("No evaluations.\n\n");
    } else {
        md.push_str("| policy | score | mean SCR | rollouts |\n|---|---|---|---|\n");
        let mut scores = String::from("policy,score,mean_scr,rollouts\n");
        let mut scr = String::from("policy,task_i,task_j,scr\n");
        for e in &evals {
            let m = mean_scr(&e.report.scr);
            let _ = writeln!(md, "| {} | {} | {} | {} |", e.label, f4(e.report.score), opt4(m), e.report.rollouts);
            let _ = writeln!(
                scores,
                "{},{},{},{}",
                e.label,
                e.report.score,
                m.map_or_else(String::new, |v| v.to_string()),
                e.report.rollouts
            );
            for p in &e.report.scr {
                let _ =
                    writeln!(scr, "{},{},{},{}", e.label, p.i, p.j, p.scr.map_or_else(String::new, |v| v.to_string()));
            }
            for m in &e.report.matrices {
                let file = bundle.join(format!("matrix_{}_source{}.csv", e.label, m.source));
                store::write_atomic(&file, crate::table::matrix_csv(m).as_bytes())?;
            }
        }
        md.push('\n');
        for e in &evals {
            md.push_str("- ");
            md.push_str(&audit_line(e));
            md.push('\n');
        }
        md.push('\n');
        store::write_atomic(&bundle.join("scores.csv"), scores.as_bytes())?;
        store::write_atomic(&bundle.join("scr.csv"), scr.as_bytes())?;
    }

    md.push_str("## Refinement iterations\n\n");
    if iters.is_empty() {
        md.push_str("No refinement runs.\n\n");
    } else {
        md.push_str("| run | iteration | score before | score after | score delta | mean SCR before | mean SCR after | SCR delta |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        let mut csv = String::from("run,iteration,score_before,score_after,task_i,task_j,scr_before,scr_after\n");
        for it in &iters {
            let r = &it.report;
            let (b, a) = (mean_scr(&r.scr_before), mean_scr(&r.scr_after));
            let d = a.zip(b).map(|(a, b)| signed(a - b)).unwrap_or_else(|| "n/a".into());
            let status = if r.error.is_some() { " (failed)" } else { "" };
            let _ = writeln!(
                md,
                "| {} | {}{status} | {} | {} | {} | {} | {} | {d} |",
                it.run,
                r.iteration,
                f4(r.score_before),
                f4(r.score_after),
                signed(r.score_after - r.score_before),
                opt4(b),
                opt4(a)
            );
            for (pb, pa) in r.scr_before.iter().zip(&r.scr_after) {
                let s = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    it.run,
                    r.iteration,
                    r.score_before,
                    r.score_after,
                    pb.i,
                    pb.j,
                    s(pb.scr),
                    s(pa.scr)
                );
            }
        }
        md.push('\n');
        store::write_atomic(&bundle.join("iterations.csv"), csv.as_bytes())?;
    }

    md.push_str("## Hypotheses\n\n| hypothesis | measured | criterion | verdict |\n|---|---|---|---|\n");
    let mut hyp = Vec::new();
    let verdict = |p: bool| if p { "pass" } else { "fail" };
    if let Some(r) = &h1 {
        let _ = writeln!(
            md,
            "| H1 SteerGen augmentation | score {} -> {} (gain {}, single-task drop {}; snippet baseline {}) | gain >= {:.2}, drop <= {:.2} | {} |",
            f4(r.base_score),
            f4(r.steergen_score),
            signed(r.gain),
            f4(r.single_drop),
            f4(r.snippet_score),
            experiments::H1_MIN_GAIN,
            experiments::H1_MAX_SINGLE_DROP,
            verdict(r.pass)
        );
        hyp.push(("h1".to_string(), r.pass));
    }
    if let Some(r) = &h2 {
        let _ = writeln!(
            md,
            "| H2 CMI tracks steerability | Spearman rho {} over {} variants | rho >= {:.1} | {} |",
            opt4(r.spearman),
            r.variants.len(),
            experiments::H2_MIN_RHO,
            verdict(r.pass)
        );
        hyp.push(("h2".to_string(), r.pass));
    }
    if let Some(r) = &h3 {
        let cells: Vec<String> = r
            .points
            .iter()
            .filter(|p| p.sampler == Sampler::CmiGuided)
            .map(|g| {
                let rnd = r.point(Sampler::UniformRandom, g.budget).map_or(f64::NAN, |p| p.mean_score);
                format!("{}: {} vs {}", g.budget, f4(g.mean_score), f4(rnd))
            })
            .collect();
        let _ = writeln!(
            md,
            "| H3 CMI-guided vs random sampling | {} | guided >= random at every budget, random variance >= guided at the smallest | {} |",
            cells.join("; "),
            verdict(r.pass)
        );
        hyp.push(("h3".to_string(), r.pass));
    }
    if let Some(r) = &h4 {
        let _ = writeln!(
            md,
            "| H4 SRBC iteration | score {} -> {} (gain {}) | gain >= {:.2} | {} |",
            f4(r.steergen_score),
            f4(r.srbc_score),
            signed(r.gain),
            experiments::H4_MIN_GAIN,
            verdict(r.pass)
        );
        hyp.push(("h4".to_string(), r.pass));
    }
    if hyp.is_empty() {
        md.push_str("| none | no experiment artifacts | | |\n");
    }
    md.push('\n');
    let mut hcsv = String::from("hypothesis,pass\n");
    for (h, p) in &hyp {
        let _ = writeln!(hcsv, "{h},{p}");
    }
    store::write_atomic(&bundle.join("hypotheses.csv"), hcsv.as_bytes())?;

    if !missing.is_empty() {
        md.push_str("## Missing artifacts\n\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
        md.push('\n');
    }
    let path = out.join("report/summary.md");
    store::write_atomic(&path, md.as_bytes())?;
    Ok(ReportSummary { artifacts, missing, summary: Some(path), hypotheses: hyp })
}

/// Logged rollouts against `n (n - 1) |k| n_repeat`.
fn audit_line(e: &Eval) -> String {
    let n = e.report.matrices.len();
    let k = e.report.config.grid.steps().len();
    let r = e.report.config.n_repeat;
    let expected = n * n.saturating_sub(1) * k * r;
    let logged = e.logged.unwrap_or(e.report.rollouts);
    let ok = logged == expected && e.report.rollouts == expected;
    format!(
        "Rollout audit ({}): {logged} logged, n(n-1)|k|n_repeat = {n}*{}*{k}*{r} = {expected}: {}",
        e.label,
        n.saturating_sub(1),
        if ok { "ok" } else { "MISMATCH" }
    )
}
