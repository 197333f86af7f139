//! CSV files for plotting. Floats use Rust's shortest round-trip formatting.

use steerlab::infometrics::StateCmi;
use steerlab::steerability::{ProbeSet, RolloutLog, SourceMatrix};

pub const MATRIX_HEADER: &str = "switch_step,target_task,success_rate,n";
pub const CMI_HEADER: &str = "state_id,task_id,timestep,h_cond,h_marg,cmi,cmi_normalized,q";
pub const ROLLOUT_HEADER: &str = "source_task,target_task,switch_step,repeat,seed,success";

/// One row per (target, switch step), targets outer.
pub fn matrix_csv(m: &SourceMatrix) -> String {
    let mut out = format!("{MATRIX_HEADER}\n");
    for (row, &j) in m.cells.iter().zip(&m.targets) {
        for (cell, &t) in row.iter().zip(&m.steps) {
            out.push_str(&format!("{t},{j},{},{}\n", cell.rate(), cell.n));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixRow {
    pub switch_step: u32,
    pub target_task: usize,
    pub success_rate: f64,
    pub n: usize,
}

pub fn parse_matrix_csv(text: &str) -> Result<Vec<MatrixRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(MATRIX_HEADER) {
        return Err(format!("expected header {MATRIX_HEADER:?}"));
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || format!("line {}: malformed row {l:?}", n + 2);
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MatrixRow {
                switch_step: f[0].parse().map_err(|_| bad())?,
                target_task: f[1].parse().map_err(|_| bad())?,
                success_rate: f[2].parse().map_err(|_| bad())?,
                n: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn rollouts_csv(logs: &[RolloutLog]) -> String {
    let mut out = format!("{ROLLOUT_HEADER}\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.source,
            l.target,
            l.switch_step,
            l.repeat,
            l.seed,
            u8::from(l.success)
        ));
    }
    out
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// One row per probe state; `q` is the sampling weight over the sweep.
pub fn cmi_csv(probes: &ProbeSet, cmi: &[StateCmi], q: &[f64]) -> String {
    let mut out = format!("{CMI_HEADER}\n");
    for (p, (c, w)) in cmi.iter().zip(q).enumerate() {
        let probe = &probes.probes[p];
        let e = &c.estimate;
        out.push_str(&format!(
            "{p},{},{},{},{},{},{},{w}\n",
            probe.task,
            probe.state.step,
            e.conditional_mean,
            e.marginal,
            e.cmi,
            opt(e.normalized)
        ));
    }
    out
}
