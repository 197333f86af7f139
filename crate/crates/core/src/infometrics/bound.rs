//! The coverage bound: every bidirectionally steerable state must show a
//! behavioural shift of at least `ε` in total variation, which forces its
//! pairwise CMI above `τ = ½ε²`, so `SCR ≤ Pr_ν[Î ≥ τ]`.
//!
//! `ν` is uniform over the probe states in the union of the two visitation
//! sets.

use serde::{Deserialize, Serialize};

use super::divergence::{js_grid, pinsker_check, tv_distance_grid, GridSpec};
use super::StateCmi;
use crate::error::{Error, Result};
use crate::par;
use crate::policy::Policy;
use crate::steerability::{ProbeSet, SteerSets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBound {
    pub probe: usize,
    /// Pairwise CMI estimate at the probe.
    pub cmi: f64,
    pub bidirectional: bool,
    /// Exact single-step quantities, computed on bidirectionally steerable probes.
    pub tv: Option<f64>,
    pub js: Option<f64>,
    pub pinsker_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub i: usize,
    pub j: usize,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    /// `Pr_ν[Î ≥ τ]`.
    pub high_cmi_mass: Option<f64>,
    pub scr: Option<f64>,
    /// `high_cmi_mass + tolerance − scr`.
    pub slack: Option<f64>,
    /// No bidirectionally steerable probe, so the bound says nothing.
    pub vacuous: bool,
    pub satisfied: bool,
    pub states: Vec<StateBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoBoundReport {
    pub tolerance: f64,
    pub pairs: Vec<PairBound>,
}

impl InfoBoundReport {
    pub fn all_satisfied(&self) -> bool {
        self.pairs.iter().all(|p| p.satisfied)
    }

    pub fn min_pinsker_margin(&self) -> Option<f64> {
        self.pairs.iter().flat_map(|p| &p.states).filter_map(|s| s.pinsker_margin).reduce(f64::min)
    }
}

/// Bound check for one pair given pairwise CMI and (on steerable probes) TV values.
///
/// `epsilon = None` calibrates `ε` as the smallest TV over the bidirectionally
/// steerable probes. At `τ = 0` every union probe counts, since the true CMI
/// is nonnegative even where the estimate dips below zero.
pub fn scr_bound_check(
    sets: &SteerSets,
    (i, j): (usize, usize),
    cmi: &[f64],
    tv: &[Option<f64>],
    epsilon: Option<f64>,
    tolerance: f64,
) -> Result<PairBound> {
    let m = sets.n_probes();
    if cmi.len() != m || tv.len() != m {
        return Err(Error::Invalid(format!(
            "expected {m} per-probe values, got {} cmi and {} tv",
            cmi.len(),
            tv.len()
        )));
    }
    let union = sets.union(i, j);
    let bidir = sets.bidirectional(i, j);
    let n_union = union.iter().filter(|&&u| u).count();
    let n_bidir = bidir.iter().filter(|&&b| b).count();
    let scr = (n_union > 0).then(|| n_bidir as f64 / n_union as f64);
    let calibrated = if n_bidir == 0 {
        None
    } else {
        let mut min = f64::INFINITY;
        for p in (0..m).filter(|&p| bidir[p]) {
            let t = tv[p].ok_or_else(|| Error::Invalid(format!("probe {p} is steerable but has no TV value")))?;
            min = min.min(t);
        }
        Some(min)
    };
    let epsilon = epsilon.or(calibrated);
    let vacuous = n_bidir == 0 || epsilon.is_none();
    let tau = epsilon.map(|e| 0.5 * e * e);
    let high_cmi_mass = match (tau, n_union) {
        (Some(t), n) if n > 0 => {
            Some((0..m).filter(|&p| union[p] && (t <= 0.0 || cmi[p] >= t)).count() as f64 / n as f64)
        }
        _ => None,
    };
    let slack = match (scr, high_cmi_mass) {
        (Some(s), Some(h)) => Some(h + tolerance - s),
        _ => None,
    };
    let satisfied = vacuous || slack.is_none_or(|s| s >= 0.0);
    let states = (0..m)
        .filter(|&p| union[p])
        .map(|p| StateBound {
            probe: p,
            cmi: cmi[p],
            bidirectional: bidir[p],
            tv: tv[p],
            js: None,
            pinsker_margin: None,
        })
        .collect();
    Ok(PairBound { i, j, epsilon, tau, high_cmi_mass, scr, slack, vacuous, satisfied, states })
}

/// Bound check over every task pair, with TV and exact JS evaluated at the
/// bidirectionally steerable probes.
pub fn info_bound_report(
    policy: &Policy,
    probes: &ProbeSet,
    sets: &SteerSets,
    cmi: &[StateCmi],
    grid: &GridSpec,
    tolerance: f64,
) -> Result<InfoBoundReport> {
    grid.validate()?;
    let n = sets.n_tasks;
    let m = sets.n_probes();
    if probes.len() != m || cmi.len() != m {
        return Err(Error::Invalid("probe set, steer sets and CMI sweep differ in length".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let bidir = sets.bidirectional(i, j);
            let exact = par::map(m, |p| {
                bidir[p].then(|| {
                    let s = &probes.probes[p].state;
                    let (a, b) = (policy.action_dist(s, i), policy.action_dist(s, j));
                    (tv_distance_grid(&a, &b, grid), js_grid(&a, &b, grid))
                })
            });
            let pair_cmi: Vec<f64> = cmi.iter().map(|c| c.pair(i, j)).collect();
            let tv: Vec<Option<f64>> = exact.iter().map(|e| e.map(|x| x.0)).collect();
            let mut bound = scr_bound_check(sets, (i, j), &pair_cmi, &tv, None, tolerance)?;
            for st in &mut bound.states {
                if let Some((t, js)) = exact[st.probe] {
                    st.js = Some(js);
                    st.pinsker_margin = Some(pinsker_check(js, t)?.margin);
                }
            }
            pairs.push(bound);
        }
    }
    Ok(InfoBoundReport { tolerance, pairs })
}
