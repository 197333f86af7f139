//! Total variation and Jensen-Shannon divergence between two exact Gaussian
//! mixtures over displacement space, by grid quadrature or Monte Carlo.

use std::f64::consts::{LN_2, PI};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::policy::{log_sum_exp, ActionDistribution};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Cell side as a fraction of the smaller component std.
    pub spacing: f64,
    /// Padding around the outermost component means, in stds.
    pub pad: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { spacing: 0.125, pad: 6.0 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.spacing > 0.0 && self.spacing <= 0.25, || "grid spacing must lie in (0, 0.25] stds".into())?;
        ensure(self.pad >= 4.0, || "grid must cover at least 4 stds".into())?;
        Ok(())
    }
}

/// Both densities evaluated at the cell midpoints of one shared grid.
struct Tabulated {
    p: Vec<f64>,
    q: Vec<f64>,
    cell: f64,
}

fn tabulate(p: &ActionDistribution, q: &ActionDistribution, spec: &GridSpec) -> Tabulated {
    let sigma_min = p.sigma.min(q.sigma);
    let sigma_max = p.sigma.max(q.sigma);
    let step = spec.spacing * sigma_min;
    let means = p.components.iter().chain(&q.components).map(|c| c.mean);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for m in means {
        for a in 0..2 {
            lo[a] = lo[a].min(m[a]);
            hi[a] = hi[a].max(m[a]);
        }
    }
    let pad = spec.pad * sigma_max;
    let counts: Vec<usize> = (0..2).map(|a| ((hi[a] - lo[a] + 2.0 * pad) / step).ceil() as usize).collect();
    let axis = |a: usize| -> Vec<f64> { (0..counts[a]).map(|i| lo[a] - pad + (i as f64 + 0.5) * step).collect() };
    let (xs, ys) = (axis(0), axis(1));
    Tabulated { p: density_table(p, &xs, &ys), q: density_table(q, &xs, &ys), cell: step * step }
}

/// Separable evaluation: each isotropic component factors over the two axes.
fn density_table(d: &ActionDistribution, xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len() * ys.len()];
    let s2 = 2.0 * d.sigma * d.sigma;
    let norm = 1.0 / (PI * s2);
    for c in &d.components {
        let ex: Vec<f64> = xs.iter().map(|x| (-(x - c.mean[0]).powi(2) / s2).exp()).collect();
        let ey: Vec<f64> = ys.iter().map(|y| (-(y - c.mean[1]).powi(2) / s2).exp()).collect();
        let w = c.weight * norm;
        for (iy, &vy) in ey.iter().enumerate() {
            if vy * w < 1e-300 {
                continue;
            }
            let row = &mut out[iy * xs.len()..(iy + 1) * xs.len()];
            for (o, &vx) in row.iter_mut().zip(&ex) {
                *o += w * vx * vy;
            }
        }
    }
    out
}

/// `½ Σ |p − q| · cell area` over the exact mixture densities.
pub fn tv_distance_grid(p: &ActionDistribution, q: &ActionDistribution, spec: &GridSpec) -> f64 {
    let t = tabulate(p, q, spec);
    (0.5 * t.p.iter().zip(&t.q).map(|(a, b)| (a - b).abs()).sum::<f64>() * t.cell).min(1.0)
}

fn js_term(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * (a / m).ln()
    } else {
        0.0
    }
}

/// JS divergence in nats by quadrature on the same grid as [`tv_distance_grid`].
pub fn js_grid(p: &ActionDistribution, q: &ActionDistribution, spec: &GridSpec) -> f64 {
    let t = tabulate(p, q, spec);
    let sum: f64 =
        t.p.iter()
            .zip(&t.q)
            .map(|(&a, &b)| {
                let m = 0.5 * (a + b);
                if m > 0.0 {
                    0.5 * (js_term(a, m) + js_term(b, m))
                } else {
                    0.0
                }
            })
            .sum();
    (sum * t.cell).clamp(0.0, LN_2)
}

/// Unclamped draw from the mixture density.
fn draw(d: &ActionDistribution, rng: &mut seed::Rng) -> [f64; 2] {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = d.components.len() - 1;
    for (i, c) in d.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            chosen = i;
            break;
        }
    }
    let m = d.components[chosen].mean;
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    [m[0] + d.sigma * nx, m[1] + d.sigma * ny]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// `½ E_p[log p/m] + ½ E_q[log q/m]` from `n` draws of each side.
pub fn js_monte_carlo(p: &ActionDistribution, q: &ActionDistribution, n: usize, seed: u64) -> McEstimate {
    let half = |a: &ActionDistribution, b: &ActionDistribution, s: u64| -> (f64, f64) {
        let mut rng = seed::rng(s);
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x = draw(a, &mut rng);
                let (la, lb) = (a.log_density(x), b.log_density(x));
                la - (log_sum_exp(&[la, lb]) - LN_2)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        (mean, var / n as f64)
    };
    let (a, va) = half(p, q, seed::derive(seed, "js", 0));
    let (b, vb) = half(q, p, seed::derive(seed, "js", 1));
    McEstimate { value: 0.5 * (a + b), std_err: 0.5 * (va + vb).sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinskerCheck {
    /// `js − ½ tv²`.
    pub margin: f64,
    pub violated: bool,
}

/// Numerical slack allowed below zero before a margin counts as a violation.
pub const PINSKER_TOLERANCE: f64 = 1e-3;

pub fn pinsker_check(js: f64, tv: f64) -> Result<PinskerCheck> {
    ensure((0.0..=1.0).contains(&tv), || format!("total variation {tv} outside [0, 1]"))?;
    let margin = js - 0.5 * tv * tv;
    Ok(PinskerCheck { margin, violated: margin < -PINSKER_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Component;
    use crate::worldsim::GripCommand;

    fn mixture(parts: &[([f64; 2], f64)], sigma: f64) -> ActionDistribution {
        let z: f64 = parts.iter().map(|p| p.1).sum();
        ActionDistribution {
            components: parts
                .iter()
                .map(|&(mean, w)| Component { mean, weight: w / z, command: GripCommand::Hold, source: 0 })
                .collect(),
            sigma,
            a_max: 1.0,
            command: GripCommand::Hold,
        }
    }

    #[test]
    fn identical_mixtures() {
        let p = mixture(&[([0.0, 0.0], 1.0), ([0.02, 0.01], 2.0)], 0.01);
        let spec = GridSpec::default();
        assert_eq!(tv_distance_grid(&p, &p, &spec), 0.0);
        assert_eq!(js_grid(&p, &p, &spec), 0.0);
    }

    #[test]
    fn disjoint_components() {
        let s = 0.01;
        let p = mixture(&[([0.0, 0.0], 1.0)], s);
        let q = mixture(&[([20.0 * s, 0.0], 1.0)], s);
        let spec = GridSpec::default();
        assert!((tv_distance_grid(&p, &q, &spec) - 1.0).abs() < 1e-3);
        assert!((js_grid(&p, &q, &spec) - LN_2).abs() < 1e-3);
    }

    #[test]
    fn two_sigma_separation_matches_the_gaussian_closed_form() {
        // erf(d / (2√2 σ)) at d = 2σ is erf(1/√2) = P(|Z| < 1).
        let erf_inv_sqrt2 = 0.682_689_492_137_085_9;
        let s = 0.01;
        let p = mixture(&[([0.0, 0.0], 1.0)], s);
        let q = mixture(&[([2.0 * s * 0.6, 2.0 * s * 0.8], 1.0)], s);
        let tv = tv_distance_grid(&p, &q, &GridSpec::default());
        assert!((tv - erf_inv_sqrt2).abs() < 1e-3, "tv {tv}");
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let s = 0.01;
        let p = mixture(&[([0.0, 0.0], 1.0), ([0.03, 0.0], 1.0)], s);
        let q = mixture(&[([0.01, 0.01], 3.0), ([0.03, -0.02], 1.0)], s);
        let exact = js_grid(&p, &q, &GridSpec::default());
        let mc = js_monte_carlo(&p, &q, 20_000, 3);
        assert!((mc.value - exact).abs() < 4.0 * mc.std_err + 1e-4, "mc {mc:?} exact {exact}");
    }

    #[test]
    fn pinsker_extremes() {
        let top = pinsker_check(LN_2, 1.0).unwrap();
        assert!((top.margin - (LN_2 - 0.5)).abs() < 1e-15 && !top.violated);
        assert_eq!(pinsker_check(0.0, 0.0).unwrap().margin, 0.0);
        assert!(pinsker_check(0.0, 0.5).unwrap().violated);
        assert!(pinsker_check(0.1, 1.5).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::default().validate().is_ok());
        assert!(GridSpec { spacing: 0.5, pad: 6.0 }.validate().is_err());
        assert!(GridSpec { spacing: 0.1, pad: 3.0 }.validate().is_err());
    }
}
