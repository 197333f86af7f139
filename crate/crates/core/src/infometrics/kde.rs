//! Isotropic Gaussian kernel density estimates over flat point buffers.

use std::f64::consts::PI;

use crate::policy::log_sum_exp;

/// A set of `d`-dimensional points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "sample buffer does not match dimension");
        Self { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Concatenation of several sample sets of equal dimension, in order.
    pub fn pool<'a>(groups: impl IntoIterator<Item = &'a Samples>) -> Samples {
        let mut dim = 0;
        let mut data = Vec::new();
        for g in groups {
            dim = g.dim;
            data.extend_from_slice(&g.data);
        }
        Samples::new(dim.max(1), data)
    }
}

/// `log (2π h²)^{-d/2}`, the log of the kernel peak.
pub fn log_kernel_peak(dim: usize, h: f64) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * h * h).ln()
}

/// `log p̂(x)` with `p̂(x) = 1/N Σ (2π h²)^{-d/2} exp(−‖x − x_i‖² / 2h²)`.
pub fn kde_log_density(samples: &Samples, query: &[f64], h: f64) -> f64 {
    assert!(!samples.is_empty(), "kde needs at least one sample");
    assert_eq!(query.len(), samples.dim, "query dimension mismatch");
    let inv = 1.0 / (2.0 * h * h);
    let terms: Vec<f64> =
        samples.iter().map(|p| -p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * inv).collect();
    log_kernel_peak(samples.dim, h) + log_sum_exp(&terms) - (samples.len() as f64).ln()
}

/// Resubstitution entropy `−1/N Σ log p̂(x_i)`, each point kept in its own estimate.
pub fn resubstitution_entropy(samples: &Samples, h: f64) -> f64 {
    let n = samples.len();
    -samples.iter().map(|x| kde_log_density(samples, x, h)).sum::<f64>() / n as f64
}

/// The value [`resubstitution_entropy`] takes when every sample coincides, and
/// its lower bound for any sample set.
pub fn degenerate_entropy(dim: usize, h: f64) -> f64 {
    -log_kernel_peak(dim, h)
}
