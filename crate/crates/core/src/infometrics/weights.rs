//! Start-state sampling distribution over a candidate buffer.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    /// `w = g(Î)` per candidate.
    pub raw: Vec<f64>,
    /// `q = w / Σ w`.
    pub q: Vec<f64>,
    /// Set when every raw weight vanished and `q` fell back to uniform.
    pub uniform_fallback: bool,
}

/// Shaping function emphasizing low-CMI candidates.
pub fn shape(cmi: f64, t_g: f64) -> f64 {
    (-cmi / t_g).exp()
}

/// Weights over candidates with the given CMI values (`None` counts as zero weight).
pub fn sampling_weights(cmi: &[Option<f64>], t_g: f64) -> Result<SamplingWeights> {
    ensure(!cmi.is_empty(), || "sampling buffer is empty".into())?;
    ensure(t_g > 0.0, || "shaping temperature must be positive".into())?;
    let raw: Vec<f64> = cmi.iter().map(|c| c.map_or(0.0, |x| shape(x, t_g))).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        log::warn!("all {} sampling weights vanished; falling back to uniform", raw.len());
        let q = vec![1.0 / raw.len() as f64; raw.len()];
        return Ok(SamplingWeights { raw, q, uniform_fallback: true });
    }
    let q = raw.iter().map(|w| w / total).collect();
    Ok(SamplingWeights { raw, q, uniform_fallback: false })
}

impl SamplingWeights {
    /// Inverse-CDF draw from `q` for a uniform `u ∈ [0, 1)`.
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &w) in self.q.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.q.iter().rposition(|&w| w > 0.0).unwrap_or(self.q.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_values_are_uniform() {
        let w = sampling_weights(&[Some(0.3); 5], 0.2).unwrap();
        assert!(w.q.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn one_blind_state_dominates() {
        // Closed form: 1 / (1 + 9 exp(−ln 2 / 0.2)) = 1 / (1 + 9/32) = 32/41.
        let mut cmi = vec![Some(2f64.ln()); 10];
        cmi[3] = Some(0.0);
        let w = sampling_weights(&cmi, 0.2).unwrap();
        assert!((w.q[3] - 32.0 / 41.0).abs() < 1e-12, "q {}", w.q[3]);
        assert!(w.q[3] >= 0.7);
    }

    #[test]
    fn vanishing_weights_fall_back_to_uniform() {
        let w = sampling_weights(&[None, None], 0.2).unwrap();
        assert!(w.uniform_fallback);
        assert_eq!(w.q, vec![0.5, 0.5]);
        let w = sampling_weights(&[Some(1e6), Some(2e6)], 0.2).unwrap();
        assert!(w.uniform_fallback);
        assert!(sampling_weights(&[], 0.2).is_err());
    }

    #[test]
    fn pick_inverts_the_cdf() {
        let w = sampling_weights(&[Some(0.0), None, Some(0.0)], 1.0).unwrap();
        assert_eq!(w.pick(0.1), 0);
        assert_eq!(w.pick(0.6), 2);
        assert_eq!(w.pick(0.999_999_999_9), 2);
    }

    proptest! {
        #[test]
        fn distribution_is_valid_and_equivariant(
            vals in prop::collection::vec(0.0f64..1.5, 1..30),
            shift in -1.0f64..1.0,
            rot in 0usize..30,
        ) {
            let cmi: Vec<Option<f64>> = vals.iter().copied().map(Some).collect();
            let w = sampling_weights(&cmi, 0.2).unwrap();
            prop_assert!((w.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.q.iter().all(|&q| q >= 0.0));
            let shifted: Vec<Option<f64>> = vals.iter().map(|v| Some(v + shift)).collect();
            let ws = sampling_weights(&shifted, 0.2).unwrap();
            for (a, b) in w.q.iter().zip(&ws.q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let r = rot % cmi.len();
            let mut rotated = cmi.clone();
            rotated.rotate_left(r);
            let wr = sampling_weights(&rotated, 0.2).unwrap();
            let mut back = wr.q.clone();
            back.rotate_right(r);
            for (a, b) in w.q.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
