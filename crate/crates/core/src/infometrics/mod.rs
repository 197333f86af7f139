//! Entropy and conditional mutual information of the action distribution
//! given the instruction, with divergence and bound checks.
//!
//! At a state `s` the policy draws `N_a` action chunks per instruction. Each
//! chunk is reduced to a representation (the net gripper displacement by
//! default) and the entropies are resubstitution KDE estimates:
//!
//! ```text
//! Ĥ(A|s,ℓ) = −1/N_a Σ log p̂_ℓ(a_n)
//! Î(A;L|s) = Ĥ(pooled) − mean_ℓ Ĥ(A|s,ℓ)
//! ```
//!
//! Chunk `n` uses the same seed under every instruction, so at `λ = 0` the
//! per-instruction sample sets coincide and `Î` vanishes up to rounding.

pub mod bound;
pub mod divergence;
pub mod kde;
pub mod weights;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::par;
use crate::policy::Policy;
use crate::seed;
use crate::worldsim::WorldState;
pub use kde::{degenerate_entropy, kde_log_density, resubstitution_entropy, Samples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Net gripper displacement over the chunk (2-D).
    FinalDisplacement,
    /// All chunk displacements concatenated (2K-D).
    PerAction,
}

/// Which CMI value feeds the shaping function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInput {
    Raw,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmiConfig {
    /// Action chunks drawn per instruction.
    pub n_a: usize,
    /// Chunk horizon.
    pub k: usize,
    /// KDE bandwidth.
    pub h: f64,
    pub representation: Representation,
    /// Temperature of the shaping function `g(x) = exp(−x / T_g)`.
    pub t_g: f64,
    pub weight_input: WeightInput,
    pub seed: u64,
}

impl Default for CmiConfig {
    fn default() -> Self {
        Self {
            n_a: 32,
            k: 5,
            h: 0.02,
            representation: Representation::FinalDisplacement,
            t_g: 0.2,
            weight_input: WeightInput::Raw,
            seed: 0,
        }
    }
}

impl CmiConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.n_a >= 2, || "n_a must be at least 2".into())?;
        ensure(self.k >= 1, || "chunk horizon k must be at least 1".into())?;
        ensure(self.h > 0.0, || "kde bandwidth h must be positive".into())?;
        ensure(self.t_g > 0.0, || "shaping temperature t_g must be positive".into())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.representation {
            Representation::FinalDisplacement => 2,
            Representation::PerAction => 2 * self.k,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimate {
    /// `Ĥ(A|s,ℓ)` per instruction, in the order given.
    pub conditional: Vec<f64>,
    pub conditional_mean: f64,
    /// `Ĥ(A|s)` of the pooled samples.
    pub marginal: f64,
    pub cmi: f64,
    /// CMI over the marginal entropy measured from the estimator floor;
    /// `None` when the marginal sits at the floor.
    pub normalized: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl CmiEstimate {
    pub fn weight_input(&self, which: WeightInput) -> Option<f64> {
        match which {
            WeightInput::Raw => Some(self.cmi),
            WeightInput::Normalized => self.normalized,
        }
    }
}

/// `N_a` chunk representations for one instruction, seeds shared across instructions.
pub fn representations(policy: &Policy, state: &WorldState, instruction: usize, cfg: &CmiConfig) -> Samples {
    let mut data = Vec::with_capacity(cfg.n_a * cfg.dim());
    for n in 0..cfg.n_a {
        let chunk = policy.sample_chunk(state, instruction, cfg.k, seed::derive(cfg.seed, "sample", n as u64));
        match cfg.representation {
            Representation::FinalDisplacement => data.extend_from_slice(&chunk.displacement),
            Representation::PerAction => chunk.actions.iter().for_each(|a| data.extend_from_slice(&a.displacement)),
        }
    }
    Samples::new(cfg.dim(), data)
}

pub fn conditional_entropy(policy: &Policy, state: &WorldState, instruction: usize, cfg: &CmiConfig) -> f64 {
    resubstitution_entropy(&representations(policy, state, instruction, cfg), cfg.h)
}

/// CMI from per-instruction sample groups under a uniform instruction prior.
pub fn cmi_from_groups(groups: &[Samples], h: f64, seed: u64) -> CmiEstimate {
    let conditional: Vec<f64> = groups.iter().map(|g| resubstitution_entropy(g, h)).collect();
    let conditional_mean = conditional.iter().sum::<f64>() / conditional.len() as f64;
    let pooled = Samples::pool(groups);
    let marginal = resubstitution_entropy(&pooled, h);
    let cmi = marginal - conditional_mean;
    let span = marginal - degenerate_entropy(pooled.dim, h);
    let normalized = (span > 1e-12).then(|| cmi / span);
    CmiEstimate {
        conditional,
        conditional_mean,
        marginal,
        cmi,
        normalized,
        n_samples: groups.first().map_or(0, Samples::len),
        seed,
    }
}

/// `Î(A;L|s)` over `instructions` (at least two).
pub fn cmi(policy: &Policy, state: &WorldState, instructions: &[usize], cfg: &CmiConfig) -> Result<CmiEstimate> {
    cfg.validate()?;
    ensure(instructions.len() >= 2, || "cmi needs at least two instructions".into())?;
    let groups: Vec<Samples> = instructions.iter().map(|&l| representations(policy, state, l, cfg)).collect();
    Ok(cmi_from_groups(&groups, cfg.h, cfg.seed))
}

/// Jensen-Shannon divergence between two instruction-conditioned action
/// distributions, estimated as the two-instruction CMI.
pub fn js_divergence(policy: &Policy, state: &WorldState, pair: (usize, usize), cfg: &CmiConfig) -> Result<f64> {
    cmi(policy, state, &[pair.0, pair.1], cfg).map(|e| e.cmi)
}

/// CMI over every instruction plus every pairwise JS value, from one sample draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCmi {
    pub estimate: CmiEstimate,
    /// `pairs[i][j]`: two-instruction CMI, symmetric with a zero diagonal.
    pub pairs: Vec<Vec<f64>>,
}

impl StateCmi {
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pairs[i][j]
    }
}

pub fn state_cmi(policy: &Policy, state: &WorldState, cfg: &CmiConfig) -> StateCmi {
    let n = policy.n_instructions();
    let groups: Vec<Samples> = (0..n).map(|l| representations(policy, state, l, cfg)).collect();
    let mut pairs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = cmi_from_groups(&[groups[i].clone(), groups[j].clone()], cfg.h, cfg.seed).cmi;
            pairs[i][j] = v;
            pairs[j][i] = v;
        }
    }
    StateCmi { estimate: cmi_from_groups(&groups, cfg.h, cfg.seed), pairs }
}

/// [`state_cmi`] at every state, state `p` seeded with `derive(seed, "state", p)`.
pub fn cmi_sweep(policy: &Policy, states: &[&WorldState], cfg: &CmiConfig) -> Vec<StateCmi> {
    par::map(states.len(), |p| state_cmi(policy, states[p], &cfg.with_seed(seed::derive(cfg.seed, "state", p as u64))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl NullSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std: var.sqrt(), values }
    }
}

/// Instruction-label permutation null for [`cmi_from_groups`].
///
/// Samples that share a seed index are exchangeable across instructions when
/// the instruction has no effect, so labels are permuted within each index.
pub fn permuted_cmi(groups: &[Samples], h: f64, seed: u64) -> f64 {
    let n = groups.first().map_or(0, Samples::len);
    let dim = groups[0].dim;
    let mut rng = seed::rng(seed);
    let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(n * dim); groups.len()];
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for i in 0..n {
        order.shuffle(&mut rng);
        for (dst, &src) in order.iter().enumerate() {
            data[dst].extend_from_slice(groups[src].point(i));
        }
    }
    let shuffled: Vec<Samples> = data.into_iter().map(|d| Samples::new(dim, d)).collect();
    cmi_from_groups(&shuffled, h, seed).cmi
}

pub fn permutation_null(groups: &[Samples], h: f64, n_perm: usize, seed: u64) -> NullSummary {
    NullSummary::from_values(
        (0..n_perm).map(|b| permuted_cmi(groups, h, seed::derive(seed, "perm", b as u64))).collect(),
    )
}
