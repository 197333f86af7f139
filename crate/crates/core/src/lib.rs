//! Steerability measurement and refinement for language-conditioned
//! multitask policies in a small 2-D pick-and-place world.

pub mod error;
pub mod geom;
pub mod infometrics;
pub mod par;
pub mod policy;
pub mod refine;
pub mod seed;
pub mod steerability;
pub mod steergen;
pub mod worldsim;

pub use error::{Error, Result};
