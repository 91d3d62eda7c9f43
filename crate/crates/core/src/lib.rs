//! Hybrid autoregressive / masked-diffusion language modelling.
//!
//! A single transformer denoiser is trained on a variational bound that mixes
//! an autoregressive term over positions masked by a posterior `q_0` and a
//! masked-diffusion term over the remaining corruption path. Everything the
//! two generation styles need is expressed through additive `{0, -inf}`
//! attention biases, which in turn make it possible to skip future mask
//! tokens during sampling and, for variant B, to keep a single KV cache across
//! both sampling phases.
//!
//! Module map:
//!
//! - [`ordering`]: constrained permutations and their inverses.
//! - [`schedule`]: the log-linear noise schedule and time samplers.
//! - [`masking`]: vocabulary, forward masking, reverse posterior, sequence operators.
//! - [`bias`]: every training and sampling attention bias plus an independent oracle.
//! - [`model`]: the transformer denoiser with manual reverse-mode gradients and KV caching.
//! - [`loss`]: AR and MDM loss terms, the split-batch training step, likelihood evaluation.
//! - [`sampler`]: first-hitting schedules and two-phase generation.
//! - [`corpus`]: tokenization and sequence packing.
//! - [`bench`]: analytic cost model and measured counters.

pub mod bench;
pub mod bias;
pub mod corpus;
mod error;
pub mod loss;
pub mod masking;
pub mod model;
pub mod ordering;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};

/// Which attention layout the denoiser is trained and sampled with.
///
/// Variant A keeps bidirectional attention among clean tokens; variant B makes
/// it causal along the denoising order, which is what allows KV caching during
/// the diffusion phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected a or b)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::A => f.write_str("a"),
            Variant::B => f.write_str("b"),
        }
    }
}
