//! Building blocks for mixtures of rank-heterogeneous experts.
//!
//! - [`linalg`]: dense matrices and a one-sided Jacobi SVD.
//! - [`weights`]: expert bundles, low-rank adapters and the `FMW1`/`FMA1` files.
//! - [`adapter`]: post-hoc LoRA extraction, materialization, parameter counts.
//! - [`moe`]: routing and the mixture forward pass.
//! - [`synth`]: seeded synthetic experts, probes and fidelity scores.
//! - [`analysis`]: Avg / Δ% aggregation, rank-sensitivity regression, peak ranks.

pub mod adapter;
pub mod analysis;
pub mod linalg;
pub mod moe;
pub mod synth;
pub mod weights;

pub use adapter::{AdapterError, ExpertSize, ParamCount, ParamPreset, RankSpec};
pub use analysis::{AnalysisError, Rank, ScoreRecord, ScoreTable};
pub use linalg::{LinalgError, Matrix, SvdResult};
pub use moe::{Activation, BlockTargets, ExpertEntry, MixtureSpec, MoeError, RouterMatrix, SoftmaxMode};
pub use synth::{Rng, Scenario, SpectrumSpec, SynthError};
pub use weights::{ExpertBundle, LowRankAdapter, WeightsError};

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl Error {
    /// True for failures of the numerics themselves (e.g. SVD non-convergence)
    /// as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        fn linalg(e: &LinalgError) -> bool {
            matches!(e, LinalgError::NotConverged { .. })
        }
        match self {
            Error::Linalg(e) => linalg(e),
            Error::Adapter(AdapterError::Linalg(e)) => linalg(e),
            Error::Moe(MoeError::Linalg(e)) | Error::Moe(MoeError::Adapter(AdapterError::Linalg(e))) => linalg(e),
            _ => false,
        }
    }
}
