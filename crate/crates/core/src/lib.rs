//! Executable checks of reversal invariance for autoregressive language
//! models.
//!
//! * [`seqcore`] and [`tokenize`]: corpora, reversal, BPE and its stability
//!   under reversal.
//! * [`model`] and [`reparam`]: a small decoder with a mirror evaluation pass,
//!   and the parameter maps relating forward and reversed training problems.
//! * [`infotheory`]: entropy rate and time-reversal divergence of Markov
//!   sources, exact and estimated from text.
//! * [`verify`]: equivariance, invariance and matched-training checks.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix `f64`,
//! which every check uses.

pub mod demo;
pub mod error;
pub mod infotheory;
pub mod model;
pub mod reparam;
pub mod scalar;
pub mod seqcore;
pub mod tokenize;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = model::ModelParams<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Chain = infotheory::MarkovChain<f64>;
pub type Chain32 = infotheory::MarkovChain<f32>;

/// Version string embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
