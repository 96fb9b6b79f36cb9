//! Mixture-of-experts lab on cluster-structured synthetic data.
//!
//! A top-1 routed MoE layer of two-layer CNN experts is trained with
//! normalized gradient descent on the experts and plain gradient descent on
//! a zero-initialized linear router, with `Unif[0,1]` routing noise. The
//! crate also carries the evaluation metrics (dispatch entropy, router
//! correctness) and numerical checks of the router smoothing bounds, the
//! router zero-sum identity and the single-expert accuracy ceiling.

pub mod error;
pub mod experiment;
pub mod experts;
pub mod gating;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod signal;
pub mod training;
pub mod verification;

pub use error::{MoeError, Result};
pub use experts::{Activation, ExpertBank, ExpertWeights};
pub use gating::{RouterWeights, RoutingNoise};
pub use metrics::{DispatchMatrix, EvalReport};
pub use rng::{SeedStreams, Stream};
pub use signal::{BasisMode, DataConfig, Dataset, Example, Interval, SignalBasis};
pub use experiment::{ExperimentConfig, RunRecord, SweepSummary};
pub use training::{Architecture, IterationLog, MoeModel, TrainConfig, TrainOutcome};
pub use verification::LemmaReport;
