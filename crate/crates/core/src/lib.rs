//! Multilayer perceptron classifiers fit either by plain cross-entropy
//! (maximum likelihood) or by the ICE objective, which adds an
//! information-criterion penalty that removes the leading-order optimism of
//! the in-sample loss.
//!
//! The pieces, bottom up:
//!
//! - [`network`]: topology, packed parameters, forward pass, softmax loss.
//! - [`backprop`]: one backward sweep giving the per-sample gradient and the
//!   diagonal of the per-sample Hessian.
//! - [`ice`]: MLE and ICE objectives over a dataset.
//! - [`optimizer`]: L-BFGS with a strong-Wolfe line search.
//! - [`oracle`]: finite-difference and dense-matrix references.
//! - [`data`]: synthetic teacher data, CSV input/output, splitting.
//! - [`harness`]: the repeated-fit overfitting experiment and its tables.

pub mod backprop;
pub mod data;
pub mod error;
pub mod harness;
pub mod ice;
pub mod network;
pub mod optimizer;
pub mod oracle;

pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use ice::{PenaltyScale, Estimator, IceOptions, ObjectiveValue};
pub use network::{LabeledSample, Network, NetworkTopology};
pub use optimizer::{OptimizerConfig, Termination};
