//! Function-on-function regression with bidirectional neural controlled
//! differential equations.
//!
//! The crate is organized around the stages of the model:
//!
//! - [`funcpath`]: irregular observations -> continuous control paths,
//!   quadrature grids, exact Stieltjes increments.
//! - [`diffcore`]: parameter store, tape-based reverse-mode gradients,
//!   MLPs, stable softmax, Adam.
//! - [`encoder`]: bidirectional CDE encoder with mixture-of-experts vector
//!   fields and a function-wise router.
//! - [`attention`]: continuous self attention over latent trajectories.
//! - [`crossfusion`]: pointwise multi-head cross attention across channels.
//! - [`decoder`]: CDE decoder evaluable at arbitrary query points.
//! - [`model`]: the assembled regressor and its checkpoints.
//! - [`data`]: synthetic generators, CSV ingestion, splits.
//! - [`baseline`]: B-spline ridge regression comparator.
//! - [`harness`]: training loop, metrics, diagnostics, experiments.

pub mod attention;
pub mod baseline;
pub mod crossfusion;
pub mod data;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod funcpath;
pub mod harness;
pub mod model;

pub use error::{FameError, Result};
pub use funcpath::{FunctionSample, Scheme};
