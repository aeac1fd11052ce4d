//! Desk-scale laboratory for variance-reduced preference optimization.
//!
//! Every world here has a finite prompt and response vocabulary, so all
//! population quantities (target parameter, curvature, gradient covariance,
//! expected reward) are computed by exact enumeration and compared against
//! replicated Monte-Carlo fits of the baseline and variance-reduced
//! estimators.
//!
//! Module map:
//! - [`world`]: data-generating process, preference kernels, sampling.
//! - [`models`]: linear-feature rewards, softmax policies, auxiliary tables.
//! - [`losses`]: per-pair losses and the baseline / variance-reduced risks.
//! - [`estimation`]: deterministic first-order minimization.
//! - [`diagnostics`]: exact theoretical quantities.
//! - [`experiments`]: replicated studies and CSV summaries.

pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod losses;
pub mod models;
pub mod numfmt;
pub mod presets;
pub mod rng;
pub mod stats;
pub mod world;

pub use error::{Error, Result};
pub use rng::RandomStream;
