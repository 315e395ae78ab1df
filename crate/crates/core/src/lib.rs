//! Closed-form estimation for the multivariate errors-in-variables
//! regression model `X = (0; α1ₙ') + (I_p; B) U₁ + E`.
//!
//! * [`model`]: observations, centering, the scatter matrix and its ordered
//!   eigenstructure.
//! * [`estimators`]: slope, intercept and mean-vector estimators, residual
//!   objectives and the [`fit`](estimators::fit) entry point.
//! * [`oracle`]: independent checks of the fitted means and of optimality.
//! * [`simulate`]: synthetic data and Monte Carlo consistency runs.
//! * [`verify`]: the randomized invariant suite behind `eivreg verify`.
//! * [`io`] and [`cli`]: CSV ingestion, reports and the command-line tool.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod verify;

pub use error::{EivError, Result};
pub use estimators::{fit, FitResult};
pub use model::{ModelKind, ModelSpec, ObservedData};
