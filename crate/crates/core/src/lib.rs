//! Weighted least-squares identification of a linear system from its own
//! rollouts plus rollouts of a related auxiliary system, with finite-sample
//! error bounds and Monte-Carlo scenario sweeps.

pub mod bounds;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod numerics;
pub mod simulate;
pub mod systems;

pub use error::{Error, Result};
pub use numerics::Matrix;
