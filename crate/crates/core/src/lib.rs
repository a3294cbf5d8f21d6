//! Full-body motion reconstruction from head and hand tracking signals.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod prior;
pub mod sequence;
pub mod signals;
pub mod train;

pub use error::{Error, Result};
