//! Task arithmetic with Kronecker-factored drift penalties.

pub mod codec;
pub mod curvature;
pub mod driftreg;
pub mod error;
pub mod linalg;
pub mod linearized;
pub mod metrics;
pub mod network;
pub mod regfactors;
pub mod synthtasks;
pub mod taskvec;
pub mod training;

pub use error::{Result, TakError};
