//! Benchmarking hyperbolic representation learning against hierarchy-aware metrics.

pub mod comb;
pub mod diffengine;
pub mod encoders;
pub mod error;
pub mod manifold;
pub mod metrics;
pub mod objectives;
pub mod runner;
pub mod stats;
pub mod trainer;
pub mod treegen;

pub use error::{HrcbError, Result};
