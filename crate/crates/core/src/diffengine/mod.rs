//! Reverse-mode differentiation and the optimizers that consume its gradients.

pub mod fd;
pub mod geo;
mod optim;
mod tape;

pub use optim::{Adam, AdamConfig, AdamMode, Bound, Param, ParamId, ParamSet, StepOutcome};
pub use tape::{Csr, Grads, Tape, Unary, Var};

#[cfg(test)]
mod tests;
