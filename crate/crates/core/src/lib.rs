//! Flexible job-shop scheduling toolkit.
//!
//! - [`instance`]: problem representation, text format, synthetic generator
//! - [`env`]: the dispatching MDP, raw features and schedule validation
//! - [`pdr`]: priority dispatching rules
//! - [`tensor`]: dense tensors, reverse-mode autodiff, layers, optimizer, checkpoints
//! - [`policy`]: the Mamba / cross-attention dispatching policy
//! - [`ppo`]: training loop
//! - [`bench`]: benchmark suites, reports and Gantt charts

pub mod bench;
pub mod env;
pub mod error;
pub mod instance;
pub mod pdr;
pub mod policy;
pub mod ppo;
pub mod tensor;

pub use error::{Error, Result};
