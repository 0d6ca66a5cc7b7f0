//! Batch reinforcement learning for continuous vasopressor and fluid dosing
//! under partial observability, with clinician shadow-mode scoring.

pub mod behavior;
pub mod checkpoint;
pub mod cohort;
pub mod dist;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ope;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod shadow_metrics;
pub mod sim;
pub mod state_repr;
pub mod study;
pub mod tape;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
