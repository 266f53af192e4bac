//! Conflict-aware multi-task optimization with importance-weighted soft
//! masks and task-adaptive mask sparsity.

pub mod baselines;
pub mod cli;
pub mod exec;
pub mod model;
pub mod softmask;
pub mod tamu;
pub mod trainer;
pub mod vecmath;
pub mod workloads;
