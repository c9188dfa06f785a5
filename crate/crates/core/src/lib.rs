//! Derivative-invariant risk minimization over synthetic structural causal
//! models: data generation, an exact-gradient shallow network family,
//! training objectives, a deterministic trainer and preset experiments.

pub mod data;
pub mod experiments;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod presets;
pub mod rng;
pub mod scm;
pub mod svg;
pub mod trainer;
