//! Approximation-aware workflow engine.

pub mod canon;
pub mod model;
pub mod equivalence;
pub mod factoring;
pub mod kb;
pub mod par;
pub mod policy;
pub mod runtime;
pub mod substitution;
