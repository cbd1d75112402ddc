//! Numerical rough stochastic calculus.
//!
//! Rough path lifts of Brownian samples, joint lifts with martingales,
//! controlled paths and seven-component controlled field jets with their
//! composition algebra, RDE flow jets, rough and rough stochastic integrals,
//! and refinement-based verifiers for the Itô–Wentzell family of identities.

pub mod controlled;
pub mod diagnostics;
pub mod error;
pub mod functions;
pub mod integration;
pub mod rde_flows;
pub mod grid_paths;
pub mod iag;
pub mod rng;
pub mod rough_lift;
pub mod stochastic_formulas;
pub mod tensor;

pub use error::{Error, Result};
pub use grid_paths::{ChenRule, GridPath, TimeGrid, TwoParamGrid};
pub use rough_lift::{BracketPath, LiftKind, MartingaleSample, RoughPath};
pub use tensor::Tensor;
