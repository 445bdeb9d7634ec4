//! Likelihood-based causal inference for longitudinal binary data with
//! time-varying confounding, built on a variation-independent
//! parameterization of the multiplicative structural nested mean model.
//!
//! The central object is a bijection between the natural parameters
//! (stage-wise blip ratios `theta`, covariate ratios `phi`, the generalized
//! odds product, and covariate transition probabilities `eta`) and the table
//! of outcome probabilities over all joint treatment/covariate histories.
//! Because the natural-parameter domain is a Cartesian product, the model can
//! be fit by unconstrained maximum likelihood; the crate layers covariate
//! models, simulation, the g-formula, bootstrap inference, and a Wald test of
//! the g-null hypothesis on top of that map.

pub mod data;
pub mod error;
pub mod history;
pub mod inference;
pub mod likelihood;
pub mod models;
pub mod optim;
pub mod parammap;
pub mod simulate;

pub use error::{Error, Result};
