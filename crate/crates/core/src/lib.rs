//! Multimodal generative recommendation.
//!
//! Items and users are encoded per modality (text, categories, numeric
//! features), mixed by cross-modal attention and adaptive weighted fusion, and
//! fed as soft prefix tokens to a small causal decoder over item ids together
//! with metadata retrieved from the dataset itself. Training can be
//! propensity-weighted and adversarially debiased; recommendations carry
//! templated explanations; an online loop adapts the model to a feedback
//! stream under an elastic weight consolidation anchor.

pub mod adaptive;
pub mod dataset;
pub mod debias;
pub mod error;
pub mod eval;
pub mod explain;
pub mod generator;
pub mod harness;
pub mod layers;
pub mod multimodal;
pub mod numerics;
pub mod retrieval;

pub use error::{Error, Result};
