//! Crowd counting with a two-pass feedback network.
//!
//! The first pass predicts a priority map of likely crowd regions. The input
//! image and that map go through a column-relevance block ([`region_aware`])
//! that mixes image columns according to their affinity with priority-map
//! columns, and the enhanced image is counted by a second pass. Training uses
//! a Bayesian loss on point annotations ([`bayes`]).
//!
//! Everything runs on a small reverse-mode differentiation engine
//! ([`autodiff`]) whose primitives can be checked against finite differences.

pub mod autodiff;
pub mod bayes;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod formats;
pub mod net;
pub mod region_aware;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
