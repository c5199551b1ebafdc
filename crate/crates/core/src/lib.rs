//! Recommender dialogue with neural response templates.
//!
//! A transformer encoder-decoder generates responses in which item mentions
//! are `[ITEM]` slots; a stacked-attention item selector fills each slot from
//! a knowledge-graph recommender's candidate set.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod recommender;
pub mod training;

pub use error::{Error, Result};
