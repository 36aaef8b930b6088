//! Sequential recommenders trained under contrastive objectives, diagonal
//! Fisher estimation with batch and item sampling, and Fisher-weighted
//! parameter merging.

pub mod data;
pub mod config;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod frameworks;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod train;
pub mod util;

pub use error::{Error, ErrorClass, Result};
