//! Graph-matching model fusion for continual learning.
//!
//! Each new task is trained on a copy of the current model, then the two
//! models are aligned channel by channel and averaged. Shallow layers pair
//! channels of maximum similarity so common features are shared; the last
//! feature layers pair channels of minimum similarity so each task keeps its
//! own pathway through the network.

pub mod align;
pub mod continual;
pub mod data;
pub mod error;
pub mod matching;
pub mod net;
pub mod seed;

pub use error::{Error, Result};
