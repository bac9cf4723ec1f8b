//! Mean-shift self-supervised learning.
//!
//! An online encoder is trained to move the embedding of one augmented view
//! of an image toward the mean of the nearest neighbours of the other view's
//! target embedding, looked up in a FIFO memory bank of recent target
//! embeddings. The target encoder is an exponential moving average of the
//! online one.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod membank;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
