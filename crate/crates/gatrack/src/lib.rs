//! gatrack: a Siamese graph-attention visual tracker.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod gam;
pub mod geometry;
pub mod head;
pub mod model;
pub mod numerics;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Mode, Tensor};
