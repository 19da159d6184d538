//! Trainable multi-modal outfit scoring with greedy set composition.
//!
//! The crate covers the full pipeline: raw-corpus preparation, a
//! self-contained differentiable scoring network (hand-written
//! backward passes, finite-difference verified), Adam training with a
//! halving schedule, ranking metrics, greedy composition and its
//! constrained evaluation protocol, plus a synthetic corpus generator
//! for end-to-end runs without the original crawl.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wordvec;

pub use error::{Error, Result};
pub use rng::Rng;
