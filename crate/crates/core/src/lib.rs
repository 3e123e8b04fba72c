//! Permutation-trained LSTM neighborhood encoders for link prediction, with
//! an adversarial permutation generator and locality-sensitive hashing for
//! sub-quadratic top-K retrieval.

pub mod adversary;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hash;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
