//! Numerical core of the vision-token compression lab.
//!
//! Everything here is `no_std` + `alloc`: a deterministic dense tensor engine
//! with hand-written adjoints, compression projectors, the Vision Remember
//! re-fusion block, a toy causal multimodal decoder, token-pruning baselines,
//! an analytic cost model and a linear-probing harness.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod checks;
pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod probe;
pub mod projectors;
pub mod pruning;
pub mod rng;
pub mod spatial;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
pub mod vision_remember;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::RngState;
pub use tape::{Graph, Var};
pub use tensor::Tensor;
