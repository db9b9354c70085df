//! Training stack for adaptive recurrent lateral blocks: a block re-reads
//! its input for K iterations while a second head rewrites the block's
//! weights from its own activations, trained in two phases with an
//! improvement hinge on the per-iteration losses.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod mnist;
pub mod models;
pub mod optim;
pub mod params;
pub mod runner;
pub mod svgplot;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
