//! Semantic 1D image tokenizer with binary spherical quantization, a
//! flow-matching / refiner decoder, and a masked autoregressive generator,
//! all built on a small CPU autodiff core.

pub mod argen;
pub mod ckpt;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod nnblocks;
pub mod optim;
pub mod quantizer;
pub mod teacher;
pub mod tokenizer;
pub mod toydata;

pub use diffcore::{Array, Graph, Scalar, Tape, Var};
pub use error::{Error, Result};
