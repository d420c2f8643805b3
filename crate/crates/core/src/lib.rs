//! Multi-level second-order few-shot learning.
//!
//! Images are encoded at several abstraction levels and input scales, pooled
//! into power-normalized autocorrelation matrices, paired into relation
//! descriptors and scored by small similarity networks. Everything trains end
//! to end on a small reverse-mode tape.

pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod matching;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod reldesc;
pub mod runner;
pub mod simnet;
pub mod sop;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
