//! A desk-scale TinyLlama: autograd tape, decoder blocks, AdamW training
//! with checkpoints, mixture data sampling, KV-cached decoding and
//! multiple-choice evaluation.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

mod fsutil;

pub use error::{Error, Result};
