//! Few-step sampling for embedding-space seq2seq diffusion language models.
//!
//! A small bidirectional transformer is pretrained as a continuous diffusion
//! model over token embeddings, then fine-tuned onto straight-line flow
//! matching paths so that one to five average-velocity Euler steps produce
//! text. Everything from the autodiff tape to the metrics lives here.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diagnose;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod sample;
pub mod schedule;
pub mod textspace;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Graph, Tensor, Var};
