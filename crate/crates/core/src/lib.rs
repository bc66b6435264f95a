//! Two-stream frame-grid diffusion: a base video transformer reused along both
//! axes of a view × time grid of frames, with per-layer synchronization.

pub mod cli;
pub mod config;
pub mod dit;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grid;
pub mod io;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sample;
pub mod sync;
pub mod synth;

pub use error::{Error, Result};
