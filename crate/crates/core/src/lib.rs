//! Change detection for co-registered intensity image pairs with a
//! graph-based knowledge supplement network.
//!
//! The pipeline: a log-ratio difference image and two-stage fuzzy clustering
//! produce pseudo-labels; patches around confident pixels train a small CNN
//! whose features are enhanced by graph reasoning and fused with features of
//! a labeled source dataset; the trained network classifies the remaining
//! pixels into a binary change map.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod grad_check;
pub mod grid;
pub mod imageio;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preclass;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{GksError, Result};
pub use grid::{Grid, Image, Mask};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
