//! Continual test-time adaptation with random masked views.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape with stop-gradient.
//! - [`spectral`]: exact 2D DFT / inverse used by frequency masking.
//! - [`masking`]: the mask schedule, spatial and frequency masks, masked views.
//! - [`objectives`]: mask-consistency and entropy losses.
//! - [`model`], [`optim`], [`archive`], [`train`]: the layer-normalized
//!   classifier, Adam, parameter archives and source training.
//! - [`data`]: synthetic source data, corruptions and the target stream.
//! - [`harness`]: adaptation episodes, sweeps and report export.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod archive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use tensor::{Gradients, Tape, Tensor, Var};
