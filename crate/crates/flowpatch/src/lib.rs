//! Region-masked image editing on a small rectified-flow transformer.
//!
//! The pieces, roughly bottom-up:
//!
//! - [`image`]: PNG/PPM loading, saving, grayscale, resize.
//! - [`canny`]: Gaussian blur, Sobel gradients, and Canny edge maps.
//! - [`tensor`] / [`graph`]: dense f64 tensors and a reverse-mode tape.
//! - [`text`]: fixed vocabulary, tokenizer, prompt spans.
//! - [`masks`]: patch masks, soft point masks, token layouts, attention masks.
//! - [`model`]: the joint image-text transformer and its edge-control branch.
//! - [`flow`]: straight-path noising, inversion and denoising loops, the
//!   control cache.
//! - [`dataset`]: synthetic shape scenes with captions.
//! - [`train`]: velocity-matching training loop.
//! - [`metrics`]: background preservation, edge agreement, edit scoring.
//! - [`edit`]: the full editing pipeline (add, replace, remove) and its
//!   ablation switches.
//!
//! Everything is `f64` and deterministic: a fixed seed gives bitwise
//! identical results, with or without the `parallel` feature.

pub mod canny;
pub mod dataset;
pub mod edit;
pub mod error;
pub mod flow;
pub mod graph;
pub mod image;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
