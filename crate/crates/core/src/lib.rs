//! Training and explanation engine for GAN-based polyp/instrument
//! segmentation.
//!
//! The crate builds an encoder-decoder generator with skip connections and a
//! patch discriminator, trains them adversarially on image/mask pairs, and
//! explains the trained generator's predictions by propagating output
//! relevance backwards layer by layer into per-pixel heatmaps.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gemm;
pub mod heatmap;
pub mod lrp;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
