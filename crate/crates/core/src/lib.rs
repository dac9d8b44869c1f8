//! 2.5D lung-nodule segmentation with adjacent-slice feature fusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: a small reverse-mode engine over rank-4
//!   tensors, with finite-difference gradient checking and Adam.
//! - [`imaging`]: Gaussian blur, Canny, edge-band ground truth and mask pyramids.
//! - [`volume`]: volume I/O, HU windowing, slice triplets, 4x4 tiling and the
//!   synthetic phantom generator.
//! - [`network`]: shared residual encoder, attention-guided slice fusion,
//!   U-Net decoder, multi-scale fusion and the edge branch.
//! - [`losses`] and [`metrics`]: the training objective and the evaluation protocol.
//! - [`harness`]: the `prepare` / `train` / `predict` / `evaluate` / `ablation`
//!   / `gradcheck` / `edge-gt` commands.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
