//! Iris segmentation and localization with a MobileNetV2-encoder U-Net.
//!
//! The crate covers the whole path from pixels to evaluation numbers:
//!
//! * [`nn`]: tensors, convolution kernels, reverse-mode gradients, Adam.
//! * [`mobile_unet`]: the encoder-decoder network and its weight container.
//! * [`training`]: dice loss, augmentation, dataset splits, the training loop
//!   and the binarization-threshold sweep.
//! * [`metrics`]: E1, E2, Dice, Hausdorff, mDice/mHdis and rank sums.
//! * [`pipeline`]: segmentation, centroid crop, localization and map-back.
//! * [`dataset`]: manifests, mask files, subject filtering and folds.
//! * [`recognition`]: cosine nearest-neighbour matching and the fold protocol.

pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod mobile_unet;
pub mod nn;
pub mod pipeline;
pub mod recognition;
pub mod training;

pub use error::{Error, Result};
pub use metrics::BinaryMask;
pub use nn::Tensor;
