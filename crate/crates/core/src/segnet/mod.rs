//! The language-modulated U-Net: backbone and location features, text-kernel
//! modulated contracting and expanding paths, and the upsampling stack that
//! restores the input resolution.

mod config;
mod location;
mod model;

pub use config::{Modulation, NetConfig, CONV_KERNEL, CONV_PAD, CONV_STRIDE};
pub use location::build_location_features;
pub use model::{predict_mask, ForwardOutput, SegNet};
