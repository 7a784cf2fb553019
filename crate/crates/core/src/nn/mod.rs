//! Minimal f64 neural-network toolkit: layers, the U-Net, heads and Adam.

pub mod adam;
pub mod head;
pub mod layers;
pub mod unet;

pub use adam::Adam;
pub use head::{student_forward, StudentHeadParams};
pub use layers::Fmap;
pub use unet::{UNet, UNetConfig, BOTTLENECK_CHANNELS};
