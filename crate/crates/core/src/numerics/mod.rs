//! Raster type, seeded random streams, and the pooling/differencing
//! primitives the style pyramid is built from.

mod image;
mod rng;

pub use image::{
    avg_pool2, avg_pool2_backward, diff_channels, diff_channels_backward, Image, Shape,
};
pub use rng::{gaussian_noise, RngStream};
