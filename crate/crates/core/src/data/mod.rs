//! Synthetic video pairs and clips, colour conversion and frame I/O.

pub mod color;
pub mod generator;
pub mod io;

use crate::numerics::Tensor;

pub use color::{channel_dropout, lab_to_rgb, rgb_to_lab};
pub use generator::{
    apply_jitter, gen_clip, gen_pair, Domain, GeneratorConfig, GtTrack, Layer, Scene, Shape, SyntheticClip, Texture,
    TextureMode, VideoPair,
};
pub use io::{load_clip, read_flow, read_image, read_label_map, read_mask, save_clip, write_flow, write_label_map, write_mask, write_ppm};

/// `h x w x 3` image with values in `[0, 1]`.
pub type Image = Tensor<f32>;
