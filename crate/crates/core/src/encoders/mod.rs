//! Image, exemplar and text token streams.

mod image;
mod text;
mod visual;

pub use image::{ImageInput, MIN_SIDE};
pub use text::{TextConfig, TextEncoder, TextPrompt, Vocabulary, SEPARATOR};
pub use visual::{
    roi_align_weights, BoundingBox, EncoderConfig, ExemplarEncoder, FeatureLevel, ImageEncoder, MultiScaleFeatures,
};
