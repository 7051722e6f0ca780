//! Open-world object counting prompted by visual exemplars, text, or both.
//!
//! The pipeline encodes an image into multi-scale tokens, turns exemplar
//! boxes into tokens by RoI pooling the image features, fuses exemplar and
//! text tokens with the image through an attention stack, selects the image
//! tokens most similar to the prompt as detection queries, and scores every
//! decoded query against every prompt token. Queries whose best score clears
//! a threshold are counted.

pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod inference;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
