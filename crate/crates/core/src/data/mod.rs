//! Counting samples: synthetic scene generation and manifest I/O.

mod manifest;
mod mask;
mod names;
mod synth;

pub use manifest::{load_annotations, save_annotations, Correction, Manifest, SCHEMA_VERSION};
pub use mask::InstanceMask;
pub use names::{normalize_class_name, singularize};
pub use synth::{color, generate, ClassSpec, DatasetSpec, Palette, SceneSpec, Shape, COLORS};

use crate::encoders::{BoundingBox, ImageInput};

/// Annotations of one object class in an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnnotation {
    pub name: String,
    /// Object centers in pixel coordinates.
    pub points: Vec<(f64, f64)>,
    pub exemplars: Vec<BoundingBox>,
    /// Instance masks of the exemplars (empty when unavailable).
    pub masks: Vec<InstanceMask>,
    /// Centers of the visually repeated parts of every object (synthetic
    /// data only; one entry per point).
    pub parts: Vec<Vec<(f64, f64)>>,
}

impl ClassAnnotation {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>, exemplars: Vec<BoundingBox>) -> Self {
        ClassAnnotation {
            name: name.into(),
            points,
            exemplars,
            masks: Vec::new(),
            parts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountingSample {
    pub id: String,
    pub image: ImageInput,
    /// The first class is the one to count; others are labelled distractors.
    pub classes: Vec<ClassAnnotation>,
    /// Token range of the subject when the caption is longer than the class name.
    pub keyword_span: Option<(usize, usize)>,
    /// Caption override for the primary class.
    pub text: Option<String>,
}

impl CountingSample {
    pub fn primary(&self) -> &ClassAnnotation {
        &self.classes[0]
    }

    /// Ground-truth count of the primary class.
    pub fn count(&self) -> usize {
        self.classes[0].points.len()
    }

    /// Text naming the primary class.
    pub fn class_text(&self) -> String {
        self.text.clone().unwrap_or_else(|| self.classes[0].name.clone())
    }

    /// All class names joined into one caption, `"a . b ."`.
    pub fn caption(&self) -> String {
        let mut names = vec![self.class_text()];
        names.extend(self.classes[1..].iter().map(|c| c.name.clone()));
        names.iter().map(|n| format!("{n} .")).collect::<Vec<_>>().join(" ")
    }
}
