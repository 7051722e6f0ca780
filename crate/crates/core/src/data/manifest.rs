use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_class_name, ClassAnnotation, CountingSample, InstanceMask};
use crate::encoders::{BoundingBox, ImageInput};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Annotation manifest: image id to annotations, plus per-image
/// corrections applied at load time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub images: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<Correction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    file: String,
    classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyword_span: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    name: String,
    points: Vec<[f64; 2]>,
    #[serde(default)]
    exemplars: Vec<[f64; 4]>,
    /// Inline `rle:` strings or PNG paths relative to the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    masks: Vec<String>,
}

/// Per-image fix: discard the exemplars (text-only prompting) and/or
/// replace the class text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correction {
    pub id: String,
    #[serde(default)]
    pub drop_exemplars: bool,
    #[serde(default)]
    pub text: Option<String>,
}

fn schema(id: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        image_id: id.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

/// Pulls the offending field name out of a serde message when present.
fn serde_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("entry").to_string()
}

/// Loads and validates a manifest, normalizing class names and applying
/// corrections. Image and mask paths resolve relative to the manifest.
pub fn load_annotations(path: &Path) -> Result<Vec<CountingSample>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| schema("", &serde_field(&e.to_string()), e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(schema(
            "",
            "schema_version",
            format!("expected {SCHEMA_VERSION}, found {}", manifest.schema_version),
        ));
    }
    for c in &manifest.corrections {
        if !manifest.images.contains_key(&c.id) {
            return Err(schema(&c.id, "corrections", "correction for an image that is not in the manifest"));
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.images.len());
    for (id, value) in &manifest.images {
        let entry: ImageEntry =
            serde_json::from_value(value.clone()).map_err(|e| schema(id, &serde_field(&e.to_string()), e.to_string()))?;
        let mut sample = build_sample(id, entry, base)?;
        for c in manifest.corrections.iter().filter(|c| &c.id == id) {
            if c.drop_exemplars {
                sample.classes[0].exemplars.clear();
                sample.classes[0].masks.clear();
            }
            if let Some(t) = &c.text {
                sample.text = Some(t.clone());
            }
        }
        out.push(sample);
    }
    Ok(out)
}

fn build_sample(id: &str, entry: ImageEntry, base: &Path) -> Result<CountingSample> {
    let image = ImageInput::load(&base.join(&entry.file)).map_err(|e| schema(id, "file", e.to_string()))?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    if entry.classes.is_empty() {
        return Err(schema(id, "classes", "at least one class is required"));
    }
    let mut classes = Vec::with_capacity(entry.classes.len());
    for (ci, c) in entry.classes.into_iter().enumerate() {
        let name = normalize_class_name(&c.name);
        if name.is_empty() {
            return Err(schema(id, "name", format!("class {ci} has an empty name")));
        }
        if ci == 0 && c.points.is_empty() {
            return Err(schema(id, "points", "the primary class needs at least one point"));
        }
        for p in &c.points {
            if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
                return Err(schema(id, "points", format!("point {p:?} outside the {w}x{h} image")));
            }
        }
        let exemplars: Vec<BoundingBox> = c.exemplars.iter().map(|b| BoundingBox::new(b[0], b[1], b[2], b[3])).collect();
        for b in &exemplars {
            b.validate(w, h).map_err(|e| schema(id, "exemplars", e.to_string()))?;
        }
        let mut masks = Vec::with_capacity(c.masks.len());
        for m in &c.masks {
            let mask = InstanceMask::resolve(m, base).map_err(|e| schema(id, "masks", e.to_string()))?;
            if mask.width() != image.width() || mask.height() != image.height() {
                return Err(schema(id, "masks", "mask size differs from the image"));
            }
            masks.push(mask);
        }
        if !masks.is_empty() && masks.len() != exemplars.len() {
            return Err(schema(id, "masks", "one mask per exemplar is required"));
        }
        let mut ann = ClassAnnotation::new(name, c.points.iter().map(|p| (p[0], p[1])).collect(), exemplars);
        ann.masks = masks;
        classes.push(ann);
    }
    let keyword_span = match entry.keyword_span {
        Some([a, b]) if a >= b => return Err(schema(id, "keyword_span", "empty span")),
        Some([a, b]) => Some((a, b)),
        None => None,
    };
    Ok(CountingSample {
        id: id.to_string(),
        image,
        classes,
        keyword_span,
        text: entry.text,
    })
}

/// Writes every image as `<id>.png` next to the manifest, masks inline as
/// run-length strings, and the manifest itself.
pub fn save_annotations(samples: &[CountingSample], path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(base)?;
    let mut images = BTreeMap::new();
    for s in samples {
        let file = format!("{}.png", s.id);
        s.image.save_png(&base.join(&file))?;
        let entry = ImageEntry {
            file,
            classes: s
                .classes
                .iter()
                .map(|c| ClassEntry {
                    name: c.name.clone(),
                    points: c.points.iter().map(|&(x, y)| [x, y]).collect(),
                    exemplars: c.exemplars.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
                    masks: c.masks.iter().map(InstanceMask::to_rle).collect(),
                })
                .collect(),
            keyword_span: s.keyword_span.map(|(a, b)| [a, b]),
            text: s.text.clone(),
        };
        images.insert(s.id.clone(), serde_json::to_value(entry)?);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        images,
        corrections: Vec::new(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
