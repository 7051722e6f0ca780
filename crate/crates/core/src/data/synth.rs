use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassAnnotation, CountingSample, InstanceMask};
use crate::encoders::{BoundingBox, ImageInput};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn inside(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Triangle => {
                // apex up, base at y = r/2, inscribed in the radius-r circle
                let h = 1.5 * r;
                let t = (dy + r) / h;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r * 3f64.sqrt() / 2.0
            }
        }
    }

    /// Half extents of the tight box around a shape of half-extent `r`,
    /// as `(left/right, top, bottom)`.
    fn extent(self, r: f64) -> (f64, f64, f64) {
        match self {
            Shape::Square => (0.85 * r, 0.85 * r, 0.85 * r),
            Shape::Triangle => (r * 3f64.sqrt() / 2.0, r, 0.5 * r),
            _ => (r, r, r),
        }
    }
}

/// Named colors. The last four are held out of training palettes.
pub const COLORS: [(&str, [f64; 3]); 12] = [
    ("red", [0.86, 0.16, 0.14]),
    ("green", [0.18, 0.70, 0.24]),
    ("blue", [0.18, 0.32, 0.88]),
    ("yellow", [0.93, 0.84, 0.18]),
    ("magenta", [0.84, 0.22, 0.74]),
    ("cyan", [0.20, 0.80, 0.84]),
    ("orange", [0.95, 0.55, 0.12]),
    ("white", [0.92, 0.92, 0.90]),
    ("purple", [0.50, 0.26, 0.78]),
    ("pink", [0.97, 0.60, 0.72]),
    ("lime", [0.62, 0.90, 0.30]),
    ("teal", [0.10, 0.55, 0.52]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Train,
    Heldout,
    All,
}

impl Palette {
    pub fn colors(self) -> &'static [(&'static str, [f64; 3])] {
        match self {
            Palette::Train => &COLORS[..8],
            Palette::Heldout => &COLORS[8..],
            Palette::All => &COLORS,
        }
    }
}

pub fn color(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Half-extent range in pixels.
    pub size: (f64, f64),
    pub count: usize,
    /// Each object is drawn as two identical side-by-side parts.
    #[serde(default)]
    pub self_similar: bool,
    /// Class name; the shape name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl ClassSpec {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.shape.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    /// `0` keeps objects well apart; `1` packs them so tightly that their
    /// bounding boxes overlap neighbours.
    #[serde(default)]
    pub clutter: f64,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    /// Pixel noise amplitude.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Exemplar boxes drawn per class.
    #[serde(default = "default_exemplars")]
    pub exemplars: usize,
    pub seed: u64,
}

fn default_background() -> [f64; 3] {
    [0.22, 0.22, 0.24]
}

fn default_noise() -> f64 {
    0.04
}

fn default_exemplars() -> usize {
    3
}

const PLACEMENT_TRIES: usize = 4000;

#[derive(Clone, Copy, Debug)]
struct Placed {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
    shade: f64,
}

impl Placed {
    /// Centers and half-extents of the drawn parts.
    fn parts(&self, spec: &ClassSpec) -> Vec<(f64, f64, f64)> {
        if spec.self_similar {
            let pr = self.r / 2.0;
            vec![(self.cx - pr, self.cy, pr), (self.cx + pr, self.cy, pr)]
        } else {
            vec![(self.cx, self.cy, self.r)]
        }
    }

    fn inside(&self, spec: &ClassSpec, x: f64, y: f64) -> bool {
        self.parts(spec).iter().any(|&(px, py, pr)| spec.shape.inside(x - px, y - py, pr))
    }

    fn bbox(&self, spec: &ClassSpec) -> BoundingBox {
        let mut b: Option<BoundingBox> = None;
        for (px, py, pr) in self.parts(spec) {
            let (hw, top, bottom) = spec.shape.extent(pr);
            let pb = BoundingBox::new(px - hw, py - top, px + hw, py + bottom);
            b = Some(match b {
                None => pb,
                Some(a) => BoundingBox::new(a.x0.min(pb.x0), a.y0.min(pb.y0), a.x1.max(pb.x1), a.y1.max(pb.y1)),
            });
        }
        b.expect("at least one part")
    }
}

/// Renders a scene and its exact annotations. Pure in `spec`.
pub fn generate(spec: &SceneSpec) -> Result<CountingSample> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as f64, spec.height as f64);

    // larger objects first so packing succeeds more often
    let mut queue: Vec<(usize, f64)> = Vec::new();
    for (c, cs) in spec.classes.iter().enumerate() {
        for _ in 0..cs.count {
            queue.push((c, rng.gen_range(cs.size.0..=cs.size.1)));
        }
    }
    queue.sort_by(|a, b| b.1.total_cmp(&a.1));

    let spacing = 1.0 - 0.45 * spec.clutter.clamp(0.0, 1.0);
    let mut placed: Vec<Placed> = Vec::with_capacity(queue.len());
    for &(class, r) in &queue {
        let margin = r + 1.0;
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.gen_range(margin..(w - margin));
            let cy = rng.gen_range(margin..(h - margin));
            let free = placed.iter().all(|p| {
                let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                d >= (p.r + r) * spacing + 1.5
            });
            if free {
                ok = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = ok.ok_or_else(|| {
            Error::invalid(format!(
                "could not place {} objects on a {}x{} canvas",
                queue.len(),
                spec.width,
                spec.height
            ))
        })?;
        placed.push(Placed {
            class,
            cx,
            cy,
            r,
            shade: rng.gen_range(0.88..1.12),
        });
    }
    // restore a per-class order that does not depend on object size
    placed.shuffle(&mut rng);

    let mut pixels = Vec::with_capacity(spec.width * spec.height * 3);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut rgb = spec.background;
            for p in &placed {
                let cs = &spec.classes[p.class];
                if (x as f64 + 0.5 - p.cx).abs() > p.r + 1.0 || (y as f64 + 0.5 - p.cy).abs() > p.r + 1.0 {
                    continue;
                }
                // 2x2 supersampled coverage
                let mut cover = 0.0;
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if p.inside(cs, x as f64 + ox, y as f64 + oy) {
                        cover += 0.25;
                    }
                }
                if cover > 0.0 {
                    for c in 0..3 {
                        let col = (cs.color[c] * p.shade).clamp(0.0, 1.0);
                        rgb[c] = rgb[c] * (1.0 - cover) + col * cover;
                    }
                }
            }
            for v in &mut rgb {
                *v = (*v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
            }
            pixels.extend(rgb);
        }
    }
    let image = ImageInput::new(spec.height, spec.width, pixels)?;

    let mut classes = Vec::with_capacity(spec.classes.len());
    for (c, cs) in spec.classes.iter().enumerate() {
        let objects: Vec<&Placed> = placed.iter().filter(|p| p.class == c).collect();
        let n_ex = spec.exemplars.min(objects.len());
        let exemplars = objects[..n_ex]
            .iter()
            .map(|p| {
                let b = p.bbox(cs);
                BoundingBox::new(b.x0.max(0.0), b.y0.max(0.0), b.x1.min(w), b.y1.min(h))
            })
            .collect();
        let masks = objects[..n_ex]
            .iter()
            .map(|p| InstanceMask::from_fn(spec.width, spec.height, |x, y| p.inside(cs, x as f64 + 0.5, y as f64 + 0.5)))
            .collect();
        classes.push(ClassAnnotation {
            name: cs.name().to_string(),
            points: objects.iter().map(|p| (p.cx, p.cy)).collect(),
            exemplars,
            masks,
            parts: objects
                .iter()
                .map(|p| p.parts(cs).iter().map(|&(x, y, _)| (x, y)).collect())
                .collect(),
        });
    }
    Ok(CountingSample {
        id: format!("synth-{:016x}", spec.seed),
        image,
        classes,
        keyword_span: None,
        text: None,
    })
}

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.classes.is_empty() {
        return Err(Error::invalid("scene needs at least one class"));
    }
    for cs in &spec.classes {
        let (lo, hi) = cs.size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("bad size range {:?}", cs.size)));
        }
        if 2.0 * hi + 2.0 >= spec.width.min(spec.height) as f64 {
            return Err(Error::invalid("objects do not fit on the canvas"));
        }
    }
    let mut names: Vec<&str> = spec.classes.iter().map(ClassSpec::name).collect();
    names.sort();
    names.dedup();
    if names.len() != spec.classes.len() {
        return Err(Error::invalid("every class in a scene needs its own name"));
    }
    if spec.classes[0].count == 0 {
        return Err(Error::invalid("the primary class needs at least one object"));
    }
    ImageInput::filled(spec.height, spec.width, spec.background).map(|_| ())
}

/// Recipe for a family of random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub count_range: (usize, usize),
    /// Half-extent range in pixels.
    pub size_range: (f64, f64),
    /// Number of classes per scene (the first is the primary class).
    pub classes_per_scene: usize,
    pub distractor_count_range: (usize, usize),
    pub palette: Palette,
    pub shapes: Vec<Shape>,
    pub self_similar: bool,
    pub clutter: f64,
    pub exemplars: usize,
    /// Name classes by color and shape ("red circle") instead of shape.
    #[serde(default)]
    pub color_names: bool,
    /// Draw every class's shape independently, so that a distractor may
    /// share the primary class's shape and differ only in color. Needs
    /// `color_names` to keep class names apart.
    #[serde(default)]
    pub shared_shapes: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            width: 96,
            height: 96,
            count_range: (7, 30),
            size_range: (4.0, 6.0),
            classes_per_scene: 1,
            distractor_count_range: (3, 12),
            palette: Palette::Train,
            shapes: Shape::ALL.to_vec(),
            self_similar: false,
            clutter: 0.0,
            exemplars: 3,
            color_names: false,
            shared_shapes: false,
        }
    }
}

impl DatasetSpec {
    /// Draws the scene spec for sample `index` of a dataset seeded by `seed`.
    pub fn scene(&self, seed: u64, index: usize) -> SceneSpec {
        let scene_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let mut shapes = self.shapes.clone();
        shapes.shuffle(&mut rng);
        // classes of one scene never share a color
        let mut colors = self.palette.colors().to_vec();
        colors.shuffle(&mut rng);
        let mut classes = Vec::new();
        for c in 0..self.classes_per_scene.clamp(1, shapes.len()) {
            let range = if c == 0 {
                self.count_range
            } else {
                self.distractor_count_range
            };
            let shape = if self.shared_shapes {
                shapes[rng.gen_range(0..shapes.len())]
            } else {
                shapes[c]
            };
            let (color_name, color) = colors[c % colors.len()];
            classes.push(ClassSpec {
                shape,
                color,
                size: self.size_range,
                count: rng.gen_range(range.0..=range.1),
                self_similar: self.self_similar,
                name: self.color_names.then(|| format!("{color_name} {}", shape.name())),
            });
        }
        SceneSpec {
            width: self.width,
            height: self.height,
            classes,
            clutter: self.clutter,
            background: default_background(),
            noise: default_noise(),
            exemplars: self.exemplars,
            seed: scene_seed,
        }
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<CountingSample>> {
        (0..n)
            .map(|i| {
                let mut s = generate(&self.scene(seed, i))?;
                s.id = format!("{seed}-{i:05}");
                Ok(s)
            })
            .collect()
    }
}
