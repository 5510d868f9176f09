//! Synthetic shapes world: scenes of up to four colored shapes on a 64×64
//! canvas, rendered exactly, described by templated captions whose phrase
//! spans ground each object's box.

mod dataset;
pub mod metrics;
mod vocab;

pub use dataset::{dataset_hash, read_dataset, write_dataset, PixelEncoding};
pub use vocab::{Vocab, BOS, EOS, MASK, PAD};

use serde::{Deserialize, Serialize};

use fiber_tensor::{Rng, Tensor};

use crate::error::{Error, Result};
use crate::objectives::BBox;

pub const CANVAS: usize = 64;
pub const MIN_SIZE: u32 = 14;
pub const MAX_SIZE: u32 = 24;
pub const MAX_OBJECTS: usize = 4;
const PLACEMENT_TRIES: usize = 100;
const MAX_OVERLAP_IOU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 25],
            Color::Green => [30, 200, 40],
            Color::Blue => [30, 60, 230],
            Color::Yellow => [240, 220, 30],
            Color::Purple => [140, 40, 180],
            Color::Orange => [250, 140, 20],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Center in pixels (integer lattice).
    pub cx: u32,
    pub cy: u32,
    /// Side of the bounding square.
    pub size: u32,
}

impl SceneObject {
    pub fn bbox(&self) -> BBox {
        let h = self.size as f64 / 2.0;
        let (cx, cy) = (self.cx as f64, self.cy as f64);
        BBox::new(cx - h, cy - h, cx + h, cy + h)
    }

    /// Whether the point lies inside the filled shape.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let b = self.bbox();
        match self.shape {
            Shape::Square => x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2,
            Shape::Circle => {
                let r = self.size as f64 / 2.0;
                let (dx, dy) = (x - self.cx as f64, y - self.cy as f64);
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle => {
                // apex at top center, base along the bottom edge
                if y < b.y1 || y > b.y2 {
                    return false;
                }
                let half = (y - b.y1) / (b.y2 - b.y1) * self.size as f64 / 2.0;
                (x - self.cx as f64).abs() <= half
            }
        }
    }

    pub fn phrase(&self) -> [&'static str; 2] {
        [self.color.word(), self.shape.word()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Data(format!("scene has {} objects", self.objects.len())));
        }
        let canvas = CANVAS as f64;
        for (i, o) in self.objects.iter().enumerate() {
            let b = o.bbox();
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > canvas || b.y2 > canvas {
                return Err(Error::Data(format!("object {i} leaves the canvas")));
            }
            for p in &self.objects[..i] {
                if crate::objectives::iou(&b, &p.bbox()) >= MAX_OVERLAP_IOU {
                    return Err(Error::Data(format!("object {i} overlaps another")));
                }
            }
        }
        Ok(())
    }
}

/// Draws 1–4 objects with distinct (color, shape) pairs and pairwise box IoU
/// below 0.1. If an object cannot be placed in 100 tries, all sizes are
/// redrawn.
pub fn generate_scene(rng: &mut Rng) -> SceneSpec {
    let n = rng.int_range(1, MAX_OBJECTS as i64) as usize;
    let mut kinds: Vec<(Color, Shape)> = Vec::with_capacity(n);
    while kinds.len() < n {
        let k = (Color::ALL[rng.below(6)], Shape::ALL[rng.below(3)]);
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    'sizes: loop {
        let sizes: Vec<u32> = (0..n).map(|_| rng.int_range(MIN_SIZE as i64, MAX_SIZE as i64) as u32).collect();
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for (&(color, shape), &size) in kinds.iter().zip(&sizes) {
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let lo = size.div_ceil(2) as i64;
                let hi = (CANVAS as u32 - size.div_ceil(2)) as i64;
                let candidate = SceneObject {
                    shape,
                    color,
                    cx: rng.int_range(lo, hi) as u32,
                    cy: rng.int_range(lo, hi) as u32,
                    size,
                };
                let b = candidate.bbox();
                if objects.iter().all(|o| crate::objectives::iou(&b, &o.bbox()) < MAX_OVERLAP_IOU) {
                    objects.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'sizes;
            }
        }
        return SceneSpec { objects };
    }
}

/// 8-bit RGB raster, `CANVAS × CANVAS × 3`, row-major. Pixel `(i, j)` takes
/// the color of the last object covering its center `(j + 0.5, i + 0.5)`.
pub fn render_bytes(spec: &SceneSpec) -> Vec<u8> {
    let mut px = vec![0u8; CANVAS * CANVAS * 3];
    for o in &spec.objects {
        let b = o.bbox();
        let (r0, r1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(CANVAS));
        let (c0, c1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(CANVAS));
        for i in r0..r1 {
            for j in c0..c1 {
                if o.covers(j as f64 + 0.5, i as f64 + 0.5) {
                    px[(i * CANVAS + j) * 3..][..3].copy_from_slice(&o.color.rgb());
                }
            }
        }
    }
    px
}

/// Pixels in `[0, 1]` as `[CANVAS, CANVAS, 3]`.
pub fn render(spec: &SceneSpec) -> Tensor {
    bytes_to_tensor(&render_bytes(spec))
}

pub(crate) fn bytes_to_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(vec![CANVAS, CANVAS, 3], bytes.iter().map(|&b| b as f64 / 255.0).collect()).expect("canvas shape")
}

/// Box plus the half-open token span `[start, end)` (indices into the
/// bos-framed token ids) naming the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingTarget {
    pub bbox: BBox,
    pub span: (usize, usize),
}

fn relation(a: &SceneObject, b: &SceneObject) -> &'static [&'static str] {
    let dx = b.cx as i64 - a.cx as i64;
    let dy = b.cy as i64 - a.cy as i64;
    if dx.abs() >= dy.abs() {
        if dx >= 0 {
            &["left", "of"]
        } else {
            &["right", "of"]
        }
    } else if dy >= 0 {
        &["above"]
    } else {
        &["below"]
    }
}

/// Templated caption: objects described in pairs joined by "and", each pair
/// as "a C S <relation> a C S". Token position 0 is bos, so word `w` sits at
/// token `w + 1`.
pub fn make_caption(spec: &SceneSpec) -> (String, Vec<GroundingTarget>) {
    let mut words: Vec<&str> = Vec::new();
    let mut targets = Vec::with_capacity(spec.objects.len());
    let mut push_object = |words: &mut Vec<&str>, o: &SceneObject| {
        words.push("a");
        let start = words.len() + 1;
        words.extend_from_slice(&o.phrase());
        targets.push(GroundingTarget {
            bbox: o.bbox(),
            span: (start, start + 2),
        });
    };
    for (pi, pair) in spec.objects.chunks(2).enumerate() {
        if pi > 0 {
            words.push("and");
        }
        push_object(&mut words, &pair[0]);
        if let Some(second) = pair.get(1) {
            words.extend_from_slice(relation(&pair[0], second));
            push_object(&mut words, second);
        }
    }
    (words.join(" "), targets)
}

/// Detection-as-grounding prompt: category phrases joined by periods
/// ("red square . blue circle ."), one per object.
pub fn detection_prompt(spec: &SceneSpec) -> (String, Vec<GroundingTarget>) {
    let mut words: Vec<&str> = Vec::new();
    let mut targets = Vec::new();
    for o in &spec.objects {
        let start = words.len() + 1;
        words.extend_from_slice(&o.phrase());
        words.push(".");
        targets.push(GroundingTarget {
            bbox: o.bbox(),
            span: (start, start + 2),
        });
    }
    (words.join(" "), targets)
}

/// Answer labels of the question-answering task.
pub const ANSWERS: [&str; 13] = [
    "red", "green", "blue", "yellow", "purple", "orange", "square", "circle", "triangle", "one", "two", "three", "four",
];

pub fn answer_label(word: &str) -> Option<usize> {
    ANSWERS.iter().position(|a| *a == word)
}

/// A question about the scene with a unique answer.
pub fn make_question(spec: &SceneSpec, rng: &mut Rng) -> (String, usize) {
    let objs = &spec.objects;
    let unique_shapes: Vec<&SceneObject> = objs.iter().filter(|o| objs.iter().filter(|p| p.shape == o.shape).count() == 1).collect();
    let unique_colors: Vec<&SceneObject> = objs.iter().filter(|o| objs.iter().filter(|p| p.color == o.color).count() == 1).collect();
    let mut kinds = vec![0usize];
    if !unique_shapes.is_empty() {
        kinds.push(1);
    }
    if !unique_colors.is_empty() {
        kinds.push(2);
    }
    let label = |w: &str| answer_label(w).expect("answer word");
    match kinds[rng.below(kinds.len())] {
        1 => {
            let o = unique_shapes[rng.below(unique_shapes.len())];
            (format!("what color is the {} ?", o.shape.word()), label(o.color.word()))
        }
        2 => {
            let o = unique_colors[rng.below(unique_colors.len())];
            (format!("what shape is the {} object ?", o.color.word()), label(o.shape.word()))
        }
        _ => ("how many objects are there ?".to_string(), label(ANSWERS[8 + objs.len()])),
    }
}

/// One synthetic example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: u64,
    pub scene: SceneSpec,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub targets: Vec<GroundingTarget>,
    pub prompt: String,
    pub prompt_tokens: Vec<usize>,
    pub prompt_targets: Vec<GroundingTarget>,
    pub question: String,
    pub question_tokens: Vec<usize>,
    pub label: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

impl Record {
    pub fn generate(seed: u64, index: u64, vocab: &Vocab) -> Record {
        let mut rng = Rng::derive(seed, index);
        let scene = generate_scene(&mut rng);
        let (caption, targets) = make_caption(&scene);
        let (prompt, prompt_targets) = detection_prompt(&scene);
        let (question, label) = make_question(&scene, &mut rng);
        let tok = |s: &str| vocab.tokenize(s).expect("templates use the built-in vocabulary");
        Record {
            index,
            pixels: render_bytes(&scene),
            tokens: tok(&caption),
            prompt_tokens: tok(&prompt),
            question_tokens: tok(&question),
            scene,
            caption,
            targets,
            prompt,
            prompt_targets,
            question,
            label,
        }
    }

    pub fn image(&self) -> Tensor {
        bytes_to_tensor(&self.pixels)
    }
}

/// Records `0..count` of the dataset keyed by `seed`; each record depends
/// only on `(seed, index)`.
pub fn generate_dataset(seed: u64, count: usize) -> Vec<Record> {
    #[cfg(feature = "parallel")]
    return generate_dataset_parallel(seed, count);
    #[cfg(not(feature = "parallel"))]
    generate_dataset_sequential(seed, count)
}

pub fn generate_dataset_sequential(seed: u64, count: usize) -> Vec<Record> {
    let vocab = Vocab::builtin();
    (0..count as u64).map(|i| Record::generate(seed, i, &vocab)).collect()
}

/// Splits the index range across threads; the output equals the sequential
/// one record for record.
#[cfg(feature = "parallel")]
pub fn generate_dataset_parallel(seed: u64, count: usize) -> Vec<Record> {
    use rayon::prelude::*;
    let vocab = Vocab::builtin();
    (0..count as u64).into_par_iter().map(|i| Record::generate(seed, i, &vocab)).collect()
}

/// Stacks record images into `[B, CANVAS, CANVAS, 3]`.
pub fn image_batch(records: &[&Record]) -> Tensor {
    let mut data = Vec::with_capacity(records.len() * CANVAS * CANVAS * 3);
    for r in records {
        data.extend(r.pixels.iter().map(|&b| b as f64 / 255.0));
    }
    Tensor::new(vec![records.len(), CANVAS, CANVAS, 3], data).expect("batch shape")
}
