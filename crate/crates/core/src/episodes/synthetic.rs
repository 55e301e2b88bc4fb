use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, PixelBox, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the procedural dataset.
///
/// Every class has a distinctive glyph tile (its part) drawn in a class hue
/// at a class-specific anchor. Body shapes, body colors and distractor
/// glyphs come from pools shared by all classes, so only the part
/// identifies the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Number of train, val and test classes, in class order.
    pub splits: (usize, usize, usize),
    /// Side of the square part tile in pixels.
    pub part_size: usize,
    /// Maximum offset of a part from its class anchor, per axis.
    pub part_jitter: usize,
    /// Distractor tiles per image, drawn from a shared pool.
    pub distractors: usize,
    pub distractor_pool: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Maximum body center offset from the image center, per axis.
    pub body_jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 25,
            per_class: 40,
            image_size: 32,
            splits: (15, 5, 5),
            part_size: 8,
            part_jitter: 2,
            distractors: 2,
            distractor_pool: 6,
            noise: 0.04,
            body_jitter: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.splits;
        if a + b + c != self.classes || self.classes == 0 {
            return Err(Error::Invalid(format!(
                "split sizes {a}/{b}/{c} must add up to the class count {}",
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Invalid("per_class must be positive".into()));
        }
        if self.part_size < 4 || !self.part_size.is_multiple_of(2) {
            return Err(Error::Invalid(
                "part_size must be even and at least 4".into(),
            ));
        }
        if self.image_size < self.part_size + 2 * self.part_jitter + 4 {
            return Err(Error::Invalid(format!(
                "image size {} is too small for {}px parts with jitter {}",
                self.image_size, self.part_size, self.part_jitter
            )));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Invalid("noise must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum BodyFamily {
    Ellipse,
    Rectangle,
    Diamond,
    Triangle,
}

const FAMILIES: [BodyFamily; 4] = [
    BodyFamily::Ellipse,
    BodyFamily::Rectangle,
    BodyFamily::Diamond,
    BodyFamily::Triangle,
];

/// Mirror-symmetric binary tile, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Glyph {
    size: usize,
    bits: Vec<bool>,
}

impl Glyph {
    fn random<R: Rng>(size: usize, rng: &mut R) -> Glyph {
        let half = size / 2;
        let mut bits = vec![false; size * size];
        for r in 0..size {
            for c in 0..half {
                let on = rng.gen_bool(0.5);
                bits[r * size + c] = on;
                bits[r * size + size - 1 - c] = on;
            }
        }
        Glyph { size, bits }
    }

    fn distance(&self, other: &Glyph) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    fn fill(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }
}

/// Draws `count` glyphs pairwise at least `min_dist` bits apart.
fn glyph_set<R: Rng>(count: usize, size: usize, rng: &mut R) -> Vec<Glyph> {
    let min_dist = size * size * 3 / 16;
    let mut out: Vec<Glyph> = Vec::with_capacity(count);
    while out.len() < count {
        let g = Glyph::random(size, rng);
        let fill = g.fill();
        if (0.35..=0.65).contains(&fill) && out.iter().all(|o| o.distance(&g) >= min_dist) {
            out.push(g);
        }
    }
    out
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let area = self.size * self.size;
        for (ch, v) in rgb.into_iter().enumerate() {
            self.data[ch * area + y * self.size + x] = v;
        }
    }

    fn body(&mut self, family: BodyFamily, cx: f32, cy: f32, r: f32, rgb: [f32; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / r, (y as f32 + 0.5 - cy) / r);
                let inside = match family {
                    BodyFamily::Ellipse => dx * dx / 1.0 + dy * dy / 0.55 <= 1.0,
                    BodyFamily::Rectangle => dx.abs() <= 0.95 && dy.abs() <= 0.65,
                    BodyFamily::Diamond => dx.abs() + dy.abs() <= 1.0,
                    BodyFamily::Triangle => (-0.9..=0.7).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.6,
                };
                if inside {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    fn glyph(&mut self, g: &Glyph, x0: usize, y0: usize, fg: [f32; 3], bg: [f32; 3]) {
        for r in 0..g.size {
            for c in 0..g.size {
                let rgb = if g.bits[r * g.size + c] { fg } else { bg };
                self.put(x0 + c, y0 + r, rgb);
            }
        }
    }
}

struct ClassDesign {
    glyph: Glyph,
    hue: f32,
    anchor: (usize, usize),
}

/// Generates the dataset described by `spec`; the same spec always yields
/// bit-identical pixels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let size = spec.image_size;
    let part = spec.part_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut glyphs = glyph_set(spec.classes + spec.distractor_pool, part, &mut rng);
    let pool = glyphs.split_off(spec.classes);
    let margin = spec.part_jitter;
    let golden = 0.618_034_f32;
    let designs: Vec<ClassDesign> = glyphs
        .into_iter()
        .enumerate()
        .map(|(c, glyph)| ClassDesign {
            glyph,
            hue: (c as f32 * golden).fract(),
            anchor: (
                rng.gen_range(margin..=size - part - margin),
                rng.gen_range(margin..=size - part - margin),
            ),
        })
        .collect();

    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, d) in designs.iter().enumerate() {
        for i in 0..spec.per_class {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
            r.set_stream((class * spec.per_class + i) as u64 + 1);
            let bg = r.gen_range(0.05f32..0.25);
            let mut canvas = Canvas {
                size,
                data: vec![bg; 3 * size * size],
            };
            let j = spec.body_jitter as f32;
            let center = size as f32 / 2.0;
            let (cx, cy) = (center + r.gen_range(-j..=j), center + r.gen_range(-j..=j));
            let radius = size as f32 * r.gen_range(0.28f32..0.4);
            let body_rgb = hsv(r.gen(), r.gen_range(0.3..0.7), r.gen_range(0.45..0.75));
            let family = FAMILIES[r.gen_range(0..FAMILIES.len())];
            canvas.body(family, cx, cy, radius, body_rgb);
            for _ in 0..spec.distractors {
                if pool.is_empty() {
                    break;
                }
                let g = &pool[r.gen_range(0..pool.len())];
                let (x0, y0) = (r.gen_range(0..=size - part), r.gen_range(0..=size - part));
                canvas.glyph(g, x0, y0, hsv(r.gen(), 0.9, 1.0), [0.08; 3]);
            }
            let jit = spec.part_jitter as isize;
            let (ox, oy) = (r.gen_range(-jit..=jit), r.gen_range(-jit..=jit));
            let x0 = (d.anchor.0 as isize + ox) as usize;
            let y0 = (d.anchor.1 as isize + oy) as usize;
            let fg = hsv(
                d.hue + r.gen_range(-0.02..0.02),
                0.9,
                r.gen_range(0.85..1.0),
            );
            canvas.glyph(&d.glyph, x0, y0, fg, [0.08; 3]);
            if spec.noise > 0.0 {
                for v in canvas.data.iter_mut() {
                    *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
                }
            }
            samples.push(Sample {
                image: Tensor::new(&[3, size, size], canvas.data)?,
                class,
                part_box: Some(PixelBox {
                    x0,
                    y0,
                    x1: x0 + part,
                    y1: y0 + part,
                }),
            });
        }
    }
    let (n_train, n_val, _) = spec.splits;
    let splits = (0..spec.classes)
        .map(|c| match c {
            c if c < n_train => Split::Train,
            c if c < n_train + n_val => Split::Val,
            _ => Split::Test,
        })
        .collect();
    let names = (0..spec.classes).map(|c| format!("class{c:03}")).collect();
    LabeledDataset::new((size, size), names, splits, samples)
}

/// Bounding box of all recorded part boxes of `class`.
pub fn class_part_extent(dataset: &LabeledDataset, class: usize) -> Option<PixelBox> {
    dataset
        .samples_of(class)
        .iter()
        .filter_map(|&i| dataset.samples[i].part_box)
        .reduce(|a, b| PixelBox {
            x0: a.x0.min(b.x0),
            y0: a.y0.min(b.y0),
            x1: a.x1.max(b.x1),
            y1: a.y1.max(b.y1),
        })
}
