//! Procedural dataset with a context-ambiguous class pair.
//!
//! Each image holds one ROI object (the mask) and 1 to 3 context objects on a
//! textured gray background. The two classes of `ambiguous_pair` share the
//! ROI generator (a red disk) and differ only in their context vocabulary.
//! Every other class has a distinctive two-tone disk as its ROI and draws
//! context from a shared neutral vocabulary, so only the ROI identifies it.
//!
//! Two-tone disks come in four arrangements (top/bottom halves and
//! inner/outer rings, each in both colour orders). All four use the same two
//! colours over the same areas, so only their spatial layout differs. All
//! arrangements are symmetric under a horizontal flip.
//!
//! Random streams are keyed per sample. ROI geometry, ROI colour jitter and
//! pixel noise use streams keyed by the within-class sample index only, so
//! sample `j` of the two ambiguous classes has bitwise identical `x1`.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rvernet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::params::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextShape {
    Square,
    Triangle,
    Disk,
}

/// Shapes and colours a class may draw its context objects from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextStyle {
    pub shapes: Vec<ContextShape>,
    /// 8-bit RGB.
    pub colors: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "d_side")]
    pub image_side: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_pair")]
    pub ambiguous_pair: (usize, usize),
    #[serde(default = "d_spc")]
    pub samples_per_class: usize,
    /// Fraction of each class assigned to the test split.
    #[serde(default = "d_test")]
    pub test_fraction: f64,
    /// Per-class context styles; the built-in palette when absent.
    #[serde(default)]
    pub context_vocab: Option<Vec<ContextStyle>>,
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_side() -> usize {
    64
}
fn d_classes() -> usize {
    6
}
fn d_pair() -> (usize, usize) {
    (0, 1)
}
fn d_spc() -> usize {
    400
}
fn d_test() -> f64 {
    0.25
}
fn d_noise() -> f64 {
    0.03
}
fn d_seed() -> u64 {
    7
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_side: d_side(),
            num_classes: d_classes(),
            ambiguous_pair: d_pair(),
            samples_per_class: d_spc(),
            test_fraction: d_test(),
            context_vocab: None,
            noise_std: d_noise(),
            seed: d_seed(),
        }
    }
}

const RED: [u8; 3] = [200, 40, 40];
const TWO_TONE: [([u8; 3], [u8; 3]); 3] = [
    ([225, 200, 40], [130, 50, 170]),
    ([40, 200, 200], [230, 120, 30]),
    ([240, 240, 240], [30, 30, 30]),
];

fn neutral_style() -> ContextStyle {
    ContextStyle {
        shapes: vec![ContextShape::Square, ContextShape::Triangle, ContextShape::Disk],
        colors: vec![[130, 90, 50], [70, 70, 70], [185, 185, 185]],
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let (a, b) = self.ambiguous_pair;
        if a == b || a >= self.num_classes || b >= self.num_classes {
            return fail(format!("ambiguous_pair ({a}, {b}) must be two distinct classes below {}", self.num_classes));
        }
        if self.image_side < 32 {
            return fail(format!("image_side {} below the minimum of 32", self.image_side));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!("test_fraction {} outside [0, 1)", self.test_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if self.num_classes - 2 > 4 * TWO_TONE.len() {
            return fail(format!("at most {} classes supported", 2 + 4 * TWO_TONE.len()));
        }
        if let Some(v) = &self.context_vocab {
            if v.len() != self.num_classes {
                return fail(format!("context_vocab has {} entries for {} classes", v.len(), self.num_classes));
            }
            if v.iter().any(|s| s.shapes.is_empty() || s.colors.is_empty()) {
                return fail("every context style needs at least one shape and one colour".into());
            }
        }
        Ok(())
    }

    /// Context style of each class.
    pub fn vocab(&self) -> Vec<ContextStyle> {
        if let Some(v) = &self.context_vocab {
            return v.clone();
        }
        let (a, b) = self.ambiguous_pair;
        (0..self.num_classes)
            .map(|c| {
                if c == a {
                    ContextStyle { shapes: vec![ContextShape::Square], colors: vec![[40, 70, 200]] }
                } else if c == b {
                    ContextStyle { shapes: vec![ContextShape::Triangle], colors: vec![[40, 160, 60]] }
                } else {
                    neutral_style()
                }
            })
            .collect()
    }

    pub fn test_count(&self) -> usize {
        (self.samples_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn class_names(&self) -> Vec<String> {
        let (a, b) = self.ambiguous_pair;
        (0..self.num_classes)
            .map(|c| {
                if c == a || c == b {
                    format!("ambiguous_{c}")
                } else {
                    format!("class_{c}")
                }
            })
            .collect()
    }

    /// Rank of `class` among the non-ambiguous classes.
    fn distinct_rank(&self, class: usize) -> usize {
        let (a, b) = self.ambiguous_pair;
        (0..class).filter(|&c| c != a && c != b).count()
    }
}

#[derive(Debug, Clone, Copy)]
enum Roi {
    Plain([f64; 3]),
    /// `arrangement`: 0 top A / bottom B, 1 top B / bottom A,
    /// 2 inner A / outer B, 3 inner B / outer A.
    TwoTone { a: [f64; 3], b: [f64; 3], arrangement: usize },
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

const STREAM_ROI: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_CONTEXT: u64 = 3;

fn stream(kind: u64, class: Option<usize>, j: usize) -> u64 {
    (kind << 56) | (class.map_or(0xFF_FFFF, |c| c as u64) << 32) | j as u64
}

struct Canvas {
    side: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, inside: impl Fn(f64, f64) -> Option<[f64; 3]>) {
        let s = self.side;
        for r in 0..s {
            for c in 0..s {
                if let Some(col) = inside(c as f64 + 0.5, r as f64 + 0.5) {
                    for (ch, v) in col.iter().enumerate() {
                        self.rgb[ch * s * s + r * s + c] = *v;
                    }
                }
            }
        }
    }
}

fn context_inside(shape: ContextShape, cx: f64, cy: f64, h: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        ContextShape::Square => dx.abs() <= h && dy.abs() <= h,
        ContextShape::Disk => dx * dx + dy * dy <= h * h,
        ContextShape::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn generate_one(spec: &SyntheticSpec, vocab: &[ContextStyle], class: usize, j: usize) -> Result<LabeledImage> {
    let s = spec.image_side;
    let sf = s as f64;
    let scale = sf / 64.0;
    let seed = spec.seed;

    let mut ctx = rng_for(seed, stream(STREAM_CONTEXT, Some(class), j));
    let mut canvas = Canvas { side: s, rgb: vec![0.0; 3 * s * s] };
    let base = 0.5 + ctx.random_range(-0.05..=0.05);
    let (fx, fy) = (ctx.random_range(1.0..3.0), ctx.random_range(1.0..3.0));
    let (px, py) = (ctx.random_range(0.0..std::f64::consts::TAU), ctx.random_range(0.0..std::f64::consts::TAU));
    for ch in 0..3 {
        for r in 0..s {
            for c in 0..s {
                let t = (fx * std::f64::consts::TAU * c as f64 / sf + px).sin()
                    * (fy * std::f64::consts::TAU * r as f64 / sf + py).cos();
                canvas.rgb[ch * s * s + r * s + c] = base + 0.06 * t;
            }
        }
    }

    let mut roi_rng = rng_for(seed, stream(STREAM_ROI, None, j));
    let radius = roi_rng.random_range(9.0..=13.0) * scale;
    let margin = radius + 1.0;
    let cx = roi_rng.random_range(margin..=sf - margin);
    let cy = roi_rng.random_range(margin..=sf - margin);
    let (pa, pb) = spec.ambiguous_pair;
    let roi = if class == pa || class == pb {
        Roi::Plain(jitter(&mut roi_rng, rgb(RED), 0.03))
    } else {
        let k = spec.distinct_rank(class);
        let (a, b) = TWO_TONE[k / 4];
        Roi::TwoTone {
            a: jitter(&mut roi_rng, rgb(a), 0.03),
            b: jitter(&mut roi_rng, rgb(b), 0.03),
            arrangement: k % 4,
        }
    };

    let style = &vocab[class];
    let n_ctx = ctx.random_range(1..=3);
    let mut placed = Vec::new();
    for _ in 0..n_ctx {
        let shape = style.shapes[ctx.random_range(0..style.shapes.len())];
        let base_color = rgb(style.colors[ctx.random_range(0..style.colors.len())]);
        let color = jitter(&mut ctx, base_color, 0.03);
        let h = ctx.random_range(5.0..=8.0) * scale;
        for _ in 0..200 {
            let ox = ctx.random_range(h + 1.0..=sf - h - 1.0);
            let oy = ctx.random_range(h + 1.0..=sf - h - 1.0);
            let clear_roi = ((ox - cx).powi(2) + (oy - cy).powi(2)).sqrt() > radius + h * std::f64::consts::SQRT_2 + 2.0;
            let clear_ctx = placed
                .iter()
                .all(|&(qx, qy, qh): &(f64, f64, f64)| (ox - qx).abs() > h + qh + 1.0 || (oy - qy).abs() > h + qh + 1.0);
            if clear_roi && clear_ctx {
                canvas.paint(|x, y| context_inside(shape, ox, oy, h, x, y).then_some(color));
                placed.push((ox, oy, h));
                break;
            }
        }
    }
    if placed.is_empty() {
        return Err(Error::Numeric(format!("no room for a context object in sample {class}/{j}")));
    }

    let inner = radius * FRAC_1_SQRT_2;
    canvas.paint(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let d2 = dx * dx + dy * dy;
        if d2 > radius * radius {
            return None;
        }
        Some(match roi {
            Roi::Plain(c) => c,
            Roi::TwoTone { a, b, arrangement } => {
                let first = match arrangement {
                    0 | 1 => dy < 0.0,
                    _ => d2 <= inner * inner,
                };
                if first == (arrangement % 2 == 0) {
                    a
                } else {
                    b
                }
            }
        })
    });

    let mut mask = vec![0.0f32; s * s];
    for r in 0..s {
        for c in 0..s {
            let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= radius * radius {
                mask[r * s + c] = 1.0;
            }
        }
    }

    let mut noise_rng = rng_for(seed, stream(STREAM_NOISE, None, j));
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let image: Vec<f32> = canvas
        .rgb
        .iter()
        .map(|&v| {
            let n = if spec.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            quantize(v + n)
        })
        .collect();

    let split = if j < spec.samples_per_class - spec.test_count() { Split::Train } else { Split::Test };
    Ok(LabeledImage {
        image: Tensor::new(&[3, s, s], image)?,
        mask: Tensor::new(&[s, s], mask)?,
        label: class,
        id: format!("c{class}_{j:05}"),
        split,
    })
}

/// Rounds to the nearest 8-bit level, so PNG round trips are exact.
pub(crate) fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Generates the dataset described by `spec`: a pure function of `spec`.
/// Samples are ordered by class, then by index; the last
/// `round(samples_per_class * test_fraction)` samples of each class form the
/// test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocab();
    let mut items = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for j in 0..spec.samples_per_class {
            items.push(generate_one(spec, &vocab, class, j)?);
        }
    }
    Ok(Dataset { items, class_names: spec.class_names() })
}
