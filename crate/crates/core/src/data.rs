//! Synthetic image data: rendering, augmentation transforms, corruptions,
//! and single-pass evaluation streams.
//!
//! Images are 3-channel `f64` rasters in `[0, 1]`, channel-major. Classes
//! pair a shape family with a base hue, so both geometry and color carry
//! label information. Corruptions model the deployment shift; transforms
//! model the augmentation used for gradient-similarity probing and
//! prototype training. Every random choice flows through a caller-supplied
//! seed, so datasets, transforms, and streams are reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{NodeId, Tape};
use crate::{derive_seed, Error, Result};

/// 3-channel image, channel-major `[c][y][x]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Image {
            h,
            w,
            data: vec![value; 3 * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Perceptual luma of one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        0.299 * self.at(0, y, x) + 0.587 * self.at(1, y, x) + 0.114 * self.at(2, y, x)
    }
}

/// Converts hue/saturation/value (all in `[0, 1]`) to RGB.
///
/// Standard hexcone model: `c = v·s`, `x = c·(1 − |(6h mod 2) − 1|)`,
/// `m = v − c`, with `(r, g, b)` picked from `(c, x, 0)` permutations by the
/// sextant of `6h`, then shifted by `m`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Converts RGB (in `[0, 1]`) to hue/saturation/value.
///
/// `v = max`, `s = (max − min)/max` (0 if `max` is 0), and hue from which
/// channel attains the max: `h = ((g − b)/Δ mod 6) / 6` for red, shifted by
/// 2 or 4 sextants for green/blue.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta < 1e-12 {
        0.0
    } else if (max - r).abs() < 1e-12 {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if (max - g).abs() < 1e-12 {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

// ─── Dataset generation ───

/// Labeled source-domain dataset.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

const NUM_SHAPE_FAMILIES: usize = 10;

fn inside_shape(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match kind {
        0 => dist <= r,
        1 => {
            let m = dx.abs().max(dy.abs());
            m <= r && m >= 0.55 * r
        }
        2 => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
        3 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        4 => dist <= r && (dy.rem_euclid(4.0)) < 2.0,
        5 => dist <= r && (dx.rem_euclid(4.0)) < 2.0,
        6 => dist <= r && dist >= 0.6 * r,
        7 => dx.abs() + dy.abs() <= r,
        8 => {
            dx.abs() <= r
                && dy.abs() <= r
                && (((dx / 2.0).floor() + (dy / 2.0).floor()).rem_euclid(2.0)) < 1.0
        }
        _ => (dx.abs() - dy.abs()).abs() <= 0.3 * r && dx.abs().max(dy.abs()) <= r,
    }
}

fn render_example(
    class: usize,
    num_classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Image {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.12..=0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..=0.12) * s;
    let r = rng.gen_range(0.20..=0.36) * s;
    let class_hue = class as f64 / num_classes as f64;
    let fg_h = class_hue + rng.gen_range(-0.06..=0.06);
    let fg_s = rng.gen_range(0.40..=0.90);
    let fg_v = rng.gen_range(0.50..=0.95);
    let bg_h = rng.gen_range(0.0..1.0);
    let bg_s = rng.gen_range(0.05..=0.40);
    let bg_v = rng.gen_range(0.15..=0.50);
    let fg = hsv_to_rgb(fg_h, fg_s, fg_v);
    let bg = hsv_to_rgb(bg_h, bg_s, bg_v);
    let kind = class % NUM_SHAPE_FAMILIES;

    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let (pr, pg, pb) = if inside_shape(kind, dx, dy, r) { fg } else { bg };
            img.set(0, y, x, pr);
            img.set(1, y, x, pg);
            img.set(2, y, x, pb);
        }
    }
    for v in &mut img.data {
        *v += rng.gen_range(-0.02..=0.02);
    }
    img.clamp();
    img
}

/// Renders a balanced labeled dataset: `n_per_class` examples of each of
/// `num_classes` classes at `size`×`size` pixels. Class `k` uses shape
/// family `k mod 10` and base hue `k / num_classes`, with per-example
/// jitter in position, scale, colors, and pixel noise.
pub fn generate_dataset(
    num_classes: usize,
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if n_per_class == 0 || size < 8 {
        return Err(Error::invalid(format!(
            "degenerate dataset request: {n_per_class} per class at size {size}"
        )));
    }
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                "render",
                (class * n_per_class + i) as u64,
            ));
            images.push(render_example(class, num_classes, size, &mut rng));
            labels.push(class);
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        num_classes,
        image_size: size,
        seed,
    })
}

// ─── Augmentation transforms ───

/// One stage of an augmentation pipeline, applied in order.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// Color jitter with uniform factor ranges, applied in the fixed order
    /// brightness → contrast → saturation → hue. Factor 1 (or hue shift 0)
    /// leaves the image unchanged.
    ColorJitter {
        brightness: (f64, f64),
        contrast: (f64, f64),
        saturation: (f64, f64),
        hue: (f64, f64),
    },
    /// With probability `p`, apply either grayscale or inversion (an even
    /// coin decides which).
    GrayscaleOrInvert { p: f64 },
    /// With probability `p`, blur with a 3×3 Gaussian kernel whose sigma is
    /// drawn uniformly from the given range.
    GaussianBlur { p: f64, sigma: (f64, f64) },
    /// With probability `p`, mirror left-right.
    HorizontalFlip { p: f64 },
}

/// Ordered augmentation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub stages: Vec<Stage>,
}

impl TransformSpec {
    /// The default probing pipeline: full-strength color jitter, then a coin
    /// flip for grayscale-or-invert, then a coin flip for a mild blur.
    pub fn probe_default() -> Self {
        TransformSpec {
            stages: vec![
                Stage::ColorJitter {
                    brightness: (0.2, 1.8),
                    contrast: (0.2, 1.8),
                    saturation: (0.2, 1.8),
                    hue: (-0.2, 0.2),
                },
                Stage::GrayscaleOrInvert { p: 0.5 },
                Stage::GaussianBlur {
                    p: 0.5,
                    sigma: (1.0, 2.0),
                },
            ],
        }
    }

    /// A pipeline that provably changes nothing: every factor fixed at its
    /// neutral value and every probability zero.
    pub fn identity() -> Self {
        TransformSpec {
            stages: vec![
                Stage::ColorJitter {
                    brightness: (1.0, 1.0),
                    contrast: (1.0, 1.0),
                    saturation: (1.0, 1.0),
                    hue: (0.0, 0.0),
                },
                Stage::GrayscaleOrInvert { p: 0.0 },
                Stage::GaussianBlur {
                    p: 0.0,
                    sigma: (1.0, 2.0),
                },
            ],
        }
    }
}

fn mean_luma(img: &Image) -> f64 {
    let mut acc = 0.0;
    for y in 0..img.h {
        for x in 0..img.w {
            acc += img.luma(y, x);
        }
    }
    acc / (img.h * img.w) as f64
}

fn adjust_brightness(img: &mut Image, f: f64) {
    for v in &mut img.data {
        *v *= f;
    }
    img.clamp();
}

fn adjust_contrast(img: &mut Image, f: f64) {
    let m = mean_luma(img);
    for v in &mut img.data {
        *v = m + (*v - m) * f;
    }
    img.clamp();
}

fn adjust_saturation(img: &mut Image, f: f64) {
    for y in 0..img.h {
        for x in 0..img.w {
            let l = img.luma(y, x);
            for c in 0..3 {
                let v = img.at(c, y, x);
                img.set(c, y, x, l + (v - l) * f);
            }
        }
    }
    img.clamp();
}

fn adjust_hue(img: &mut Image, shift: f64) {
    for y in 0..img.h {
        for x in 0..img.w {
            let (h, s, v) = rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            img.set(0, y, x, r);
            img.set(1, y, x, g);
            img.set(2, y, x, b);
        }
    }
    img.clamp();
}

fn to_grayscale(img: &mut Image) {
    for y in 0..img.h {
        for x in 0..img.w {
            let l = img.luma(y, x);
            for c in 0..3 {
                img.set(c, y, x, l);
            }
        }
    }
}

fn invert(img: &mut Image) {
    for v in &mut img.data {
        *v = 1.0 - *v;
    }
}

/// Blurs with a square Gaussian kernel of the given half-width. Border
/// pixels renormalize over the in-bounds taps, so constant images are fixed
/// points of the blur.
fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Image {
    let r = radius as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let mut out = Image::filled(img.h, img.w, 0.0);
    for c in 0..3 {
        for y in 0..img.h as isize {
            for x in 0..img.w as isize {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let mut wi = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = weights[wi];
                        wi += 1;
                        let sy = y + dy;
                        let sx = x + dx;
                        if sy < 0 || sy >= img.h as isize || sx < 0 || sx >= img.w as isize {
                            continue;
                        }
                        acc += w * img.at(c, sy as usize, sx as usize);
                        wsum += w;
                    }
                }
                out.set(c, y as usize, x as usize, acc / wsum);
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut Image) {
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w / 2 {
                let a = img.at(c, y, x);
                let b = img.at(c, y, img.w - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, img.w - 1 - x, a);
            }
        }
    }
}

/// Applies a pipeline to one image, drawing all randomness from `rng`.
pub fn apply_transform(img: &Image, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    for stage in &spec.stages {
        match stage {
            Stage::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                let fb = rng.gen_range(brightness.0..=brightness.1);
                let fc = rng.gen_range(contrast.0..=contrast.1);
                let fs = rng.gen_range(saturation.0..=saturation.1);
                let dh = rng.gen_range(hue.0..=hue.1);
                if fb != 1.0 {
                    adjust_brightness(&mut out, fb);
                }
                if fc != 1.0 {
                    adjust_contrast(&mut out, fc);
                }
                if fs != 1.0 {
                    adjust_saturation(&mut out, fs);
                }
                if dh != 0.0 {
                    adjust_hue(&mut out, dh);
                }
            }
            Stage::GrayscaleOrInvert { p } => {
                if rng.gen::<f64>() < *p {
                    if rng.gen::<f64>() < 0.5 {
                        to_grayscale(&mut out);
                    } else {
                        invert(&mut out);
                    }
                }
            }
            Stage::GaussianBlur { p, sigma } => {
                if rng.gen::<f64>() < *p {
                    let s = rng.gen_range(sigma.0..=sigma.1);
                    out = gaussian_blur(&out, s, 1);
                }
            }
            Stage::HorizontalFlip { p } => {
                if rng.gen::<f64>() < *p {
                    flip_horizontal(&mut out);
                }
            }
        }
    }
    out
}

// ─── Corruptions ───

/// Deployment-shift corruption family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Saturate,
    Pixelate,
}

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Saturate => "saturate",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "gaussian_blur" => Ok(CorruptionKind::GaussianBlur),
            "brightness" => Ok(CorruptionKind::Brightness),
            "contrast" => Ok(CorruptionKind::Contrast),
            "saturate" => Ok(CorruptionKind::Saturate),
            "pixelate" => Ok(CorruptionKind::Pixelate),
            _ => Err(Error::invalid(format!("unknown corruption {name:?}"))),
        }
    }

    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Saturate,
        CorruptionKind::Pixelate,
    ];
}

/// A corruption family at a severity in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!(
                "corruption severity must be 1..=5, got {severity}"
            )));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Applies a corruption to one image. Severity scales the distortion; the
/// output is clamped back into `[0, 1]`.
pub fn apply_corruption(img: &Image, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Image {
    let s = spec.severity as f64;
    let mut out = img.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = 0.08 * s;
            for v in &mut out.data {
                *v += sigma * gauss(rng);
            }
        }
        CorruptionKind::GaussianBlur => {
            let sigma = 0.5 * s;
            let radius = (2.0 * sigma).ceil() as usize;
            out = gaussian_blur(&out, sigma, radius.max(1));
        }
        CorruptionKind::Brightness => {
            for v in &mut out.data {
                *v += 0.09 * s;
            }
        }
        CorruptionKind::Contrast => {
            let m = mean_luma(&out);
            let f = 1.0 - 0.16 * s;
            for v in &mut out.data {
                *v = m + (*v - m) * f;
            }
        }
        CorruptionKind::Saturate => {
            let f = 1.0 - 0.18 * s;
            adjust_saturation(&mut out, f);
        }
        CorruptionKind::Pixelate => {
            let block = spec.severity as usize + 1;
            let mut avg = out.clone();
            for c in 0..3 {
                for by in (0..out.h).step_by(block) {
                    for bx in (0..out.w).step_by(block) {
                        let ye = (by + block).min(out.h);
                        let xe = (bx + block).min(out.w);
                        let mut acc = 0.0;
                        for y in by..ye {
                            for x in bx..xe {
                                acc += out.at(c, y, x);
                            }
                        }
                        let mean = acc / ((ye - by) * (xe - bx)) as f64;
                        for y in by..ye {
                            for x in bx..xe {
                                avg.set(c, y, x, mean);
                            }
                        }
                    }
                }
            }
            out = avg;
        }
    }
    out.clamp();
    out
}

// ─── Target streams ───

/// Ground-truth labels of a stream batch, quarantined so the adaptation
/// path cannot read them by accident. Only metrics code calls
/// [`HiddenLabels::reveal_for_metrics`].
#[derive(Debug, Clone)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Exposes the labels for error accounting after predictions were made.
    pub fn reveal_for_metrics(&self) -> &[usize] {
        &self.0
    }
}

/// One batch of corrupted target images with quarantined labels.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub images: Vec<Image>,
    pub labels: HiddenLabels,
}

/// A single-pass shuffled stream of corrupted batches. The batches can be
/// taken exactly once; a second take errors, enforcing the each-example-
/// seen-once protocol at the type level.
#[derive(Debug)]
pub struct TargetStream {
    batches: Option<Vec<StreamBatch>>,
   /// Number of tail examples dropped because a final partial batch held
   /// fewer than two entries (too few for batch statistics).
    pub dropped_tail: usize,
    pub num_batches: usize,
    pub num_examples: usize,
}

impl TargetStream {
    /// Takes ownership of the batches. Errors on the second call.
    pub fn take_batches(&mut self) -> Result<Vec<StreamBatch>> {
        self.batches.take().ok_or(Error::StreamConsumed)
    }
}

/// Shuffles a dataset once, corrupts every example, and packs batches.
///
/// A final partial batch is kept when it has at least two examples and
/// dropped otherwise. Shuffle order and per-example corruption noise derive
/// from `seed` alone.
pub fn make_target_stream(
    dataset: &LabeledDataset,
    corruption: &CorruptionSpec,
    batch_size: usize,
    seed: u64,
) -> Result<TargetStream> {
    if dataset.is_empty() {
        return Err(Error::Empty {
            context: "stream source dataset".into(),
        });
    }
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stream-order", 0));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut batches = Vec::new();
    let mut dropped_tail = 0;
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            dropped_tail = chunk.len();
            continue;
        }
        let mut images = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let mut crng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "stream-corrupt", idx as u64));
            images.push(apply_corruption(&dataset.images[idx], corruption, &mut crng));
            labels.push(dataset.labels[idx]);
        }
        batches.push(StreamBatch {
            images,
            labels: HiddenLabels(labels),
        });
    }
    if batches.is_empty() {
        return Err(Error::Empty {
            context: "target stream after batching".into(),
        });
    }
    let num_batches = batches.len();
    let num_examples = batches.iter().map(|b| b.images.len()).sum();
    Ok(TargetStream {
        batches: Some(batches),
        dropped_tail,
        num_batches,
        num_examples,
    })
}

/// Copies a batch of images onto a tape as one `[n, 3, h, w]` leaf.
pub fn batch_leaf(tape: &mut Tape, images: &[Image]) -> Result<NodeId> {
    if images.is_empty() {
        return Err(Error::Empty {
            context: "image batch".into(),
        });
    }
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.h != h || img.w != w {
            return Err(Error::shape(
                "image batch",
                format!("{h}x{w}"),
                format!("{}x{}", img.h, img.w),
            ));
        }
        data.extend_from_slice(&img.data);
    }
    tape.leaf(vec![images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let a = generate_dataset(5, 4, 16, 42).unwrap();
        let b = generate_dataset(5, 4, 16, 42).unwrap();
        let c = generate_dataset(5, 4, 16, 43).unwrap();
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, c.images);
        assert_eq!(a.len(), 20);
        assert!(a.labels.iter().all(|&y| y < 5));
        for img in &a.images {
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(generate_dataset(1, 4, 16, 0).is_err());
    }

    #[test]
    fn hsv_round_trips_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (r, g, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-9, "{r} {g} {b}");
            assert!((g - g2).abs() < 1e-9);
            assert!((b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_transform_is_exact() {
        let ds = generate_dataset(3, 2, 16, 7).unwrap();
        let spec = TransformSpec::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for img in &ds.images {
            let t = apply_transform(img, &spec, &mut rng);
            assert_eq!(&t, img);
        }
    }

    #[test]
    fn transform_is_seed_deterministic() {
        let ds = generate_dataset(3, 2, 16, 7).unwrap();
        let spec = TransformSpec::probe_default();
        let img = &ds.images[0];
        let a = apply_transform(img, &spec, &mut ChaCha8Rng::seed_from_u64(5));
        let b = apply_transform(img, &spec, &mut ChaCha8Rng::seed_from_u64(5));
        let c = apply_transform(img, &spec, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let mut img = Image::filled(2, 4, 0.0);
        for x in 0..4 {
            img.set(0, 0, x, x as f64 / 10.0);
        }
        flip_horizontal(&mut img);
        for x in 0..4 {
            assert_eq!(img.at(0, 0, x), (3 - x) as f64 / 10.0);
        }
    }

    #[test]
    fn blur_keeps_constant_images_fixed() {
        let img = Image::filled(8, 8, 0.37);
        let out = gaussian_blur(&img, 1.5, 2);
        for v in &out.data {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn corruptions_are_deterministic_and_bounded() {
        let ds = generate_dataset(4, 2, 16, 11).unwrap();
        let img = &ds.images[3];
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 3).unwrap();
            let a = apply_corruption(img, &spec, &mut ChaCha8Rng::seed_from_u64(1));
            let b = apply_corruption(img, &spec, &mut ChaCha8Rng::seed_from_u64(1));
            assert_eq!(a, b, "{}", kind.name());
            assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(CorruptionSpec::new(CorruptionKind::Pixelate, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Pixelate, 6).is_err());
    }

    #[test]
    fn noise_severity_raises_distortion() {
        let ds = generate_dataset(4, 2, 16, 11).unwrap();
        let img = &ds.images[0];
        let dist = |sev: u8| {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev).unwrap();
            let out = apply_corruption(img, &spec, &mut ChaCha8Rng::seed_from_u64(2));
            out.data
                .iter()
                .zip(&img.data)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / img.data.len() as f64
        };
        assert!(dist(5) > dist(3));
        assert!(dist(3) > dist(1));
    }

    #[test]
    fn pixelate_averages_blocks() {
        let mut img = Image::filled(4, 4, 0.0);
        img.set(0, 0, 0, 1.0);
        let spec = CorruptionSpec::new(CorruptionKind::Pixelate, 1).unwrap();
        let out = apply_corruption(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((out.at(0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((out.at(0, 1, 1) - 0.25).abs() < 1e-12);
        assert!((out.at(0, 0, 2) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn stream_is_single_pass_and_deterministic() {
        let ds = generate_dataset(3, 10, 16, 21).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 2).unwrap();
        let mut s1 = make_target_stream(&ds, &spec, 8, 77).unwrap();
        let mut s2 = make_target_stream(&ds, &spec, 8, 77).unwrap();
        let b1 = s1.take_batches().unwrap();
        let b2 = s2.take_batches().unwrap();
        assert_eq!(b1.len(), b2.len());
        for (x, y) in b1.iter().zip(&b2) {
            assert_eq!(x.images, y.images);
            assert_eq!(x.labels.reveal_for_metrics(), y.labels.reveal_for_metrics());
        }
        assert!(matches!(s1.take_batches(), Err(Error::StreamConsumed)));
    }

    #[test]
    fn stream_drops_singleton_tail_and_keeps_pairs() {
        let ds = generate_dataset(3, 3, 16, 5).unwrap();
        // 9 examples, batch 4 -> 4 + 4 + dropped singleton.
        let spec = CorruptionSpec::new(CorruptionKind::Brightness, 1).unwrap();
        let mut s = make_target_stream(&ds, &spec, 4, 0).unwrap();
        assert_eq!(s.num_batches, 2);
        assert_eq!(s.dropped_tail, 1);
        assert_eq!(s.num_examples, 8);
        let batches = s.take_batches().unwrap();
        assert!(batches.iter().all(|b| b.images.len() == 4));

        // 8 examples, batch 6 -> 6 + 2 (kept).
        let ds = generate_dataset(4, 2, 16, 5).unwrap();
        let mut s = make_target_stream(&ds, &spec, 6, 0).unwrap();
        let batches = s.take_batches().unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].images.len(), 2);
        assert!(make_target_stream(&ds, &spec, 1, 0).is_err());
    }

    #[test]
    fn stream_labels_match_source_permutation() {
        let ds = generate_dataset(3, 4, 16, 9).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Saturate, 2).unwrap();
        let mut s = make_target_stream(&ds, &spec, 4, 13).unwrap();
        let mut seen = vec![0usize; 3];
        for b in s.take_batches().unwrap() {
            for &y in b.labels.reveal_for_metrics() {
                seen[y] += 1;
            }
        }
        assert_eq!(seen, vec![4, 4, 4]);
    }
}
