//! Synthetic clued datasets and the `CRD1` container.
//!
//! Images are single-channel `[1 x H x W]` in `[-1, 1]`; clues are
//! `{0, 1}` masks of the same shape.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use cram_diff::tns::{self, Cursor};
use cram_diff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Error, Result};

pub const MAGIC: &[u8; 4] = b"CRD1";

/// Share of canvas pixels covered by distractor noise.
pub const CLUTTER_DENSITY: f64 = 0.2;

pub const DEFAULT_OCCLUSION: f64 = 0.0625;

/// A binary mask aligned with its image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClueImage {
    mask: Tensor<f32>,
}

impl ClueImage {
    pub fn new(mask: Tensor<f32>) -> Result<Self> {
        if mask.rank() != 3 || mask.shape()[0] != 1 {
            return Err(Error::data(format!("clue must be [1 x H x W], got {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("clue is not binary"));
        }
        Ok(ClueImage { mask })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ClueImage {
            mask: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn mask(&self) -> &Tensor<f32> {
        &self.mask
    }

    pub fn active(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.mask.shape()[1], self.mask.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSample {
    pub image: Tensor<f32>,
    pub clue: ClueImage,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintingSample {
    pub contaminated: Tensor<f32>,
    pub clue: ClueImage,
    pub original: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Classification(ClassificationSample),
    Inpainting(InpaintingSample),
}

impl Sample {
    pub fn image(&self) -> &Tensor<f32> {
        match self {
            Sample::Classification(s) => &s.image,
            Sample::Inpainting(s) => &s.contaminated,
        }
    }

    pub fn clue(&self) -> &ClueImage {
        match self {
            Sample::Classification(s) => &s.clue,
            Sample::Inpainting(s) => &s.clue,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Cross,
    LCorner,
    Ring,
    Triangle,
    SquareFrame,
}

/// Class `k` draws `SHAPES[k]`.
pub const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Cross,
    Shape::LCorner,
    Shape::Ring,
    Shape::Triangle,
    Shape::SquareFrame,
];

impl Shape {
    /// Whether local cell `(v, u)` (row, column) of a `side x side` box is
    /// part of the shape. Every shape touches all four sides of its box.
    pub fn covers(self, side: usize, v: usize, u: usize) -> bool {
        let n = side as f64;
        let c = (n - 1.0) / 2.0;
        let (fu, fv) = (u as f64, v as f64);
        let t = (side / 3).max(1);
        let band = |i: usize| {
            let lo = (side - t) / 2;
            (lo..lo + t).contains(&i)
        };
        let d2 = (fu - c).powi(2) + (fv - c).powi(2);
        match self {
            Shape::Disk => d2 <= (n / 2.0).powi(2),
            Shape::Ring => {
                let inner = n / 2.0 - (side as f64 / 4.0).max(1.0);
                d2 <= (n / 2.0).powi(2) && d2 > inner.powi(2)
            }
            Shape::Cross => band(u) || band(v),
            Shape::LCorner => u < t || v >= side - t,
            Shape::Triangle => (fu - c).abs() <= (fv + 1.0) / 2.0,
            Shape::SquareFrame => u < t || v < t || u >= side - t || v >= side - t,
        }
    }
}

fn side_range(canvas: usize) -> (usize, usize) {
    (canvas.div_ceil(4), canvas / 3)
}

/// Cluttered canvases with one labelled shape each; the clue is the
/// shape's bounding box. Labels cycle through `0..k_classes`.
pub fn gen_classification(n: usize, canvas: usize, k_classes: usize, seed: u64) -> Result<Vec<ClassificationSample>> {
    if canvas < 16 {
        return Err(Error::config(format!("canvas must be at least 16, got {canvas}")));
    }
    if k_classes < 2 || k_classes > SHAPES.len() {
        return Err(Error::config(format!(
            "k_classes must lie in 2..={}, got {k_classes}",
            SHAPES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = side_range(canvas);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k_classes;
        let side = rng.gen_range(lo..=hi);
        let top = rng.gen_range(0..=canvas - side);
        let left = rng.gen_range(0..=canvas - side);
        let mut img = vec![-1.0f32; canvas * canvas];
        for px in img.iter_mut() {
            if rng.gen_bool(CLUTTER_DENSITY) {
                *px = rng.gen_range(-1.0f32..1.0);
            }
        }
        let mut clue = vec![0.0f32; canvas * canvas];
        for v in 0..side {
            for u in 0..side {
                let k = (top + v) * canvas + left + u;
                clue[k] = 1.0;
                if SHAPES[label].covers(side, v, u) {
                    img[k] = 1.0;
                }
            }
        }
        out.push(ClassificationSample {
            image: Tensor::new(&[1, canvas, canvas], img)?,
            clue: ClueImage::new(Tensor::new(&[1, canvas, canvas], clue)?)?,
            label,
        });
    }
    Ok(out)
}

/// Side of the centered square occlusion covering `fraction` of the canvas.
pub fn mask_side(canvas: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::config(format!(
            "occlusion fraction must lie in (0, 0.5], got {fraction}"
        )));
    }
    let side = (fraction.sqrt() * canvas as f64).round() as usize;
    if side < 1 {
        return Err(Error::config(format!(
            "occlusion {fraction} leaves no pixel masked on a {canvas}x{canvas} canvas"
        )));
    }
    Ok(side)
}

/// Centered square clue of the given side.
pub fn center_mask(canvas: usize, side: usize) -> ClueImage {
    let start = (canvas - side) / 2;
    let inside = |i: usize| (start..start + side).contains(&i);
    let mask = Tensor::from_fn(&[1, canvas, canvas], |k| {
        if inside(k / canvas) && inside(k % canvas) {
            1.0
        } else {
            0.0
        }
    });
    ClueImage { mask }
}

/// Smooth sinusoid mixture rescaled to exactly span `[-1, 1]`.
fn smooth_image(canvas: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let amp = rng.gen_range(0.5..1.0);
            let fx = rng.gen_range(-2.0..2.0);
            let fy = rng.gen_range(-2.0..2.0);
            let phase = rng.gen_range(0.0..TAU);
            [amp, fx, fy, phase]
        })
        .collect();
    let c = canvas as f64;
    let raw: Vec<f64> = (0..canvas * canvas)
        .map(|k| {
            let (y, x) = ((k / canvas) as f64, (k % canvas) as f64);
            waves
                .iter()
                .map(|[a, fx, fy, p]| a * (TAU * (fx * x + fy * y) / c + p).sin())
                .sum()
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter().map(|v| (2.0 * (v - lo) / span - 1.0) as f32).collect()
}

/// Smooth procedural images with a centered square occlusion.
pub fn gen_inpainting(n: usize, canvas: usize, occlusion_fraction: f64, seed: u64) -> Result<Vec<InpaintingSample>> {
    if canvas < 4 {
        return Err(Error::config(format!("canvas must be at least 4, got {canvas}")));
    }
    let side = mask_side(canvas, occlusion_fraction)?;
    let clue = center_mask(canvas, side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let original = Tensor::new(&[1, canvas, canvas], smooth_image(canvas, &mut rng))?;
        let contaminated = original.zip_map(clue.mask(), |o, m| o * (1.0 - m))?;
        out.push(InpaintingSample {
            contaminated,
            clue: clue.clone(),
            original,
        });
    }
    Ok(out)
}

fn push_blob(out: &mut Vec<u8>, t: &Tensor<f32>) {
    let blob = tns::encode(t);
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
}

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        match s {
            Sample::Classification(c) => {
                push_blob(&mut out, &c.image);
                push_blob(&mut out, c.clue.mask());
                push_blob(&mut out, &Tensor::new(&[1], vec![c.label as f32]).expect("one element"));
            }
            Sample::Inpainting(p) => {
                push_blob(&mut out, &p.contaminated);
                push_blob(&mut out, p.clue.mask());
                push_blob(&mut out, &p.original);
            }
        }
    }
    out
}

fn read_blob(cur: &mut Cursor) -> cram_diff::Result<Tensor<f32>> {
    let len = cur.u32()? as usize;
    let base = cur.offset();
    let bytes = cur.take(len)?;
    let mut inner = Cursor::new(bytes, base);
    let t = tns::read::<f32>(&mut inner)?;
    if inner.remaining() != 0 {
        return Err(inner.error(format!("{} stray bytes after tensor", inner.remaining())));
    }
    Ok(t)
}

fn read_sample(cur: &mut Cursor) -> cram_diff::Result<Sample> {
    let start = cur.offset();
    let image = read_blob(cur)?;
    let clue = read_blob(cur)?;
    let third = read_blob(cur)?;
    let bad = |msg: String| DiffError::Format { offset: start, msg };
    if image.rank() != 3 || clue.shape() != [1, image.shape()[1], image.shape()[2]] {
        return Err(bad(format!(
            "image {:?} and clue {:?} disagree",
            image.shape(),
            clue.shape()
        )));
    }
    let clue = ClueImage::new(clue).map_err(|e| bad(e.to_string()))?;
    if third.shape() == [1] {
        let v = third.data()[0];
        if v < 0.0 || v.fract() != 0.0 {
            return Err(bad(format!("invalid label {v}")));
        }
        Ok(Sample::Classification(ClassificationSample {
            image,
            clue,
            label: v as usize,
        }))
    } else if third.shape() == image.shape() {
        Ok(Sample::Inpainting(InpaintingSample {
            contaminated: image,
            clue,
            original: third,
        }))
    } else {
        Err(bad(format!("third tensor has unexpected shape {:?}", third.shape())))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut cur = Cursor::new(bytes, 0);
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format(0, "bad dataset magic"));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let s = read_sample(&mut cur).map_err(|e| match e {
            DiffError::Format { offset, msg } => Error::format(offset, format!("sample {i}: {msg}")),
            other => other.into(),
        })?;
        out.push(s);
    }
    if cur.remaining() != 0 {
        return Err(Error::format(cur.offset(), "trailing bytes after last sample"));
    }
    Ok(out)
}

pub fn save_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode_dataset(&fs::read(path)?)
}

/// Unwraps a dataset that must hold classification samples only.
pub fn classification_only(samples: Vec<Sample>) -> Result<Vec<ClassificationSample>> {
    samples
        .into_iter()
        .map(|s| match s {
            Sample::Classification(c) => Ok(c),
            Sample::Inpainting(_) => Err(Error::data("expected classification samples")),
        })
        .collect()
}

pub fn inpainting_only(samples: Vec<Sample>) -> Result<Vec<InpaintingSample>> {
    samples
        .into_iter()
        .map(|s| match s {
            Sample::Inpainting(p) => Ok(p),
            Sample::Classification(_) => Err(Error::data("expected inpainting samples")),
        })
        .collect()
}
