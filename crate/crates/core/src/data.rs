//! Synthetic source data, corruption operators and the continual target stream.
//!
//! Each class is an oriented sinusoidal grating with a class-specific
//! orientation, a class tint and a slight class-specific mean color. Phase,
//! frequency and amplitude are drawn per image, and pixel noise is added.
//!
//! The stream reuses one clean evaluation split for every domain, as the
//! corrupted benchmarks do, corrupting and reshuffling it per domain. Labels
//! never travel with the batches: [`DomainStream::batches`] yields pixels only,
//! and scoring goes through the separate [`LabelLedger`].

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// SplitMix64 finalizer over `base` and a tag; used to derive independent
/// per-domain and per-arm seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: ImageTensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub stream_size: usize,
    /// Grating cycles across the image, drawn uniformly from this range.
    pub frequency: (f64, f64),
    /// Grating amplitude range.
    pub amplitude: (f64, f64),
    /// Standard deviation of the per-image orientation jitter, in radians.
    pub orientation_jitter: f64,
    /// Per-class mean color offset magnitude.
    pub color_offset: f64,
    pub pixel_noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            train_size: 6000,
            stream_size: 1000,
            frequency: (2.5, 4.5),
            amplitude: (0.15, 0.3),
            orientation_jitter: 0.06,
            color_offset: 0.02,
            pixel_noise: 0.03,
        }
    }
}

/// Source training split and the clean split the target stream is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train: LabeledImages,
    pub stream: LabeledImages,
}

impl SyntheticDataset {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }
}

/// Generates both splits. Every `classes` consecutive draws cover each class
/// once before shuffling, so splits whose size is a multiple of `classes` are
/// exactly balanced.
pub fn generate_source(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    let min = spec.classes * 10;
    if spec.train_size < min {
        return Err(Error::Parameter {
            name: "train_size",
            detail: format!("{} is below {} (10 per class)", spec.train_size, min),
        });
    }
    if spec.classes < 2 {
        return Err(Error::Parameter {
            name: "classes",
            detail: "need at least two classes".into(),
        });
    }
    let train = generate_split(spec, spec.train_size, derive_seed(seed, 1));
    let stream = generate_split(spec, spec.stream_size, derive_seed(seed, 2));
    Ok(SyntheticDataset {
        spec: *spec,
        train,
        stream,
    })
}

fn class_tint(spec: &DatasetSpec, class: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x7157, class as u64));
    let tint = (0..spec.channels).map(|_| rng.gen_range(0.6..1.0)).collect();
    let offset = (0..spec.channels)
        .map(|_| rng.gen_range(-1.0..1.0) * spec.color_offset)
        .collect();
    (tint, offset)
}

fn generate_split(spec: &DatasetSpec, size: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..size).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let tints: Vec<_> = (0..spec.classes).map(|k| class_tint(spec, k)).collect();
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(size * c * h * w);
    for &label in &labels {
        let theta = PI * label as f64 / spec.classes as f64
            + spec.orientation_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let freq = rng.gen_range(spec.frequency.0..spec.frequency.1);
        let amp = rng.gen_range(spec.amplitude.0..spec.amplitude.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (kx, ky) = (theta.cos() * freq / w as f64, theta.sin() * freq / h as f64);
        let (tint, offset) = &tints[label];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = (2.0 * PI * (kx * j as f64 + ky * i as f64) + phase).cos();
                    let v = 0.5 + offset[ch] + amp * tint[ch] * g + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    LabeledImages {
        images: ImageTensor::new(size, c, h, w, data).expect("consistent geometry"),
        labels,
    }
}

const DATA_MAGIC: &[u8; 8] = b"M2ADATA1";

/// `magic, u32 K, C, H, W, count, f64 images[count·C·H·W], u32 labels[count]`.
pub fn encode_split(split: &LabeledImages, classes: usize) -> Vec<u8> {
    let im = &split.images;
    let mut out = Vec::with_capacity(28 + im.data().len() * 8 + split.len() * 4);
    out.extend_from_slice(DATA_MAGIC);
    for v in [classes, im.channels(), im.height(), im.width(), split.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in im.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &split.labels {
        out.extend_from_slice(&(*l as u32).to_le_bytes());
    }
    out
}

/// Inverse of [`encode_split`]; returns the class count alongside the split.
pub fn decode_split(bytes: &[u8]) -> Result<(usize, LabeledImages)> {
    let bad = |s: &str| Error::Archive(format!("dataset container: {s}"));
    if bytes.len() < 28 || &bytes[..8] != DATA_MAGIC {
        return Err(bad("missing header"));
    }
    let field = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (classes, c, h, w, count) = (field(0), field(1), field(2), field(3), field(4));
    let n = count * c * h * w;
    if bytes.len() != 28 + 8 * n + 4 * count {
        return Err(bad("payload length"));
    }
    let data = bytes[28..28 + 8 * n]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels: Vec<usize> = bytes[28 + 8 * n..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if labels.iter().any(|l| *l >= classes) {
        return Err(bad("label out of range"));
    }
    Ok((
        classes,
        LabeledImages {
            images: ImageTensor::new(count, c, h, w, data)?,
            labels,
        },
    ))
}

pub fn save_split(split: &LabeledImages, classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_split(split, classes)).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<(usize, LabeledImages)> {
    decode_split(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Desk-scale analogues of the common corruption families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    JpegLike,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Elastic,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegLike,
    ];

    /// Stream order following the benchmark's column order
    /// (GN SN IN DB MB B C ET P JC, with the weather columns dropped).
    pub fn default_order() -> Vec<CorruptionKind> {
        Self::ALL.to_vec()
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::MotionBlur => "motion-blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegLike => "jpeg-like",
        }
    }

    /// Benchmark column abbreviation.
    pub fn abbrev(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "GN",
            CorruptionKind::ShotNoise => "SN",
            CorruptionKind::ImpulseNoise => "IN",
            CorruptionKind::DefocusBlur => "DB",
            CorruptionKind::MotionBlur => "MB",
            CorruptionKind::Brightness => "B",
            CorruptionKind::Contrast => "C",
            CorruptionKind::Elastic => "ET",
            CorruptionKind::Pixelate => "P",
            CorruptionKind::JpegLike => "JC",
        }
    }

    /// Kind-specific parameter for severities 1..=5.
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            // noise std
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            // photons per unit intensity (lower is noisier)
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            // fraction of salt-and-pepper pixels
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            // box radius
            CorruptionKind::DefocusBlur => [1.0, 1.0, 2.0, 2.0, 3.0],
            // streak length in pixels
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            // additive shift
            CorruptionKind::Brightness => [0.03, 0.06, 0.09, 0.12, 0.16],
            // contrast factor (lower is stronger)
            CorruptionKind::Contrast => [0.75, 0.6, 0.5, 0.4, 0.3],
            // warp amplitude in pixels
            CorruptionKind::Elastic => [0.5, 1.0, 1.5, 2.0, 3.0],
            // block side
            CorruptionKind::Pixelate => [2.0, 2.0, 3.0, 4.0, 5.0],
            // DCT quantization step
            CorruptionKind::JpegLike => [0.1, 0.2, 0.3, 0.5, 0.8],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.abbrev().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                what: "corruption kind",
                name: s.into(),
            })
    }
}

/// A corruption kind at a severity. Severity 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionOp {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionOp {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::Parameter {
                name: "severity",
                detail: format!("{severity} outside 0..=5"),
            });
        }
        Ok(CorruptionOp { kind, severity })
    }

    pub fn parameter(&self) -> Option<f64> {
        (self.severity > 0).then(|| self.kind.severity_table()[self.severity as usize - 1])
    }
}

/// Corrupts every image of `x` and clips the result to `[0, 1]`.
pub fn corrupt<R: Rng + ?Sized>(x: &ImageTensor, op: CorruptionOp, rng: &mut R) -> Result<ImageTensor> {
    let op = CorruptionOp::new(op.kind, op.severity)?;
    let Some(param) = op.parameter() else {
        return Ok(x.clone());
    };
    let mut out = x.clone();
    let (h, w) = (x.height(), x.width());
    for img in 0..x.batch() {
        let image = out.image_mut(img);
        match op.kind {
            CorruptionKind::GaussianNoise => gaussian_noise(image, param, rng),
            CorruptionKind::ShotNoise => shot_noise(image, param, rng),
            CorruptionKind::ImpulseNoise => impulse_noise(image, param, rng),
            CorruptionKind::DefocusBlur => {
                for ch in image.chunks_mut(h * w) {
                    box_blur(ch, h, w, param as usize);
                }
            }
            CorruptionKind::MotionBlur => {
                let angle = rng.gen_range(0.0..PI);
                for ch in image.chunks_mut(h * w) {
                    motion_blur(ch, h, w, param, angle);
                }
            }
            CorruptionKind::Brightness => image.iter_mut().for_each(|v| *v += param),
            CorruptionKind::Contrast => {
                for ch in image.chunks_mut(h * w) {
                    contrast(ch, param);
                }
            }
            CorruptionKind::Elastic => elastic(image, h, w, param, rng),
            CorruptionKind::Pixelate => {
                for ch in image.chunks_mut(h * w) {
                    pixelate(ch, h, w, param as usize);
                }
            }
            CorruptionKind::JpegLike => {
                for ch in image.chunks_mut(h * w) {
                    block_quantize(ch, h, w, param);
                }
            }
        }
        image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn gaussian_noise<R: Rng + ?Sized>(image: &mut [f64], std: f64, rng: &mut R) {
    let n = Normal::new(0.0, std).expect("finite std");
    image.iter_mut().for_each(|v| *v += n.sample(rng));
}

fn shot_noise<R: Rng + ?Sized>(image: &mut [f64], photons: f64, rng: &mut R) {
    for v in image.iter_mut() {
        let lambda = (v.clamp(0.0, 1.0) * photons).max(0.0);
        *v = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(rng) / photons
        } else {
            0.0
        };
    }
}

fn impulse_noise<R: Rng + ?Sized>(image: &mut [f64], amount: f64, rng: &mut R) {
    for v in image.iter_mut() {
        if rng.gen::<f64>() < amount {
            *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        }
    }
}

/// Separable mean filter of radius `r` with edge clamping.
pub fn box_blur(ch: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let ri = r as isize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for d in -ri..=ri {
                let jj = (j as isize + d).clamp(0, w as isize - 1) as usize;
                s += ch[i * w + jj];
            }
            tmp[i * w + j] = s * norm;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for d in -ri..=ri {
                let ii = (i as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[ii * w + j];
            }
            ch[i * w + j] = s * norm;
        }
    }
}

fn bilinear(ch: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = ch[y0 * w + x0] * (1.0 - fx) + ch[y0 * w + x1] * fx;
    let bottom = ch[y1 * w + x0] * (1.0 - fx) + ch[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Averages `length` bilinear samples along a centered streak at `angle`.
fn motion_blur(ch: &mut [f64], h: usize, w: usize, length: f64, angle: f64) {
    let taps = length.round().max(1.0) as usize;
    let src = ch.to_vec();
    let (dy, dx) = (angle.sin(), angle.cos());
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for t in 0..taps {
                let off = t as f64 - (taps - 1) as f64 / 2.0;
                s += bilinear(&src, h, w, i as f64 + off * dy, j as f64 + off * dx);
            }
            ch[i * w + j] = s / taps as f64;
        }
    }
}

fn contrast(ch: &mut [f64], factor: f64) {
    let mean = ch.iter().sum::<f64>() / ch.len() as f64;
    ch.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
}

/// Replaces every `block x block` tile (clipped at the borders) by its mean.
pub fn pixelate(ch: &mut [f64], h: usize, w: usize, block: usize) {
    if block <= 1 {
        return;
    }
    for bi in (0..h).step_by(block) {
        for bj in (0..w).step_by(block) {
            let (ie, je) = ((bi + block).min(h), (bj + block).min(w));
            let mut s = 0.0;
            for i in bi..ie {
                for j in bj..je {
                    s += ch[i * w + j];
                }
            }
            let mean = s / ((ie - bi) * (je - bj)) as f64;
            for i in bi..ie {
                for j in bj..je {
                    ch[i * w + j] = mean;
                }
            }
        }
    }
}

const JPEG_BLOCK: usize = 8;

fn dct_basis() -> [[f64; JPEG_BLOCK]; JPEG_BLOCK] {
    let n = JPEG_BLOCK as f64;
    let mut b = [[0.0; JPEG_BLOCK]; JPEG_BLOCK];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = scale * (PI * (2 * x + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    b
}

/// Orthonormal 8x8 DCT per tile, coefficients rounded to multiples of `step`
/// (higher frequencies get proportionally coarser steps), then inverted.
/// Partial tiles at the borders are left untouched.
fn block_quantize(ch: &mut [f64], h: usize, w: usize, step: f64) {
    let basis = dct_basis();
    let n = JPEG_BLOCK;
    for bi in (0..h.saturating_sub(n - 1)).step_by(n) {
        for bj in (0..w.saturating_sub(n - 1)).step_by(n) {
            let mut coef = [[0.0; JPEG_BLOCK]; JPEG_BLOCK];
            for (u, crow) in coef.iter_mut().enumerate() {
                for (v, c) in crow.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for x in 0..n {
                        for y in 0..n {
                            s += basis[u][x] * basis[v][y] * ch[(bi + x) * w + bj + y];
                        }
                    }
                    let q = step * (1.0 + (u + v) as f64 / 4.0);
                    *c = (s / q).round() * q;
                }
            }
            for x in 0..n {
                for y in 0..n {
                    let mut s = 0.0;
                    for (u, crow) in coef.iter().enumerate() {
                        for (v, c) in crow.iter().enumerate() {
                            s += basis[u][x] * basis[v][y] * c;
                        }
                    }
                    ch[(bi + x) * w + bj + y] = s;
                }
            }
        }
    }
}

/// Random displacement field on a 5x5 control grid, bilinearly upsampled and
/// applied with bilinear resampling (same field for all channels).
fn elastic<R: Rng + ?Sized>(image: &mut [f64], h: usize, w: usize, amplitude: f64, rng: &mut R) {
    const GRID: usize = 5;
    let n = Normal::new(0.0, amplitude).expect("finite amplitude");
    let dy: Vec<f64> = (0..GRID * GRID).map(|_| n.sample(rng)).collect();
    let dx: Vec<f64> = (0..GRID * GRID).map(|_| n.sample(rng)).collect();
    let field = |g: &[f64], i: usize, j: usize| {
        let gy = i as f64 * (GRID - 1) as f64 / (h.max(2) - 1) as f64;
        let gx = j as f64 * (GRID - 1) as f64 / (w.max(2) - 1) as f64;
        bilinear(g, GRID, GRID, gy, gx)
    };
    let plane = h * w;
    let src = image.to_vec();
    for i in 0..h {
        for j in 0..w {
            let (oy, ox) = (field(&dy, i, j), field(&dx, i, j));
            for (c, out) in image.chunks_mut(plane).enumerate() {
                out[i * w + j] = bilinear(&src[c * plane..(c + 1) * plane], h, w, i as f64 + oy, j as f64 + ox);
            }
        }
    }
}

/// The order, severity and size of the target stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub order: Vec<CorruptionKind>,
    pub severity: u8,
    pub samples_per_domain: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            order: CorruptionKind::default_order(),
            severity: 5,
            samples_per_domain: 1000,
        }
    }
}

/// One unlabeled batch handed to the adaptation loop.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub domain: usize,
    /// Position of the batch within its domain.
    pub index: usize,
    pub images: ImageTensor,
}

/// Labels of every stream batch, kept apart from the pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelLedger {
    /// `labels[domain][batch]`.
    labels: Vec<Vec<Vec<usize>>>,
}

impl LabelLedger {
    pub fn labels(&self, domain: usize, batch: usize) -> &[usize] {
        &self.labels[domain][batch]
    }

    /// Number of wrong predictions in a batch.
    pub fn errors(&self, domain: usize, batch: usize, predictions: &[usize]) -> usize {
        self.labels(domain, batch)
            .iter()
            .zip(predictions)
            .filter(|(l, p)| l != p)
            .count()
    }

    /// A ledger with every label replaced by `sentinel`.
    pub fn with_sentinel(&self, sentinel: usize) -> LabelLedger {
        LabelLedger {
            labels: self
                .labels
                .iter()
                .map(|d| d.iter().map(|b| vec![sentinel; b.len()]).collect())
                .collect(),
        }
    }
}

/// The continual target stream: domains visited once each, in order.
#[derive(Clone, Debug)]
pub struct DomainStream {
    base: ImageTensor,
    ops: Vec<CorruptionOp>,
    batch: usize,
    seed: u64,
    /// Per-domain visiting order of the base images.
    orders: Vec<Vec<usize>>,
}

/// Builds the stream over the first `samples_per_domain` images of `clean`
/// and returns it with its label ledger.
pub fn build_stream(
    clean: &LabeledImages,
    spec: &StreamSpec,
    batch: usize,
    seed: u64,
) -> Result<(DomainStream, LabelLedger)> {
    if spec.order.is_empty() {
        return Err(Error::Parameter {
            name: "order",
            detail: "stream needs at least one domain".into(),
        });
    }
    if batch == 0 {
        return Err(Error::Parameter {
            name: "batch",
            detail: "must be positive".into(),
        });
    }
    if spec.samples_per_domain == 0 || spec.samples_per_domain > clean.len() {
        return Err(Error::Parameter {
            name: "samples_per_domain",
            detail: format!("{} not in 1..={}", spec.samples_per_domain, clean.len()),
        });
    }
    let ops = spec
        .order
        .iter()
        .map(|&k| CorruptionOp::new(k, spec.severity))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.samples_per_domain;
    let idx: Vec<usize> = (0..n).collect();
    let base = clean.images.select(&idx);
    let mut orders = Vec::with_capacity(ops.len());
    let mut labels = Vec::with_capacity(ops.len());
    for d in 0..ops.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + d as u64));
        let mut order = idx.clone();
        order.shuffle(&mut rng);
        labels.push(
            order
                .chunks(batch)
                .map(|c| c.iter().map(|&i| clean.labels[i]).collect())
                .collect(),
        );
        orders.push(order);
    }
    Ok((
        DomainStream {
            base,
            ops,
            batch,
            seed,
            orders,
        },
        LabelLedger { labels },
    ))
}

impl DomainStream {
    pub fn domains(&self) -> &[CorruptionOp] {
        &self.ops
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_domain(&self) -> usize {
        self.base.batch().div_ceil(self.batch)
    }

    pub fn total_batches(&self) -> usize {
        self.ops.len() * self.batches_per_domain()
    }

    /// All corrupted images of one domain, in visiting order.
    pub fn domain_images(&self, domain: usize) -> Result<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 200 + domain as u64));
        let shuffled = self.base.select(&self.orders[domain]);
        corrupt(&shuffled, self.ops[domain], &mut rng)
    }

    /// Batches in stream order. Each domain is corrupted when first reached.
    pub fn batches(&self) -> impl Iterator<Item = Result<StreamBatch>> + '_ {
        (0..self.ops.len()).flat_map(move |d| {
            let images = self.domain_images(d);
            let n = self.base.batch();
            let batch = self.batch;
            let chunks: Vec<Result<StreamBatch>> = match images {
                Err(e) => vec![Err(e)],
                Ok(images) => (0..n.div_ceil(batch))
                    .map(|b| {
                        let idx: Vec<usize> = (b * batch..((b + 1) * batch).min(n)).collect();
                        Ok(StreamBatch {
                            domain: d,
                            index: b,
                            images: images.select(&idx),
                        })
                    })
                    .collect(),
            };
            chunks
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_size: 100,
            stream_size: 60,
            height: 16,
            width: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_reproducible_and_balanced() {
        let a = generate_source(&small_spec(), 5).unwrap();
        let b = generate_source(&small_spec(), 5).unwrap();
        assert_eq!(encode_split(&a.train, 10), encode_split(&b.train, 10));
        let mut hist = [0usize; 10];
        a.train.labels.iter().for_each(|l| hist[*l] += 1);
        assert!(hist.iter().all(|c| *c == 10));
        assert!(a.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_source(&small_spec(), 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn too_small_dataset_rejected() {
        let spec = DatasetSpec {
            train_size: 50,
            ..small_spec()
        };
        assert!(generate_source(&spec, 0).is_err());
    }

    #[test]
    fn container_roundtrip() {
        let d = generate_source(&small_spec(), 1).unwrap();
        let bytes = encode_split(&d.stream, 10);
        let (k, back) = decode_split(&bytes).unwrap();
        assert_eq!(k, 10);
        assert_eq!(back, d.stream);
        assert!(decode_split(&bytes[..100]).is_err());
    }

    #[test]
    fn kinds_parse() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
            assert_eq!(k.abbrev().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!(matches!("frost".parse::<CorruptionKind>(), Err(Error::Unknown { .. })));
    }

    #[test]
    fn severity_bounds() {
        assert!(CorruptionOp::new(CorruptionKind::Contrast, 6).is_err());
        let x = ImageTensor::zeros(1, 1, 4, 4);
        let op = CorruptionOp {
            kind: CorruptionKind::Contrast,
            severity: 9,
        };
        assert!(corrupt(&x, op, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn contrast_of_constant_is_identity() {
        let x = ImageTensor::new(2, 3, 5, 5, vec![0.42; 150]).unwrap();
        for s in 1..=5 {
            let y = corrupt(&x, CorruptionOp::new(CorruptionKind::Contrast, s).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixelate_block_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch: Vec<f64> = (0..35).map(|_| rng.gen()).collect();
        let mut out = ch.clone();
        pixelate(&mut out, 5, 7, 1);
        assert_eq!(out, ch);
        pixelate(&mut out, 5, 7, 2);
        assert_eq!(out[0], (ch[0] + ch[1] + ch[7] + ch[8]) / 4.0);
        // clipped bottom-right tile is a single pixel
        assert_eq!(out[34], ch[34]);
    }

    #[test]
    fn severity_zero_is_identity() {
        let d = generate_source(&small_spec(), 3).unwrap();
        for k in CorruptionKind::ALL {
            let y = corrupt(&d.stream.images, CorruptionOp::new(k, 0).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(y, d.stream.images);
        }
    }

    #[test]
    fn corruptions_are_finite_clipped_and_seeded() {
        let d = generate_source(&small_spec(), 4).unwrap();
        let x = d.stream.images.select(&[0, 1, 2]);
        for k in CorruptionKind::ALL {
            let op = CorruptionOp::new(k, 5).unwrap();
            let a = corrupt(&x, op, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = corrupt(&x, op, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b, "{k}");
            assert!(a.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), "{k}");
            assert_ne!(a, x, "{k} left the images untouched");
        }
    }

    #[test]
    fn stream_shape_and_determinism() {
        let d = generate_source(&small_spec(), 7).unwrap();
        let spec = StreamSpec {
            order: vec![CorruptionKind::Brightness],
            severity: 5,
            samples_per_domain: 60,
        };
        let (s, ledger) = build_stream(&d.stream, &spec, 20, 1).unwrap();
        let batches: Vec<_> = s.batches().collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 3);
        let (s2, ledger2) = build_stream(&d.stream, &spec, 20, 1).unwrap();
        let again: Vec<_> = s2.batches().collect::<Result<_>>().unwrap();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.images, b.images);
        }
        assert_eq!(ledger, ledger2);

        let short = StreamSpec {
            samples_per_domain: 50,
            ..spec.clone()
        };
        let (s3, l3) = build_stream(&d.stream, &short, 20, 1).unwrap();
        let sizes: Vec<usize> = s3.batches().map(|b| b.unwrap().images.batch()).collect();
        assert_eq!(sizes, vec![20, 20, 10]);
        assert_eq!(l3.labels(0, 2).len(), 10);

        let empty = StreamSpec {
            order: vec![],
            ..spec
        };
        assert!(build_stream(&d.stream, &empty, 20, 1).is_err());
    }

    #[test]
    fn ledger_labels_follow_shuffle() {
        let d = generate_source(&small_spec(), 8).unwrap();
        let spec = StreamSpec {
            order: vec![CorruptionKind::Contrast, CorruptionKind::Brightness],
            severity: 0,
            samples_per_domain: 40,
        };
        let (s, ledger) = build_stream(&d.stream, &spec, 10, 3).unwrap();
        for b in s.batches() {
            let b = b.unwrap();
            // severity 0 keeps pixels intact, so each image can be matched back
            for (k, &label) in ledger.labels(b.domain, b.index).iter().enumerate() {
                let img = b.images.image(k);
                let src = (0..40).find(|&i| d.stream.images.image(i) == img).unwrap();
                assert_eq!(d.stream.labels[src], label);
            }
        }
        assert!(ledger.with_sentinel(usize::MAX).labels(1, 0).iter().all(|l| *l == usize::MAX));
    }
}
