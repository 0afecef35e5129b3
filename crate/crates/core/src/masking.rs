//! Masking schedule and masked-view generation.
//!
//! Five mechanisms are available: square patches and single pixels in the
//! image plane, and uniformly chosen frequency bins over the full spectrum, the
//! low-frequency quadrant, or the high-frequency quadrant.
//!
//! Spatial budgets use round-half-to-even (`k = ⌊m·HW⌉`), frequency budgets
//! use the ceiling (`k = ⌈m·HW⌉`). Products that land within `1e-9` of an
//! integer are snapped first so `0.1·3·100` counts as 30, not 31.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::spectral::{dft2, idft2, Complex64};
use crate::tensor::Tensor;

/// Increasing masking levels `m_t = t·alpha`, `t = 0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    n: usize,
    alpha: f64,
    levels: Vec<f64>,
}

impl MaskSchedule {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

pub fn make_schedule(n: usize, alpha: f64) -> Result<MaskSchedule> {
    let invalid = |reason: &str| Error::InvalidSchedule {
        n,
        alpha,
        reason: reason.to_string(),
    };
    if n < 2 {
        return Err(invalid("need at least two views"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid("alpha must be positive"));
    }
    if (n - 1) as f64 * alpha >= 1.0 {
        return Err(invalid("(n-1)·alpha must stay below 1"));
    }
    let levels = (0..n).map(|t| t as f64 * alpha).collect();
    Ok(MaskSchedule { n, alpha, levels })
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// `⌊m·HW⌉` with ties to even.
pub fn spatial_budget(m: f64, cells: usize) -> usize {
    snap(m * cells as f64).round_ties_even().max(0.0) as usize
}

/// `⌈m·HW⌉`.
pub fn frequency_budget(m: f64, cells: usize) -> usize {
    snap(m * cells as f64).ceil().max(0.0) as usize
}

/// An `H x W` grid of `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
            count: 0,
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
            count: height * width,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[bits.len()]));
        }
        let count = bits.iter().filter(|b| **b).count();
        Ok(BinaryMask {
            height,
            width,
            bits,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn masked_count(&self) -> usize {
        self.count
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        let b = &mut self.bits[i * self.width + j];
        if *b != on {
            *b = on;
            if on {
                self.count += 1;
            } else {
                self.count -= 1;
            }
        }
    }

    /// Coordinates of every set bit, row-major.
    pub fn ones_iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(k, _)| (k / w, k % w))
    }

    /// `1 - M`.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
            count: self.bits.len() - self.count,
        }
    }
}

/// Closes a bin set under the conjugate mirror `(u, v) -> (-u mod H, -v mod W)`.
pub fn symmetric_closure(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    for (u, v) in mask.ones_iter() {
        out.set((h - u) % h, (w - v) % w, true);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Spatial,
    Frequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    All,
    Low,
    High,
}

impl Band {
    /// Row and column ranges of the band's index set.
    pub fn region(self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (hh, hw) = (height / 2, width / 2);
        match self {
            Band::All => (0..height, 0..width),
            Band::Low => (0..hh, 0..hw),
            Band::High => (hh..height, hw..width),
        }
    }

    pub fn region_size(self, height: usize, width: usize) -> usize {
        let (r, c) = self.region(height, width);
        r.len() * c.len()
    }
}

/// Which mechanism produces the masks of each view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Union of `side x side` squares. `side = None` means `⌈H/8⌉`.
    Patch { side: Option<usize> },
    Pixel,
    Frequency { band: Band, symmetric: bool },
}

impl MaskPolicy {
    pub fn family(&self) -> Family {
        match self {
            MaskPolicy::Patch { .. } | MaskPolicy::Pixel => Family::Spatial,
            MaskPolicy::Frequency { .. } => Family::Frequency,
        }
    }

    pub fn subtype(&self) -> Subtype {
        match self {
            MaskPolicy::Patch { .. } => Subtype::Patch,
            MaskPolicy::Pixel => Subtype::Pixel,
            MaskPolicy::Frequency { band: Band::All, .. } => Subtype::All,
            MaskPolicy::Frequency { band: Band::Low, .. } => Subtype::Low,
            MaskPolicy::Frequency { band: Band::High, .. } => Subtype::High,
        }
    }

    pub fn from_parts(family: Family, subtype: Subtype, side: Option<usize>) -> Result<Self> {
        let band = |band| MaskPolicy::Frequency {
            band,
            symmetric: false,
        };
        match (family, subtype) {
            (Family::Spatial, Subtype::Patch) => Ok(MaskPolicy::Patch { side }),
            (Family::Spatial, Subtype::Pixel) => Ok(MaskPolicy::Pixel),
            (Family::Frequency, Subtype::All) => Ok(band(Band::All)),
            (Family::Frequency, Subtype::Low) => Ok(band(Band::Low)),
            (Family::Frequency, Subtype::High) => Ok(band(Band::High)),
            _ => Err(Error::Parameter {
                name: "subtype",
                detail: format!("{subtype} is not a {family:?} mask"),
            }),
        }
    }

    /// The patch side actually used for an image of height `height`.
    pub fn patch_side(&self, height: usize) -> usize {
        match self {
            MaskPolicy::Patch { side: Some(s) } => *s,
            _ => height.div_ceil(8).max(1),
        }
    }

    /// Largest budget this policy must support for `level`, checked against
    /// the available region.
    pub fn check_level(&self, level: f64, height: usize, width: usize) -> Result<()> {
        match self {
            MaskPolicy::Patch { .. } => {
                let side = self.patch_side(height);
                if side == 0 || side > height.min(width) {
                    return Err(Error::Parameter {
                        name: "patch side",
                        detail: format!("{side} outside 1..={}", height.min(width)),
                    });
                }
                Ok(())
            }
            MaskPolicy::Pixel => Ok(()),
            MaskPolicy::Frequency { band, .. } => {
                let k = frequency_budget(level, height * width);
                let region = band.region_size(height, width);
                if k > region {
                    Err(Error::BudgetExceedsRegion { k, region })
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subtype {
    Patch,
    Pixel,
    All,
    Low,
    High,
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Subtype::Patch => "patch",
            Subtype::Pixel => "pixel",
            Subtype::All => "all",
            Subtype::Low => "low",
            Subtype::High => "high",
        })
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "patch" => Subtype::Patch,
            "pixel" => Subtype::Pixel,
            "all" => Subtype::All,
            "low" => Subtype::Low,
            "high" => Subtype::High,
            _ => {
                return Err(Error::Unknown {
                    what: "mask subtype",
                    name: s.into(),
                })
            }
        })
    }
}

/// A square that was stamped into a patch mask. `top`/`left` may be negative;
/// the square is clipped at the borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Square {
    pub top: isize,
    pub left: isize,
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct PatchMask {
    pub mask: BinaryMask,
    pub squares: Vec<Square>,
}

/// Accumulates random squares until the union covers `⌊m·HW⌉` cells. The
/// last square can overshoot, so the masked count lies in
/// `[⌊m·HW⌉, ⌊m·HW⌉ + side² - 1]`.
///
/// Top-left corners range over `[1-side, H-1] x [1-side, W-1]` so every cell
/// is covered by the same number of placements.
pub fn sample_patch_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    m: f64,
    side: usize,
    rng: &mut R,
) -> Result<PatchMask> {
    if side == 0 || side > height.min(width) {
        return Err(Error::Parameter {
            name: "patch side",
            detail: format!("{side} outside 1..={}", height.min(width)),
        });
    }
    check_fraction(m)?;
    let target = spatial_budget(m, height * width);
    let mut mask = BinaryMask::zeros(height, width);
    let mut squares = Vec::new();
    let lo = 1 - side as isize;
    while mask.masked_count() < target {
        let top = rng.gen_range(lo..height as isize);
        let left = rng.gen_range(lo..width as isize);
        let rows = top.max(0) as usize..((top + side as isize) as usize).min(height);
        let cols = left.max(0) as usize..((left + side as isize) as usize).min(width);
        for i in rows {
            for j in cols.clone() {
                mask.set(i, j, true);
            }
        }
        squares.push(Square { top, left, side });
    }
    Ok(PatchMask { mask, squares })
}

/// Exactly `⌊m·HW⌉` distinct pixels, uniformly chosen.
pub fn sample_pixel_mask<R: Rng + ?Sized>(height: usize, width: usize, m: f64, rng: &mut R) -> Result<BinaryMask> {
    check_fraction(m)?;
    let cells = height * width;
    let k = spatial_budget(m, cells);
    let mut mask = BinaryMask::zeros(height, width);
    for idx in index::sample(rng, cells, k) {
        mask.set(idx / width, idx % width, true);
    }
    Ok(mask)
}

/// Indicator of the zeroed bins: `⌈m·HW⌉` distinct bins drawn from `band`.
pub fn sample_freq_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    m: f64,
    band: Band,
    rng: &mut R,
) -> Result<BinaryMask> {
    check_fraction(m)?;
    let k = frequency_budget(m, height * width);
    let (rows, cols) = band.region(height, width);
    let region = rows.len() * cols.len();
    if k > region {
        return Err(Error::BudgetExceedsRegion { k, region });
    }
    let mut mask = BinaryMask::zeros(height, width);
    let rw = cols.len();
    for idx in index::sample(rng, region, k) {
        mask.set(rows.start + idx / rw, cols.start + idx % rw, true);
    }
    Ok(mask)
}

fn check_fraction(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Parameter {
            name: "mask fraction",
            detail: format!("{m} outside [0, 1)"),
        });
    }
    Ok(())
}

fn check_geometry(x: &ImageTensor, mask: &BinaryMask) -> Result<()> {
    if (x.height(), x.width()) != (mask.height, mask.width) {
        return Err(Error::shape(
            "apply mask",
            &[x.height(), x.width()],
            &[mask.height, mask.width],
        ));
    }
    Ok(())
}

/// `x ⊙ (1 - broadcast_C(M))` for every image of the batch.
pub fn apply_spatial_mask(x: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor> {
    check_geometry(x, mask)?;
    let mut out = x.clone();
    let plane = x.plane_len();
    for img in 0..x.batch() {
        mask_image_spatial(out.image_mut(img), plane, mask);
    }
    Ok(out)
}

fn mask_image_spatial(image: &mut [f64], plane: usize, mask: &BinaryMask) {
    for channel in image.chunks_mut(plane) {
        for (v, &b) in channel.iter_mut().zip(&mask.bits) {
            if b {
                *v = 0.0;
            }
        }
    }
}

/// `1 - broadcast_C(M)` as a flat `[C·H·W]` tensor, for masking on a tape.
pub fn spatial_keep_tensor(mask: &BinaryMask, channels: usize) -> Tensor {
    let plane: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let data = plane.repeat(channels);
    Tensor::new(vec![data.len()], data).expect("flat shape")
}

/// Zeroes the bins marked in `zeroed` in every channel's spectrum and returns
/// the real part of the reconstruction together with the largest discarded
/// imaginary component.
pub fn apply_freq_mask(x: &ImageTensor, zeroed: &BinaryMask) -> Result<(ImageTensor, f64)> {
    check_geometry(x, zeroed)?;
    let mut out = x.clone();
    let mut residue = 0.0f64;
    for img in 0..x.batch() {
        residue = residue.max(mask_image_freq(out.image_mut(img), x.height(), x.width(), zeroed));
    }
    Ok((out, residue))
}

fn mask_image_freq(image: &mut [f64], height: usize, width: usize, zeroed: &BinaryMask) -> f64 {
    if zeroed.masked_count() == 0 {
        return 0.0;
    }
    let mut residue = 0.0f64;
    for channel in image.chunks_mut(height * width) {
        let mut spec = dft2(channel, height, width);
        for (bin, &z) in spec.bins_mut().iter_mut().zip(&zeroed.bits) {
            if z {
                *bin = Complex64::new(0.0, 0.0);
            }
        }
        let back = idft2(&spec);
        residue = residue.max(back.max_imag());
        for (v, c) in channel.iter_mut().zip(back.bins()) {
            *v = c.re;
        }
    }
    residue
}

/// Masks one `C·H·W` image in place at level `m` with a fresh mask from
/// `policy`. Returns the discarded imaginary residue (0 for spatial masks).
pub fn mask_image<R: Rng + ?Sized>(
    image: &mut [f64],
    height: usize,
    width: usize,
    m: f64,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<f64> {
    let plane = height * width;
    match *policy {
        MaskPolicy::Patch { .. } => {
            let pm = sample_patch_mask(height, width, m, policy.patch_side(height), rng)?;
            mask_image_spatial(image, plane, &pm.mask);
        }
        MaskPolicy::Pixel => {
            let mask = sample_pixel_mask(height, width, m, rng)?;
            mask_image_spatial(image, plane, &mask);
        }
        MaskPolicy::Frequency { band, symmetric } => {
            let mut zeroed = sample_freq_mask(height, width, m, band, rng)?;
            if symmetric {
                zeroed = symmetric_closure(&zeroed);
            }
            return Ok(mask_image_freq(image, height, width, &zeroed));
        }
    }
    Ok(0.0)
}

/// The `n` views of a batch plus the worst imaginary residue seen while
/// reconstructing frequency-masked views (0 for spatial policies).
#[derive(Clone, Debug)]
pub struct MaskedViews {
    pub views: Vec<ImageTensor>,
    pub max_imag_residue: f64,
}

/// View 0 is the input itself; view `t` masks each image independently at
/// level `m_t`. Masks are drawn view-major, then by image index.
pub fn make_views<R: Rng + ?Sized>(
    x: &ImageTensor,
    schedule: &MaskSchedule,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<MaskedViews> {
    let (h, w) = (x.height(), x.width());
    let last = *schedule.levels().last().expect("schedule has n >= 2 levels");
    policy.check_level(last, h, w)?;
    let mut views = Vec::with_capacity(schedule.n());
    views.push(x.clone());
    let mut residue = 0.0f64;
    for &m in &schedule.levels()[1..] {
        let mut view = x.clone();
        for img in 0..x.batch() {
            residue = residue.max(mask_image(view.image_mut(img), h, w, m, policy, rng)?);
        }
        views.push(view);
    }
    Ok(MaskedViews {
        views,
        max_imag_residue: residue,
    })
}

const MASK_MAGIC: &[u8; 8] = b"M2AMASK1";

fn family_code(f: Family) -> u8 {
    match f {
        Family::Spatial => 0,
        Family::Frequency => 1,
    }
}

fn subtype_code(s: Subtype) -> u8 {
    match s {
        Subtype::Patch => 0,
        Subtype::Pixel => 1,
        Subtype::All => 2,
        Subtype::Low => 3,
        Subtype::High => 4,
    }
}

/// Bit-grid dump: magic, `H` and `W` as little-endian u32, family and subtype
/// bytes, then row-major bits packed MSB-first.
pub fn encode_mask(mask: &BinaryMask, family: Family, subtype: Subtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + mask.bits.len().div_ceil(8));
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.height as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width as u32).to_le_bytes());
    out.push(family_code(family));
    out.push(subtype_code(subtype));
    for chunk in mask.bits.chunks(8) {
        let mut byte = 0u8;
        for (k, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 0x80 >> k;
            }
        }
        out.push(byte);
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<(BinaryMask, Family, Subtype)> {
    let bad = |what: &str| Error::Archive(format!("mask dump: {what}"));
    if bytes.len() < 18 || &bytes[..8] != MASK_MAGIC {
        return Err(bad("missing header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let family = match bytes[16] {
        0 => Family::Spatial,
        1 => Family::Frequency,
        _ => return Err(bad("family byte")),
    };
    let subtype = match bytes[17] {
        0 => Subtype::Patch,
        1 => Subtype::Pixel,
        2 => Subtype::All,
        3 => Subtype::Low,
        4 => Subtype::High,
        _ => return Err(bad("subtype byte")),
    };
    MaskPolicy::from_parts(family, subtype, None)?;
    let payload = &bytes[18..];
    if payload.len() != (h * w).div_ceil(8) {
        return Err(bad("payload length"));
    }
    let bits = (0..h * w)
        .map(|k| payload[k / 8] & (0x80 >> (k % 8)) != 0)
        .collect();
    Ok((BinaryMask::from_bits(h, w, bits)?, family, subtype))
}
