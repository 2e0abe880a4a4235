//! Parametric stroke digits and their morphometrics.
//!
//! A stroke is a straight segment with round caps, the stand-in for a
//! handwritten "1". Images are 28×28 rasters with intensities in `[0, 1]`.
//! Metadata is always measured from the raster so that ground truth, oracle
//! answers and evaluation share one measurement path; [`analytic_metadata`]
//! exists to validate that path.

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{atan2, cos, fabs, sin, sqrt};
use crate::rng::standard_normal;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const METADATA_DIM: usize = 6;
pub const METADATA_FIELDS: [&str; METADATA_DIM] =
    ["area", "length", "thickness", "slant", "width", "height"];

/// A standardized (or noisy standardized) metadata vector.
pub type MetaVec = [f64; METADATA_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("stroke thickness and length must be positive and finite")]
    NonPositiveStroke,
    #[error("stroke does not fit inside the 28x28 frame")]
    OutOfFrame,
    #[error("image has no ink after binarization")]
    EmptyInk,
    #[error("image must have {IMAGE_PIXELS} pixels in [0, 1], got {len} pixels")]
    InvalidImage { len: usize },
    #[error("metadata dimension `{0}` has zero variance")]
    ZeroVariance(&'static str),
    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("vectors have mismatched dimensions")]
    DimensionMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self, SynthError> {
        if pixels.len() != IMAGE_PIXELS || pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SynthError::InvalidImage { len: pixels.len() });
        }
        Ok(Image { pixels })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN becomes 0.
    pub fn from_clamped(values: impl IntoIterator<Item = f64>) -> Result<Self, SynthError> {
        let pixels: Vec<f64> = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Image::new(pixels)
    }

    pub fn zeros() -> Self {
        Image { pixels: alloc::vec![0.0; IMAGE_PIXELS] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * IMAGE_SIDE + col] = value.clamp(0.0, 1.0);
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Rows of the raster, top to bottom.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.pixels.chunks_exact(IMAGE_SIDE)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        crate::math::squared_distance(&self.pixels, &other.pixels) / IMAGE_PIXELS as f64
    }
}

/// Geometry of one stroke. Angles in radians, lengths in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeParams {
    /// Angle of the stroke axis from vertical; positive leans the top right.
    pub slant: f64,
    /// Stroke diameter.
    pub thickness: f64,
    /// Centerline length, caps excluded.
    pub length: f64,
    pub center_dx: f64,
    pub center_dy: f64,
}

/// Sampling ranges for random strokes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeRanges {
    pub slant: (f64, f64),
    pub thickness: (f64, f64),
    pub length: (f64, f64),
    pub offset: (f64, f64),
}

impl Default for StrokeRanges {
    fn default() -> Self {
        StrokeRanges { slant: (-0.4, 0.4), thickness: (1.5, 5.5), length: (12.0, 24.0), offset: (-2.0, 2.0) }
    }
}

impl StrokeParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let finite = [self.slant, self.thickness, self.length, self.center_dx, self.center_dy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.thickness <= 0.0 || self.length <= 0.0 {
            return Err(SynthError::NonPositiveStroke);
        }
        let half = IMAGE_SIDE as f64 / 2.0;
        let (hx, hy) = self.half_extents();
        if fabs(self.center_dx) + hx >= half || fabs(self.center_dy) + hy >= half {
            return Err(SynthError::OutOfFrame);
        }
        Ok(())
    }

    /// Half widths of the capsule's bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let r = self.thickness / 2.0;
        (self.length / 2.0 * fabs(sin(self.slant)) + r, self.length / 2.0 * fabs(cos(self.slant)) + r)
    }

    /// Uniform draw inside `ranges`, redrawn until the stroke is in frame.
    pub fn sample<R: Rng + ?Sized>(ranges: &StrokeRanges, rng: &mut R) -> Self {
        let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        loop {
            let p = StrokeParams {
                slant: uniform(ranges.slant),
                thickness: uniform(ranges.thickness),
                length: uniform(ranges.length),
                center_dx: uniform(ranges.offset),
                center_dy: uniform(ranges.offset),
            };
            if p.validate().is_ok() {
                return p;
            }
        }
    }

    fn endpoints(&self) -> ((f64, f64), (f64, f64)) {
        let cx = IMAGE_SIDE as f64 / 2.0 + self.center_dx;
        let cy = IMAGE_SIDE as f64 / 2.0 + self.center_dy;
        // y grows downward, so the top end sits at -cos.
        let ux = sin(self.slant) * self.length / 2.0;
        let uy = -cos(self.slant) * self.length / 2.0;
        ((cx + ux, cy + uy), (cx - ux, cy - uy))
    }
}

fn distance_to_segment(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    sqrt(qx * qx + qy * qy)
}

/// Renders an anti-aliased stroke.
///
/// Intensity is `clamp(0.5 - (d - thickness/2), 0, 1)` for distance `d` from
/// the pixel center to the centerline, so the 0.5 iso-contour is exactly the
/// capsule boundary.
pub fn render_stroke(p: &StrokeParams) -> Result<Image, SynthError> {
    p.validate()?;
    let (a, b) = p.endpoints();
    let radius = p.thickness / 2.0;
    let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let d = distance_to_segment(col as f64 + 0.5, row as f64 + 0.5, a, b);
            pixels.push((0.5 - (d - radius)).clamp(0.0, 1.0));
        }
    }
    Ok(Image { pixels })
}

/// Morphometrics of a digit. Lengths in pixels, area in pixels², slant in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub area: f64,
    pub length: f64,
    pub thickness: f64,
    pub slant: f64,
    pub width: f64,
    pub height: f64,
}

impl Metadata {
    pub fn to_array(&self) -> MetaVec {
        [self.area, self.length, self.thickness, self.slant, self.width, self.height]
    }

    pub fn from_array(v: MetaVec) -> Self {
        Metadata { area: v[0], length: v[1], thickness: v[2], slant: v[3], width: v[4], height: v[5] }
    }
}

/// Ground-truth morphometrics implied by the stroke geometry.
pub fn analytic_metadata(p: &StrokeParams) -> Metadata {
    let (l, t) = (p.length, p.thickness);
    Metadata {
        area: l * t + PI * (t / 2.0) * (t / 2.0),
        length: l,
        thickness: t,
        slant: p.slant,
        width: l * fabs(sin(p.slant)) + t,
        height: l * cos(p.slant) + t,
    }
}

/// Second moment along the axis, divided by area, for a capsule of
/// centerline length `l` and thickness `t`.
fn capsule_axial_variance(l: f64, t: f64) -> f64 {
    let r = t / 2.0;
    let area = l * t + PI * r * r;
    let moment = t * l * l * l / 12.0 + PI * r * r * l * l / 4.0 + 4.0 / 3.0 * l * r * r * r + PI * r * r * r * r / 4.0;
    moment / area
}

/// Fits a capsule with the given area and axial variance; returns (length, thickness).
fn fit_capsule(area: f64, axial_variance: f64) -> (f64, f64) {
    let disk_thickness = 2.0 * sqrt(area / PI);
    if axial_variance <= area / (4.0 * PI) {
        return (0.0, disk_thickness);
    }
    let length_for = |t: f64| (area - PI * t * t / 4.0) / t;
    // Axial variance falls monotonically as the capsule gets thicker at fixed area.
    let (mut lo, mut hi) = (1e-6 * disk_thickness, disk_thickness);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if capsule_axial_variance(length_for(mid), mid) > axial_variance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    (length_for(t), t)
}

/// Measures morphometrics from a raster.
///
/// Pixels at or above 0.5 form the ink mask. Measurements weight each pixel of
/// the mask, dilated by one pixel, by its intensity (its approximate
/// coverage), which keeps them sub-pixel accurate:
///
/// * area is the summed coverage;
/// * width and height sum the per-column and per-row maximum coverage;
/// * slant is the principal axis of the coverage-weighted covariance,
///   measured from vertical and wrapped to `(-π/2, π/2]`;
/// * length and thickness come from the round-capped stroke whose area and
///   axial variance match the measured ones, each clamped to at least 1 px.
pub fn measure_metadata(img: &Image) -> Result<Metadata, SynthError> {
    let n = IMAGE_SIDE;
    let ink: Vec<bool> = img.pixels.iter().map(|&v| v >= 0.5).collect();
    if !ink.iter().any(|&b| b) {
        return Err(SynthError::EmptyInk);
    }
    let mut coverage = alloc::vec![0.0; IMAGE_PIXELS];
    for row in 0..n {
        for col in 0..n {
            let near_ink = (row.saturating_sub(1)..=(row + 1).min(n - 1))
                .any(|r| (col.saturating_sub(1)..=(col + 1).min(n - 1)).any(|c| ink[r * n + c]));
            if near_ink {
                coverage[row * n + col] = img.pixels[row * n + col];
            }
        }
    }

    let area: f64 = coverage.iter().sum();
    let width: f64 = (0..n).map(|c| (0..n).map(|r| coverage[r * n + c]).fold(0.0, f64::max)).sum();
    let height: f64 = coverage.chunks_exact(n).map(|row| row.iter().copied().fold(0.0, f64::max)).sum();

    let (mut mx, mut my) = (0.0, 0.0);
    for (i, &w) in coverage.iter().enumerate() {
        mx += w * ((i % n) as f64 + 0.5);
        my += w * ((i / n) as f64 + 0.5);
    }
    mx /= area;
    my /= area;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, &w) in coverage.iter().enumerate() {
        let dx = (i % n) as f64 + 0.5 - mx;
        let dy = (i / n) as f64 + 0.5 - my;
        sxx += w * dx * dx;
        syy += w * dy * dy;
        sxy += w * dx * dy;
    }
    // Each pixel spreads its mass over a unit square: add 1/12 per axis.
    sxx = sxx / area + 1.0 / 12.0;
    syy = syy / area + 1.0 / 12.0;
    sxy /= area;

    let half_trace = 0.5 * (sxx + syy);
    let spread = sqrt(0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy);
    let major = half_trace + spread;
    let slant = if spread < 1e-12 {
        0.0
    } else {
        let theta = 0.5 * atan2(2.0 * sxy, sxx - syy);
        let (mut ux, mut uy) = (cos(theta), sin(theta));
        if uy > 0.0 {
            ux = -ux;
            uy = -uy;
        }
        let s = atan2(ux, -uy);
        if s <= -FRAC_PI_2 { s + PI } else { s }
    };

    let (length, thickness) = fit_capsule(area, major);
    Ok(Metadata { area, length: length.max(1.0), thickness: thickness.clamp(1.0, length.max(1.0)), slant, width, height })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: MetaVec,
    pub std: MetaVec,
}

impl Standardizer {
    /// Per-dimension mean and population standard deviation.
    pub fn fit(data: &[Metadata]) -> Result<Self, SynthError> {
        if data.len() < 2 {
            return Err(SynthError::TooFewItems { needed: 2, got: data.len() });
        }
        let n = data.len() as f64;
        let mut mean = [0.0; METADATA_DIM];
        for m in data {
            for (acc, v) in mean.iter_mut().zip(m.to_array()) {
                *acc += v / n;
            }
        }
        let mut std = [0.0; METADATA_DIM];
        for m in data {
            for ((acc, v), mu) in std.iter_mut().zip(m.to_array()).zip(mean) {
                *acc += (v - mu) * (v - mu) / n;
            }
        }
        for (d, s) in std.iter_mut().enumerate() {
            *s = sqrt(*s);
            if !(*s > 1e-12) {
                return Err(SynthError::ZeroVariance(METADATA_FIELDS[d]));
            }
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, m: &Metadata) -> MetaVec {
        let mut out = m.to_array();
        for ((v, mu), s) in out.iter_mut().zip(self.mean).zip(self.std) {
            *v = (*v - mu) / s;
        }
        out
    }

    pub fn invert(&self, v: &MetaVec) -> Metadata {
        let mut raw = *v;
        for ((x, mu), s) in raw.iter_mut().zip(self.mean).zip(self.std) {
            *x = *x * s + mu;
        }
        Metadata::from_array(raw)
    }
}

/// Independent zero-mean Gaussian noise of standard deviation `sigma` on each dimension.
pub fn add_metadata_noise<R: Rng + ?Sized>(m: &MetaVec, sigma: f64, rng: &mut R) -> MetaVec {
    let mut out = *m;
    for v in out.iter_mut() {
        *v += sigma * standard_normal(rng);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    A,
    B,
}

/// Synthetic user: prefers whichever candidate is closer to the target in ℓ2.
/// Exact ties go to `A`.
pub fn oracle_answer(target: &[f64], a: &[f64], b: &[f64]) -> Result<Choice, SynthError> {
    if target.len() != a.len() || target.len() != b.len() {
        return Err(SynthError::DimensionMismatch);
    }
    let da = crate::math::squared_distance(a, target);
    let db = crate::math::squared_distance(b, target);
    Ok(if da <= db { Choice::A } else { Choice::B })
}

/// Dataset item indices forming one triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    /// Whether the triplet ordering holds under the given labels.
    pub fn holds_under(&self, labels: &[MetaVec]) -> bool {
        let a = &labels[self.anchor];
        crate::math::squared_distance(a, &labels[self.positive])
            < crate::math::squared_distance(a, &labels[self.negative])
    }
}

/// Samples `count` triplets among `candidates`, labeling them with `labels`
/// (indexed by item). Anchor and both candidates are distinct; exact ties are
/// redrawn.
pub fn make_triplets<R: Rng + ?Sized>(
    labels: &[MetaVec],
    candidates: &[usize],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>, SynthError> {
    if candidates.len() < 3 {
        return Err(SynthError::TooFewItems { needed: 3, got: candidates.len() });
    }
    let n = candidates.len();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let ia = rng.random_range(0..n);
        let mut ib = rng.random_range(0..n - 1);
        if ib >= ia {
            ib += 1;
        }
        let mut ic = rng.random_range(0..n - 2);
        for taken in [ia.min(ib), ia.max(ib)] {
            if ic >= taken {
                ic += 1;
            }
        }
        let (a, b, c) = (candidates[ia], candidates[ib], candidates[ic]);
        let db = crate::math::squared_distance(&labels[a], &labels[b]);
        let dc = crate::math::squared_distance(&labels[a], &labels[c]);
        if db < dc {
            out.push(Triplet { anchor: a, positive: b, negative: c });
        } else if dc < db {
            out.push(Triplet { anchor: a, positive: c, negative: b });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: u32,
    pub image: Image,
    pub metadata: Metadata,
    /// Generating geometry, when the item came from the stroke renderer.
    pub params: Option<StrokeParams>,
}

/// Items plus the train/test split and the standardizer fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub standardizer: Standardizer,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub size: usize,
    pub test_size: usize,
    pub ranges: StrokeRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { size: 10_000, test_size: 1_000, ranges: StrokeRanges::default() }
    }
}

impl Dataset {
    /// Assembles a dataset from items; the last `test_size` items form the test split.
    pub fn from_items(items: Vec<Item>, test_size: usize) -> Result<Self, SynthError> {
        let train_size = items.len().saturating_sub(test_size);
        if train_size < 3 {
            return Err(SynthError::TooFewItems { needed: test_size + 3, got: items.len() });
        }
        let train: Vec<usize> = (0..train_size).collect();
        let test: Vec<usize> = (train_size..items.len()).collect();
        let train_meta: Vec<Metadata> = train.iter().map(|&i| items[i].metadata).collect();
        let standardizer = Standardizer::fit(&train_meta)?;
        Ok(Dataset { items, standardizer, train, test })
    }

    /// Renders `cfg.size` random strokes and measures their metadata.
    pub fn generate<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Result<Self, SynthError> {
        let mut items = Vec::with_capacity(cfg.size);
        while items.len() < cfg.size {
            let params = StrokeParams::sample(&cfg.ranges, rng);
            let image = render_stroke(&params)?;
            let metadata = measure_metadata(&image)?;
            items.push(Item { id: items.len() as u32, image, metadata, params: Some(params) });
        }
        Dataset::from_items(items, cfg.test_size)
    }

    /// Standardized clean metadata for every item.
    pub fn clean_labels(&self) -> Vec<MetaVec> {
        self.items.iter().map(|it| self.standardizer.apply(&it.metadata)).collect()
    }

    /// Standardized metadata with additive Gaussian noise; standardization happens first.
    pub fn noisy_labels<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Vec<MetaVec> {
        self.clean_labels().iter().map(|m| add_metadata_noise(m, sigma, rng)).collect()
    }
}
