//! sRGB ↔ CIELAB conversion and progressive LAB color transfer.
//!
//! Source images are restyled with a per-channel affine map in LAB,
//! `out = (in - μ_s) · σ_t/σ_s + μ_t`, where the target statistics
//! `(μ_t, σ_t)` are an exponential moving average over target-domain
//! images seen so far ([`ProgressiveState`]). Both views of a stereo pair
//! share one map, so corresponding pixels stay photometrically consistent.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// D65 reference white, taken as the image of sRGB white under
/// [`RGB_TO_XYZ`] so that neutral colors land on a = b = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn xyz_to_rgb() -> [[f64; 3]; 3] {
    let m = RGB_TO_XYZ;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// CIELAB (D65) value of an sRGB color with channels in `[0, 1]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let wp = white();
    let mut xyz = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[k] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / wp[k];
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB value in `[0, 1]` (unclipped) of a CIELAB color.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let wp = white();
    let xyz = [lab_f_inv(f[0]) * wp[0], lab_f_inv(f[1]) * wp[1], lab_f_inv(f[2]) * wp[2]];
    let m = xyz_to_rgb();
    let mut rgb = [0.0; 3];
    for (k, row) in m.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        rgb[k] = linear_to_srgb(lin.max(0.0));
    }
    rgb
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Image in CIELAB, pixels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "LAB image {width}x{height} needs {} pixels, got {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }
}

pub fn rgb_to_lab(image: &RgbImage) -> LabImage {
    let pixels = image
        .pixels()
        .map(|p| srgb_to_lab(p.0.map(|c| c as f64 / 255.0)))
        .collect();
    LabImage {
        width: image.width(),
        height: image.height(),
        pixels,
    }
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut channels are clipped to `[0, 255]`.
pub fn lab_to_rgb(image: &LabImage) -> RgbImage {
    let mut out = RgbImage::new(image.width, image.height);
    for (dst, lab) in out.pixels_mut().zip(&image.pixels) {
        dst.0 = lab_to_srgb(*lab).map(quantize);
    }
    out
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl ColorStats {
    /// Statistics over the union of all pixels in `parts`.
    pub fn of_pixels(parts: &[&[[f64; 3]]]) -> Result<Self> {
        let count: usize = parts.iter().map(|p| p.len()).sum();
        if count == 0 {
            return Err(Error::Empty("channel statistics of an empty image".into()));
        }
        let n = count as f64;
        let mut mu = [0.0; 3];
        for px in parts.iter().flat_map(|p| p.iter()) {
            for k in 0..3 {
                mu[k] += px[k];
            }
        }
        mu = mu.map(|s| s / n);
        let mut var = [0.0; 3];
        for px in parts.iter().flat_map(|p| p.iter()) {
            for k in 0..3 {
                let d = px[k] - mu[k];
                var[k] += d * d;
            }
        }
        Ok(Self {
            mu,
            sigma: var.map(|v| (v / n).sqrt()),
        })
    }
}

pub fn channel_stats(image: &LabImage) -> Result<ColorStats> {
    ColorStats::of_pixels(&[&image.pixels])
}

/// Momentum-averaged target-domain LAB statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressiveState {
    pub mu_t: [f64; 3],
    pub sigma_t: [f64; 3],
    pub gamma: f64,
    pub update_count: u64,
}

impl ProgressiveState {
    /// Zero-initialized state, as the progressive algorithm starts.
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("momentum gamma {gamma} outside [0, 1]")));
        }
        Ok(Self {
            mu_t: [0.0; 3],
            sigma_t: [0.0; 3],
            gamma,
            update_count: 0,
        })
    }

    /// State seeded directly with `stats`, counted as one update.
    pub fn warm_started(gamma: f64, stats: &ColorStats) -> Result<Self> {
        let mut s = Self::new(gamma)?;
        s.mu_t = stats.mu;
        s.sigma_t = stats.sigma;
        s.update_count = 1;
        Ok(s)
    }

    /// `μ_t ← (1-γ)·μ_t + γ·μ_i`, and likewise for σ.
    pub fn update(&mut self, stats: &ColorStats) {
        let g = self.gamma;
        for k in 0..3 {
            self.mu_t[k] = (1.0 - g) * self.mu_t[k] + g * stats.mu[k];
            self.sigma_t[k] = (1.0 - g) * self.sigma_t[k] + g * stats.sigma[k];
        }
        self.update_count += 1;
    }

    pub fn updated(mut self, stats: &ColorStats) -> Self {
        self.update(stats);
        self
    }
}

fn affine_coeffs(source: &ColorStats, state: &ProgressiveState) -> Result<[(f64, f64, f64); 3]> {
    if state.update_count == 0 {
        return Err(Error::State(
            "color transfer needs target statistics (state has no updates yet)".into(),
        ));
    }
    Ok(std::array::from_fn(|k| {
        // constant source channel: shift only
        let lambda = if source.sigma[k] > 0.0 {
            state.sigma_t[k] / source.sigma[k]
        } else {
            1.0
        };
        (source.mu[k], lambda, state.mu_t[k])
    }))
}

/// Per-channel affine restyle `(in - μ_s)·λ + μ_t` with `λ = σ_t / σ_s`.
pub fn transfer(source: &LabImage, source_stats: &ColorStats, state: &ProgressiveState) -> Result<LabImage> {
    let coeffs = affine_coeffs(source_stats, state)?;
    let pixels = source
        .pixels
        .iter()
        .map(|px| std::array::from_fn(|k| (px[k] - coeffs[k].0) * coeffs[k].1 + coeffs[k].2))
        .collect();
    Ok(LabImage {
        width: source.width,
        height: source.height,
        pixels,
    })
}

/// Where the source statistics of a stereo pair come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairStats {
    Left,
    #[default]
    Union,
}

/// LAB and quantized RGB views of a transferred stereo pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferredPair {
    pub left_lab: LabImage,
    pub right_lab: LabImage,
    pub left: RgbImage,
    pub right: RgbImage,
}

/// Restyles both views of a pair with one shared affine map.
pub fn transfer_pair(
    left: &RgbImage,
    right: &RgbImage,
    stats_from: PairStats,
    state: &ProgressiveState,
) -> Result<TransferredPair> {
    let l = rgb_to_lab(left);
    let r = rgb_to_lab(right);
    let stats = match stats_from {
        PairStats::Left => channel_stats(&l)?,
        PairStats::Union => ColorStats::of_pixels(&[&l.pixels, &r.pixels])?,
    };
    let left_lab = transfer(&l, &stats, state)?;
    let right_lab = transfer(&r, &stats, state)?;
    Ok(TransferredPair {
        left: lab_to_rgb(&left_lab),
        right: lab_to_rgb(&right_lab),
        left_lab,
        right_lab,
    })
}

/// LAB statistics over the union of both views of a pair.
pub fn pair_stats(left: &RgbImage, right: &RgbImage) -> Result<ColorStats> {
    let l = rgb_to_lab(left);
    let r = rgb_to_lab(right);
    ColorStats::of_pixels(&[&l.pixels, &r.pixels])
}

/// One stereo pair of 8-bit images.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPair {
    pub left: RgbImage,
    pub right: RgbImage,
}

/// Drives one epoch of progressive color transfer: both datasets are
/// shuffled, and for each source pair the state absorbs the statistics of
/// the next target pair before the source pair is restyled. Target indices
/// wrap around when the target set is shorter.
pub struct EpochDriver<'a> {
    source: &'a [RgbPair],
    target: &'a [RgbPair],
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    state: &'a mut ProgressiveState,
    next: usize,
}

impl<'a> EpochDriver<'a> {
    pub fn new(
        source: &'a [RgbPair],
        target: &'a [RgbPair],
        state: &'a mut ProgressiveState,
        seed: u64,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("color transfer epoch needs non-empty source and target sets".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source_order: Vec<usize> = (0..source.len()).collect();
        let mut target_order: Vec<usize> = (0..target.len()).collect();
        source_order.shuffle(&mut rng);
        target_order.shuffle(&mut rng);
        Ok(Self {
            source,
            target,
            source_order,
            target_order,
            state,
            next: 0,
        })
    }

    /// `(source index, target index)` for every iteration of the epoch.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        (0..self.source.len())
            .map(|i| (self.source_order[i], self.target_order[i % self.target.len()]))
            .collect()
    }
}

impl Iterator for EpochDriver<'_> {
    type Item = Result<(usize, TransferredPair)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.source.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let si = self.source_order[i];
        let ti = self.target_order[i % self.target.len()];
        let t = &self.target[ti];
        let result = pair_stats(&t.left, &t.right).and_then(|stats| {
            self.state.update(&stats);
            let s = &self.source[si];
            transfer_pair(&s.left, &s.right, PairStats::Union, self.state)
        });
        Some(result.map(|p| (si, p)))
    }
}
