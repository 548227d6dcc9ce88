//! Layered fronto-parallel synthetic stereo scenes in two visual domains.
//!
//! A scene is a background plane plus rectangular layers at increasing
//! integer disparity. Textures live in LAB and are anchored in left-image
//! coordinates, so a layer seen at right pixel `x` shows its texel at
//! `x + d`. After the right view is rendered from the layers, every left
//! pixel the z-buffer marks visible is copied to its right correspondent;
//! this keeps `I_l(x) = I_r(x - d)` exact wherever the generated occlusion
//! mask says the pixel is visible.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StereoSample;
use crate::color::lab_to_srgb;
use crate::error::{Error, Result};
use crate::recon::{gt_occlusion_from_disparity, DisparityMap};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    /// Independent uniform noise per pixel.
    RandomDot,
    /// Box-blurred noise with a few pixels of correlation length.
    SmoothNoise,
}

/// Per-domain LAB appearance: `lab = mean + std · n` for a unit texture `n`,
/// plus a brightness offset on L.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    pub lab_mean: [f64; 3],
    pub lab_std: [f64; 3],
    pub brightness: f64,
}

impl DomainStyle {
    /// Darker, lower-contrast, near-neutral domain.
    pub const A: DomainStyle = DomainStyle {
        lab_mean: [45.0, 4.0, 8.0],
        lab_std: [10.0, 6.0, 6.0],
        brightness: 0.0,
    };

    /// Brighter by 20 L units, 1.5× the spread, shifted chroma.
    pub const B: DomainStyle = DomainStyle {
        lab_mean: [60.0, -6.0, -10.0],
        lab_std: [15.0, 9.0, 9.0],
        brightness: 5.0,
    };

    fn apply(&self, n: [f64; 3]) -> [f64; 3] {
        [
            self.lab_mean[0] + self.brightness + self.lab_std[0] * n[0],
            self.lab_mean[1] + self.lab_std[1] * n[1],
            self.lab_mean[2] + self.lab_std[2] * n[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Largest disparity any layer may take; must be below `width / 4`.
    pub max_disp: usize,
    pub texture: Texture,
    /// Foreground layers in front of the background.
    pub layers: usize,
    pub style: DomainStyle,
    /// Fixed background disparity; drawn from `[0, max_disp / 3]` when `None`.
    pub background_disp: Option<usize>,
}

impl SyntheticSpec {
    pub fn domain_a(width: usize, height: usize, max_disp: usize) -> Self {
        Self {
            width,
            height,
            max_disp,
            texture: Texture::RandomDot,
            layers: 3,
            style: DomainStyle::A,
            background_disp: None,
        }
    }

    pub fn domain_b(width: usize, height: usize, max_disp: usize) -> Self {
        Self {
            texture: Texture::SmoothNoise,
            style: DomainStyle::B,
            ..Self::domain_a(width, height, max_disp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("synthetic image must be non-empty"));
        }
        if 4 * self.max_disp >= self.width {
            return Err(Error::invalid(format!(
                "max disparity {} must be below width/4 ({})",
                self.max_disp,
                self.width as f64 / 4.0
            )));
        }
        if self.background_disp.is_some_and(|d| d > self.max_disp) {
            return Err(Error::invalid("background disparity exceeds max disparity"));
        }
        let s = &self.style;
        let l = s.lab_mean[0] + s.brightness;
        if !(0.0..=100.0).contains(&l) || s.lab_mean[1].abs() > 60.0 || s.lab_mean[2].abs() > 60.0 {
            return Err(Error::invalid("style mean is out of gamut"));
        }
        if s.lab_std.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("style spreads must be non-negative"));
        }
        Ok(())
    }
}

/// Zero-mean, unit-variance texture field of `h × w` 3-vectors.
fn texture_field(kind: Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let half = 3f64.sqrt();
    let mut f: Vec<[f64; 3]> = (0..h * w)
        .map(|_| std::array::from_fn(|_| rng.random_range(-half..half)))
        .collect();
    if kind == Texture::SmoothNoise {
        for _ in 0..2 {
            f = box_blur(&f, h, w);
        }
        for k in 0..3 {
            let mean = f.iter().map(|p| p[k]).sum::<f64>() / f.len() as f64;
            let var = f.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / f.len() as f64;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
            f.iter_mut().for_each(|p| p[k] = (p[k] - mean) * inv);
        }
    }
    f
}

fn box_blur(f: &[[f64; 3]], h: usize, w: usize) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; f.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let p = f[yy * w + xx];
                    (0..3).for_each(|k| acc[k] += p[k]);
                    n += 1.0;
                }
            }
            out[y * w + x] = acc.map(|v| v / n);
        }
    }
    out
}

struct Layer {
    disp: usize,
    /// Left-image rectangle `[x0, x1) × [y0, y1)`.
    rect: (usize, usize, usize, usize),
    offset: [f64; 3],
    texels: Vec<[f64; 3]>,
}

impl Layer {
    fn covers(&self, x: usize, y: usize) -> bool {
        let (x0, x1, y0, y1) = self.rect;
        (x0..x1).contains(&x) && (y0..y1).contains(&y)
    }
}

/// Renders one sample; identical for identical `(spec, seed)`.
pub fn gen_synthetic_pair(spec: &SyntheticSpec, seed: u64) -> Result<StereoSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let tex_w = w + spec.max_disp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bg_disp = spec
        .background_disp
        .unwrap_or_else(|| rng.random_range(0..=spec.max_disp / 3));
    let mut depths: Vec<usize> = ((bg_disp + 1)..=spec.max_disp).collect();
    let mut fg = Vec::new();
    for _ in 0..spec.layers.min(depths.len()) {
        let i = rng.random_range(0..depths.len());
        fg.push(depths.swap_remove(i));
    }
    fg.sort_unstable();

    let mut layers = vec![Layer {
        disp: bg_disp,
        rect: (0, tex_w, 0, h),
        offset: [0.0; 3],
        texels: texture_field(spec.texture, h, tex_w, &mut rng),
    }];
    for d in fg {
        let lw = rng.random_range((w / 6).max(1)..=(w / 2).max(1));
        let lh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let offset = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
        layers.push(Layer {
            disp: d,
            rect: (x0, (x0 + lw).min(tex_w), y0, (y0 + lh).min(h)),
            offset,
            texels: texture_field(spec.texture, h, tex_w, &mut rng),
        });
    }

    // layers are sorted near-last, so the last covering layer is on top
    let texel = |l: &Layer, x: usize, y: usize| {
        let t = l.texels[y * tex_w + x];
        std::array::from_fn(|k| t[k] + l.offset[k])
    };
    let mut left = vec![[0.0; 3]; w * h];
    let mut right = vec![[0.0; 3]; w * h];
    let mut disp = Tensor4::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let l = layers.iter().rev().find(|l| l.covers(x, y)).expect("background covers");
            left[y * w + x] = texel(l, x, y);
            disp.set([0, 0, y, x], l.disp as f64);
            let r = layers
                .iter()
                .rev()
                .find(|l| l.covers(x + l.disp, y))
                .expect("background covers");
            right[y * w + x] = texel(r, x + r.disp, y);
        }
    }

    let disparity = DisparityMap::new(disp)?;
    let occlusion = gt_occlusion_from_disparity(&disparity);
    for y in 0..h {
        for x in 0..w {
            if occlusion.tensor().at([0, 0, y, x]) == 0.0 {
                let d = disparity.tensor().at([0, 0, y, x]) as usize;
                right[y * w + x - d] = left[y * w + x];
            }
        }
    }

    let to_rgb = |field: &[[f64; 3]]| {
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let lab = spec.style.apply(field[y as usize * w + x as usize]);
            image::Rgb(lab_to_srgb(lab).map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    };
    Ok(StereoSample {
        left: to_rgb(&left),
        right: to_rgb(&right),
        valid: Tensor4::ones([1, 1, h, w]),
        disparity,
        occlusion: Some(occlusion),
    })
}
