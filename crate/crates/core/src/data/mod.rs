//! Stereo samples, on-disk datasets, synthetic scenes, and metrics.
//!
//! A dataset directory holds `left/`, `right/`, `disp/` and optionally
//! `occ/`, with files matched by stem. Images are PNG or PPM, disparities
//! PFM or 16-bit PNG, occlusion masks 8-bit PNG.

pub mod io;
pub mod metrics;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::recon::{gt_occlusion_from_disparity, DisparityMap, OcclusionMask};
use crate::tensor::Tensor4;

pub use io::DisparityFile;
pub use metrics::{aggregate, d1_error, D1Threshold, MetricReport};
pub use synth::{gen_synthetic_pair, DomainStyle, SyntheticSpec, Texture};

/// One rectified stereo pair with left-view ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: RgbImage,
    pub right: RgbImage,
    pub disparity: DisparityMap,
    pub valid: Tensor4,
    pub occlusion: Option<OcclusionMask>,
}

impl StereoSample {
    pub fn width(&self) -> usize {
        self.left.width() as usize
    }

    pub fn height(&self) -> usize {
        self.left.height() as usize
    }

    /// Stored occlusion mask, or the z-buffer mask of the ground truth.
    pub fn occlusion_or_derived(&self) -> OcclusionMask {
        self.occlusion
            .clone()
            .unwrap_or_else(|| gt_occlusion_from_disparity(&self.disparity))
    }

    /// Same window of every view and map.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<StereoSample> {
        if x0 + w > self.width() || y0 + h > self.height() || w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width(),
                self.height()
            )));
        }
        let img = |i: &RgbImage| image::imageops::crop_imm(i, x0 as u32, y0 as u32, w as u32, h as u32).to_image();
        let map = |t: &Tensor4| Tensor4::from_fn([1, 1, h, w], |[_, _, y, x]| t.at([0, 0, y0 + y, x0 + x]));
        Ok(StereoSample {
            left: img(&self.left),
            right: img(&self.right),
            disparity: DisparityMap::new(map(self.disparity.tensor()))?,
            valid: map(&self.valid),
            occlusion: self
                .occlusion
                .as_ref()
                .map(|o| OcclusionMask::new(map(o.tensor())))
                .transpose()?,
        })
    }
}

/// `(1, 3, h, w)` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor4 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| raw[(y * w + x) * 3 + c] as f64 / 255.0)
}

fn list_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn find_stem(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Loads every sample of a dataset directory, sorted by file stem.
pub fn load_dataset(root: &Path) -> Result<Vec<StereoSample>> {
    let left_dir = root.join("left");
    let (right_dir, disp_dir, occ_dir) = (root.join("right"), root.join("disp"), root.join("occ"));
    let mut samples = Vec::new();
    for (stem, left_path) in list_stems(&left_dir)? {
        let right_path = find_stem(&right_dir, &stem, &["png", "ppm"])
            .ok_or_else(|| Error::format(&right_dir, format!("no right image for {stem}")))?;
        let disp_path = find_stem(&disp_dir, &stem, &["pfm", "png"])
            .ok_or_else(|| Error::format(&disp_dir, format!("no disparity for {stem}")))?;
        let left = io::read_rgb(&left_path)?;
        let right = io::read_rgb(&right_path)?;
        let DisparityFile { disparity, valid } = io::read_disparity(&disp_path)?;
        let dims = [left.dimensions(), right.dimensions()];
        let [_, _, h, w] = disparity.tensor().shape();
        if dims.iter().any(|&(x, y)| (x as usize, y as usize) != (w, h)) {
            return Err(Error::format(&left_path, format!("size mismatch across views of {stem}")));
        }
        let occlusion = match find_stem(&occ_dir, &stem, &["png"]) {
            Some(p) => Some(OcclusionMask::new(io::read_mask_png(&p)?)?),
            None => None,
        };
        samples.push(StereoSample {
            left,
            right,
            disparity,
            valid,
            occlusion,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("no samples under {}", left_dir.display())));
    }
    Ok(samples)
}

/// Writes `left/NAME.png`, `right/NAME.png`, `disp/NAME.pfm` and, when
/// present, `occ/NAME.png`.
pub fn write_sample(root: &Path, name: &str, s: &StereoSample) -> Result<()> {
    for sub in ["left", "right", "disp", "occ"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    io::write_rgb(&root.join("left").join(format!("{name}.png")), &s.left)?;
    io::write_rgb(&root.join("right").join(format!("{name}.png")), &s.right)?;
    let masked = s.disparity.tensor().zip_map(&s.valid, |d, m| if m > 0.0 { d } else { f64::INFINITY });
    io::write_pfm(&root.join("disp").join(format!("{name}.pfm")), &masked)?;
    if let Some(o) = &s.occlusion {
        io::write_mask_png(&root.join("occ").join(format!("{name}.png")), o.tensor())?;
    }
    Ok(())
}
