//! Disparity and image file formats.
//!
//! * PFM: `Pf` header, `w h`, scale line whose sign gives endianness
//!   (negative = little-endian), f32 rows stored bottom-up.
//! * 16-bit PNG disparity: `round(d · 256)`, 0 marks an invalid pixel.
//! * RGB images: binary PPM (P6) or 8-bit PNG, chosen by extension.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::recon::DisparityMap;
use crate::tensor::Tensor4;

/// A disparity map as stored on disk, with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityFile {
    pub disparity: DisparityMap,
    /// 1 where the stored value is a usable disparity.
    pub valid: Tensor4,
}

impl DisparityFile {
    pub fn dense(disparity: DisparityMap) -> Self {
        let valid = Tensor4::ones(disparity.tensor().shape());
        Self { disparity, valid }
    }
}

fn single_plane(map: &Tensor4, what: &str) -> Result<(usize, usize)> {
    let [n, c, h, w] = map.shape();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!("{what} expects a (1, 1, h, w) map, got {:?}", map.shape())));
    }
    Ok((h, w))
}

/// Writes a little-endian grayscale PFM.
pub fn write_pfm(path: &Path, map: &Tensor4) -> Result<()> {
    let (h, w) = single_plane(map, "write_pfm")?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for &v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Raw PFM payload as stored, without validity interpretation.
pub fn read_pfm_raw(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // exactly one whitespace byte ends each header field
        Ok(t)
    };
    match token()?.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "three-channel PFM (PF) is not supported; expected grayscale Pf")),
        other => return Err(Error::format(path, format!("not a PFM file (header {other:?})"))),
    }
    let parse_dim = |t: String| {
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(path, format!("bad dimension {t:?}")))
    };
    let w = parse_dim(token()?)?;
    let h = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, format!("bad scale {scale_tok:?}")))?;
    let little = scale < 0.0;

    let payload = &bytes[pos.min(bytes.len())..];
    let need = 4 * w * h;
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let mut data = vec![0.0; w * h];
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v as f64;
    }
    Tensor4::from_vec([1, 1, h, w], data)
}

/// Reads a PFM disparity map. Non-finite or negative entries are marked
/// invalid and stored as 0.
pub fn read_pfm(path: &Path) -> Result<DisparityFile> {
    let raw = read_pfm_raw(path)?;
    let valid = raw.map(|v| if v.is_finite() && v >= 0.0 { 1.0 } else { 0.0 });
    let disp = raw.zip_map(&valid, |v, m| if m > 0.0 { v } else { 0.0 });
    Ok(DisparityFile {
        disparity: DisparityMap::new(disp)?,
        valid,
    })
}

/// Writes a 16-bit PNG with `round(d · 256)`; pixels with `valid == 0` are
/// written as 0.
pub fn write_disp_png16(path: &Path, map: &Tensor4, valid: Option<&Tensor4>) -> Result<()> {
    let (h, w) = single_plane(map, "write_disp_png16")?;
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let ok = valid.is_none_or(|m| m.data()[i] > 0.0);
        let v = map.data()[i];
        if ok && !(0.0..=(u16::MAX as f64 / 256.0)).contains(&v) {
            return Err(Error::invalid(format!("disparity {v} does not fit a 16-bit PNG")));
        }
        px.0[0] = if ok { (v * 256.0).round() as u16 } else { 0 };
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_disp_png16(path: &Path) -> Result<DisparityFile> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(path, "disparity PNG must be 16-bit single-channel"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw: Vec<u16> = buf.into_raw();
    let disp = raw.iter().map(|&v| v as f64 / 256.0).collect();
    let valid = raw.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    Ok(DisparityFile {
        disparity: DisparityMap::new(Tensor4::from_vec([1, 1, h, w], disp)?)?,
        valid: Tensor4::from_vec([1, 1, h, w], valid)?,
    })
}

/// Reads either disparity format, by extension (`.pfm` or `.png`).
pub fn read_disparity(path: &Path) -> Result<DisparityFile> {
    match extension(path).as_deref() {
        Some("pfm") => read_pfm(path),
        Some("png") => read_disp_png16(path),
        _ => Err(Error::format(path, "unknown disparity format (want .pfm or .png)")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb8())
}

/// Saves as PPM (P6) for `.ppm`, otherwise by the extension's format.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    if extension(path).as_deref() == Some("ppm") {
        let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        out.extend_from_slice(img.as_raw());
        return fs::write(path, out).map_err(|e| Error::io(path, e));
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Binary mask as an 8-bit PNG (0 or 255).
pub fn write_mask_png(path: &Path, mask: &Tensor4) -> Result<()> {
    let (h, w) = single_plane(mask, "write_mask_png")?;
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor4::from_vec([1, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn([1, 1, h, w], |_| rng.random_range(0.0f32..64.0) as f64)
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let m = random_map(7, 11, 1);
        write_pfm(&p, &m).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.disparity.tensor(), &m);
        assert!(back.valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pfm_big_endian_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        // two rows stored bottom-up: file row 0 is image row 1
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_pfm(&p).unwrap().disparity.tensor().data(), &[1.0, 2.0, 3.0, 4.0]);

        let le = dir.path().join("le.pfm");
        let m = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_pfm(&le, &m).unwrap();
        let raw = fs::read(&le).unwrap();
        assert!(raw.starts_with(b"Pf\n2 2\n-1.0\n"));
        assert_eq!(&raw[raw.len() - 16..raw.len() - 12], &3.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let color = dir.path().join("c.pfm");
        fs::write(&color, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        let err = read_pfm(&color).unwrap_err().to_string();
        assert!(err.contains("PF"), "{err}");

        let short = dir.path().join("s.pfm");
        fs::write(&short, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&short).unwrap_err().to_string().contains("truncated"));

        let junk = dir.path().join("j.pfm");
        fs::write(&junk, b"P6\n").unwrap();
        assert!(read_pfm(&junk).is_err());
    }

    #[test]
    fn pfm_infinite_entries_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inf.pfm");
        let m = Tensor4::from_vec([1, 1, 1, 3], vec![1.5, f64::INFINITY, 2.0]).unwrap();
        write_pfm(&p, &m).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.valid.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(back.disparity.tensor().data(), &[1.5, 0.0, 2.0]);
    }

    #[test]
    fn png16_encoding_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let m = Tensor4::from_vec([1, 1, 1, 3], vec![1.0, 0.0, 2.5]).unwrap();
        write_disp_png16(&p, &m, None).unwrap();
        let raw = image::open(&p).unwrap().into_luma16();
        assert_eq!(raw.as_raw(), &[256, 0, 640]);
        let back = read_disp_png16(&p).unwrap();
        assert_eq!(back.valid.data(), &[1.0, 0.0, 1.0]);

        let m = random_map(9, 13, 2);
        write_disp_png16(&p, &m, None).unwrap();
        let back = read_disp_png16(&p).unwrap();
        assert!(back.disparity.tensor().max_abs_diff(&m) <= 1.0 / 512.0);
    }

    #[test]
    fn png16_rejects_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask_png(&p, &Tensor4::ones([1, 1, 2, 2])).unwrap();
        assert!(read_disp_png16(&p).is_err());
        assert_eq!(read_mask_png(&p).unwrap(), Tensor4::ones([1, 1, 2, 2]));
    }

    #[test]
    fn rgb_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RgbImage::from_fn(5, 4, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            write_rgb(&p, &img).unwrap();
            assert_eq!(read_rgb(&p).unwrap(), img);
        }
        let raw = fs::read(dir.path().join("a.ppm")).unwrap();
        assert!(raw.starts_with(b"P6\n5 4\n255\n"));
    }
}
