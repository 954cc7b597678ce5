use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{GrayImage, RgbImage};

use diffmae::numerics::Tensor;

/// `[0, 255]` to `[-1, 1]`.
pub fn to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// `[-1, 1]` to `[0, 255]`, rounding half to even.
pub fn to_byte(v: f32) -> u8 {
    (((v as f64).clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// Read a PNG as an `[H, W, channels]` tensor; `channels` is 1 or 3.
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(to_unit).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(to_unit).collect(),
        c => bail!("unsupported channel count {c}"),
    };
    Ok(Tensor::new(vec![h, w, channels], data)?)
}

pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        bail!("expected an [H, W, C] image, got {s:?}");
    }
    let (h, w, c) = (s[0] as u32, s[1] as u32, s[2]);
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    let res = match c {
        1 => GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        _ => bail!("cannot write {c}-channel PNG"),
    };
    res.context("buffer size mismatch")?.with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Every `*.png` in `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_lossless() {
        for p in 0..=255u8 {
            assert_eq!(to_byte(to_unit(p)), p);
        }
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(2.0), 255);
        // 0.0 maps to 127.5, which rounds to the even neighbour
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn png_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let data: Vec<f32> = (0..6 * 5 * c).map(|i| to_unit((i * 37 % 256) as u8)).collect();
            let img = Tensor::new(vec![6, 5, c], data).unwrap();
            let path = dir.path().join(format!("c{c}.png"));
            save_png(&path, &img).unwrap();
            let back = load_png(&path, c).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert_eq!(back.data(), img.data());
        }
        assert_eq!(list_pngs(dir.path()).unwrap().len(), 2);
    }
}
