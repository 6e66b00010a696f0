//! Image files: loading with center-crop + resize, lossless PNG output and
//! montage grids.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::model::ImageTensor;

/// Loads an image file, crops the central square, resizes to `size` and
/// scales to [0, 1] RGB.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path)?;
    Ok(preprocess(&img, size))
}

/// Reads an image file as-is (no crop or resize).
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

pub fn preprocess(img: &DynamicImage, size: usize) -> ImageTensor {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(size as u32, size as u32, FilterType::Triangle);
    from_rgb8(&resized.to_rgb8())
}

pub fn from_rgb8(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = ImageTensor::filled(3, h, w, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    out
}

/// Quantizes to 8-bit RGB. Single-channel images are replicated to gray.
pub fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    let channels = img.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("cannot render {channels}-channel image")));
    }
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let src = if channels == 1 { 0 } else { c };
            let v = img.get(src, y as usize, x as usize).clamp(0.0, 1.0);
            px[c] = (v * 255.0).round() as u8;
        }
    }
    Ok(out)
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Lays out `rows` of equally shaped images with a `pad`-pixel white gutter.
pub fn montage(rows: &[Vec<ImageTensor>], pad: usize) -> Result<ImageTensor> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("montage needs at least one image"))?;
    let [c, h, w] = first.shape();
    if rows.iter().flatten().any(|i| i.shape() != [c, h, w]) {
        return Err(Error::invalid("montage images must share a shape"));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let height = rows.len() * h + (rows.len() + 1) * pad;
    let width = cols * w + (cols + 1) * pad;
    let mut out = ImageTensor::filled(c, height, width, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            let oy = pad + r * (h + pad);
            let ox = pad + col * (w + pad);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(ch, oy + y, ox + x, img.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageTensor::filled(3, 4, 6, 0.0);
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 256) as f32 / 255.0;
        }
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn center_crop_then_resize() {
        // 6x4 image whose left and right columns are red; the central 4x4 is blue
        let mut rgb = RgbImage::new(6, 4);
        for (x, _, px) in rgb.enumerate_pixels_mut() {
            *px = if x == 0 || x == 5 { image::Rgb([255, 0, 0]) } else { image::Rgb([0, 0, 255]) };
        }
        let out = preprocess(&DynamicImage::ImageRgb8(rgb), 2);
        assert_eq!(out.shape(), [3, 2, 2]);
        assert!(out.region_mean(0, 2, 0, 2) > 0.0);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(0, y, x), 0.0);
                assert_eq!(out.get(2, y, x), 1.0);
            }
        }
    }

    #[test]
    fn montage_layout() {
        let a = ImageTensor::filled(3, 2, 2, 0.0);
        let b = ImageTensor::filled(3, 2, 2, 0.5);
        let m = montage(&[vec![a.clone(), b.clone()], vec![b, a]], 1).unwrap();
        assert_eq!(m.shape(), [3, 7, 7]);
        assert_eq!(m.get(0, 1, 1), 0.0);
        assert_eq!(m.get(0, 1, 4), 0.5);
        assert_eq!(m.get(0, 0, 0), 1.0);
        assert!(montage(&[], 1).is_err());
    }
}
