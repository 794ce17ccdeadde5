//! Image and mask persistence, content hashing and frame fitting.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::overlay::{MaskKind, SpatialMask};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the decoded pixel buffer (dimensions included), independent of
/// the container the image was read from.
pub fn pixel_hash(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

/// Center-crops to a square and resamples to `size` x `size`.
pub fn fit_square(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side == size {
        return cropped;
    }
    image::imageops::resize(&cropped, size, size, FilterType::Triangle)
}

pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let v = img.get_pixel(x, y)[0];
        image::Rgb([v, v, v])
    })
}

/// Writes a binary mask as a 1-bit grayscale PNG (set cells white).
pub fn save_mask(path: &Path, mask: &SpatialMask) -> Result<()> {
    let (rows, cols) = mask.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Validation(format!("cannot persist an empty {rows}x{cols} mask")));
    }
    ensure_parent(path)?;
    let stride = cols.div_ceil(8);
    let mut data = vec![0u8; stride * rows];
    for ((y, x), &v) in mask.values.indexed_iter() {
        if v != 0.0 {
            data[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a mask PNG of any bit depth; pixels brighter than mid-gray are set.
pub fn load_mask(path: &Path, kind: MaskKind) -> Result<SpatialMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| Error::io(path, std::io::Error::other(e));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let mut values = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = &bytes[y * info.line_size + x * channels..][..channels];
            let lum = match channels {
                1 | 2 => px[0] as u32,
                _ => (px[0] as u32 + px[1] as u32 + px[2] as u32) / 3,
            };
            let opaque = channels != 2 && channels != 4 || px[channels - 1] > 127;
            if lum > 127 && opaque {
                values[[y, x]] = 1.0;
            }
        }
    }
    SpatialMask::new(values, kind)
}

/// Binary mask from a grayscale image (`> threshold` set).
pub fn mask_from_gray(img: &GrayImage, threshold: u8, kind: MaskKind) -> SpatialMask {
    let values = Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] > threshold {
            1.0
        } else {
            0.0
        }
    });
    SpatialMask { values, kind }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (rows, cols) in [(1, 1), (5, 13), (16, 16), (3, 9)] {
            let values = Array2::from_shape_fn((rows, cols), |(y, x)| ((x * 7 + y * 3) % 5 < 2) as u8 as f64);
            let m = SpatialMask::new(values, MaskKind::HandsStart).unwrap();
            let p = dir.path().join(format!("m{rows}x{cols}.png"));
            save_mask(&p, &m).unwrap();
            let back = load_mask(&p, MaskKind::HandsStart).unwrap();
            assert_eq!(back, m);
            let decoded = image::open(&p).unwrap();
            assert_eq!((decoded.width(), decoded.height()), (cols as u32, rows as u32));
        }
    }

    #[test]
    fn pixel_hash_ignores_container() {
        let img = RgbImage::from_fn(7, 5, |x, y| image::Rgb([x as u8 * 30, y as u8 * 40, 9]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &img).unwrap();
        assert_eq!(pixel_hash(&load_rgb(&p).unwrap()), pixel_hash(&img));
        let other = RgbImage::from_fn(5, 7, |x, y| image::Rgb([y as u8 * 30, x as u8 * 40, 9]));
        assert_ne!(pixel_hash(&other), pixel_hash(&img));
    }

    #[test]
    fn fit_square_crops_center() {
        let img = RgbImage::from_fn(12, 8, |x, _| if (2..10).contains(&x) { image::Rgb([200, 0, 0]) } else { image::Rgb([0, 0, 255]) });
        let out = fit_square(&img, 8);
        assert_eq!(out.dimensions(), (8, 8));
        assert!(out.pixels().all(|p| p.0 == [200, 0, 0]));
        assert_eq!(fit_square(&img, 4).dimensions(), (4, 4));
    }
}
