//! Synthetic signer videos and style images painted in the classical
//! perception colours, for smoke runs and tests.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::imaging::save_png;
use crate::perception::ClassicalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    /// Both hands rise from the waist to the face; start and end masks are disjoint.
    Raise,
    /// Both hands shift sideways by a few pixels; start and end masks intersect.
    Shift,
}

fn rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
    for y in y0.max(0)..(y0 + h).min(img.height() as i64) {
        for x in x0.max(0)..(x0 + w).min(img.width() as i64) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Frame `i` of `n` with the stroke between `n/4` and `3n/4`.
pub fn signer_frame(size: u32, i: usize, n: usize, motion: Motion) -> RgbImage {
    let c = ClassicalConfig::default();
    let s = size as f64 / 64.0;
    let (lo, hi) = (n / 4, (3 * n) / 4);
    let a = if i <= lo {
        0.0
    } else if i >= hi {
        1.0
    } else {
        (i - lo) as f64 / (hi - lo) as f64
    };
    let mut img = RgbImage::from_pixel(size, size, Rgb([245, 245, 240]));
    rect(&mut img, (24.0 * s) as i64, (2.0 * s) as i64, (16.0 * s) as i64, (14.0 * s) as i64, [200, 200, 210]);
    let hand = (8.0 * s) as i64;
    let arm = (10.0 * s) as i64;
    for (base_x, marker) in [(8.0, c.marker_right), (46.0, c.marker_left)] {
        let (x, y) = match motion {
            Motion::Raise => (base_x, 44.0 - 32.0 * a),
            Motion::Shift => (base_x + if base_x < 32.0 { 6.0 } else { -6.0 } * a, 30.0),
        };
        let (x, y) = ((x * s) as i64, (y * s) as i64);
        rect(&mut img, x, y + hand, hand, arm, c.sleeve);
        rect(&mut img, x, y, hand, hand, c.skin);
        rect(&mut img, x + hand / 2 - 1, y, (2.0 * s).max(2.0) as i64, (2.0 * s).max(2.0) as i64, marker);
    }
    img
}

pub fn write_signer_video(dir: &Path, size: u32, frames: usize, motion: Motion) -> Result<()> {
    for i in 0..frames {
        save_png(&dir.join(format!("frame_{i:04}.png")), &signer_frame(size, i, frames, motion))?;
    }
    Ok(())
}

/// Hatched ink-on-paper texture.
pub fn style_image(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let v = ((x as f64 * 0.7 + y as f64 * 0.3).sin() * 0.5 + 0.5) * ((y as f64 * 0.45).cos() * 0.3 + 0.7);
        let ink = (60.0 + 180.0 * v) as u8;
        Rgb([ink, ink.saturating_sub(10), ink.saturating_sub(30)])
    })
}
