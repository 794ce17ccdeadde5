//! Built-in perception used when no model adapter is available. Hands, arms
//! and fingertips are found by colour keys, so synthetic test videos paint
//! them in the configured colours.

use std::collections::VecDeque;

use image::{GrayImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::keypoints::{Detection, Hand};
use crate::overlay::{MaskKind, SpatialMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalConfig {
    pub skin: [u8; 3],
    pub sleeve: [u8; 3],
    pub marker_left: [u8; 3],
    pub marker_right: [u8; 3],
    /// Per-channel colour-key tolerance.
    pub tolerance: u8,
    pub min_component_px: usize,
    /// Marker pixel count giving full confidence.
    pub marker_min_px: usize,
    /// Gradient magnitudes below this stay white.
    pub edge_threshold: f64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        ClassicalConfig {
            skin: [224, 172, 138],
            sleeve: [40, 70, 160],
            marker_left: [0, 200, 0],
            marker_right: [200, 0, 200],
            tolerance: 40,
            min_component_px: 4,
            marker_min_px: 4,
            edge_threshold: 32.0,
        }
    }
}

fn keyed(px: [u8; 3], key: [u8; 3], tol: u8) -> bool {
    px.iter().zip(key).all(|(&a, b)| a.abs_diff(b) <= tol)
}

fn luma(img: &RgbImage) -> Array2<f64> {
    Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        let [r, g, b] = img.get_pixel(x as u32, y as u32).0;
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    })
}

/// Sobel gradient magnitude mapped to dark lines on white.
pub fn gradient_edges(img: &RgbImage, cfg: &ClassicalConfig) -> GrayImage {
    let l = luma(img);
    let (h, w) = l.dim();
    let at = |y: isize, x: isize| l[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y, x - 1) - at(y + 1, x - 1);
        let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1);
        let mag = (gx * gx + gy * gy).sqrt();
        if mag < cfg.edge_threshold {
            image::Luma([255])
        } else {
            image::Luma([(255.0 - mag.min(255.0)).round() as u8])
        }
    })
}

/// Stroke frames from frame-difference energy: the first and last transitions
/// whose energy reaches a quarter of the peak.
pub fn motion_segment(frames: &[RgbImage]) -> Option<(usize, usize)> {
    let energy: Vec<f64> = frames
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].as_raw(), w[1].as_raw());
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            a.iter().zip(b).map(|(&p, &q)| p.abs_diff(q) as f64).sum::<f64>() / a.len().max(1) as f64
        })
        .collect();
    let peak = energy.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) || !peak.is_finite() {
        return None;
    }
    let active: Vec<usize> = energy.iter().enumerate().filter(|(_, &e)| e >= 0.25 * peak).map(|(i, _)| i).collect();
    Some((*active.first()?, active.last()? + 1))
}

/// 4-connected components of `on`, largest first.
fn components(on: &Array2<bool>, min_px: usize) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = on.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for start in on.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p) {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some((y, x)) = queue.pop_front() {
            comp.push((y, x));
            let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for (ny, nx) in nbrs {
                if ny < h && nx < w && on[[ny, nx]] && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
        if comp.len() >= min_px {
            out.push(comp);
        }
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// Colour-keyed hand masks. A component holding a fingertip marker takes
/// that hand; otherwise the component further right in the image is the
/// signer's left hand.
pub fn keyed_hands(img: &RgbImage, prompt: &str, cfg: &ClassicalConfig) -> Vec<SpatialMask> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = |y: usize, x: usize| img.get_pixel(x as u32, y as u32).0;
    let on = Array2::from_shape_fn((h, w), |(y, x)| {
        let p = px(y, x);
        keyed(p, cfg.skin, cfg.tolerance) || keyed(p, cfg.marker_left, cfg.tolerance) || keyed(p, cfg.marker_right, cfg.tolerance)
    });
    let mut comps = components(&on, cfg.min_component_px);
    comps.truncate(2);
    let centroid_x = |c: &Vec<(usize, usize)>| c.iter().map(|p| p.1 as f64).sum::<f64>() / c.len() as f64;
    let marker_of = |c: &Vec<(usize, usize)>| {
        if c.iter().any(|&(y, x)| keyed(px(y, x), cfg.marker_left, cfg.tolerance)) {
            Some(Hand::Left)
        } else if c.iter().any(|&(y, x)| keyed(px(y, x), cfg.marker_right, cfg.tolerance)) {
            Some(Hand::Right)
        } else {
            None
        }
    };
    let mut labelled: Vec<(Hand, &Vec<(usize, usize)>)> = Vec::new();
    match comps.as_slice() {
        [] => {}
        [c] => {
            let hand = marker_of(c).unwrap_or(if centroid_x(c) >= w as f64 / 2.0 { Hand::Left } else { Hand::Right });
            labelled.push((hand, c));
        }
        [a, b, ..] => {
            let a_left = match (marker_of(a), marker_of(b)) {
                (Some(ha), _) => ha == Hand::Left,
                (None, Some(hb)) => hb == Hand::Right,
                (None, None) => centroid_x(a) >= centroid_x(b),
            };
            labelled.push((if a_left { Hand::Left } else { Hand::Right }, a));
            labelled.push((if a_left { Hand::Right } else { Hand::Left }, b));
        }
    }
    labelled.sort_by_key(|(hand, _)| *hand);
    let p = prompt.to_ascii_lowercase();
    let want = |hand: Hand| match (p.contains("left"), p.contains("right")) {
        (true, false) => hand == Hand::Left,
        (false, true) => hand == Hand::Right,
        _ => true,
    };
    labelled
        .into_iter()
        .filter(|(hand, _)| want(*hand))
        .map(|(_, c)| {
            let mut values = Array2::zeros((h, w));
            for &p in c {
                values[p] = 1.0;
            }
            SpatialMask { values, kind: MaskKind::HandsStart }
        })
        .collect()
}

/// Union of sleeve-coloured pixels.
pub fn keyed_arms(img: &RgbImage, cfg: &ClassicalConfig) -> SpatialMask {
    let values = Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        keyed(img.get_pixel(x as u32, y as u32).0, cfg.sleeve, cfg.tolerance) as u8 as f64
    });
    SpatialMask { values, kind: MaskKind::ArmsStart }
}

/// Fingertip markers as labelled detections at the marker centroid.
pub fn markers(img: &RgbImage, cfg: &ClassicalConfig) -> Vec<Detection> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut out = Vec::new();
    for (hand, key) in [(Hand::Left, cfg.marker_left), (Hand::Right, cfg.marker_right)] {
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            if keyed(p.0, key, cfg.tolerance) {
                n += 1;
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
            }
        }
        if n > 0 {
            out.push(Detection {
                hand: Some(hand),
                x: sx / n as f64 / w,
                y: sy / n as f64 / h,
                confidence: (n as f64 / cfg.marker_min_px.max(1) as f64).min(1.0),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]))
    }

    fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, image::Rgb(c));
            }
        }
    }

    #[test]
    fn square_edges_hug_boundary() {
        let mut img = white(40, 40);
        fill(&mut img, 10, 12, 26, 30, [0, 0, 0]);
        let e = gradient_edges(&img, &ClassicalConfig::default());
        let dist_to_boundary = |x: i32, y: i32| {
            let inside = (10..26).contains(&x) && (12..30).contains(&y);
            let dx = if inside { (x - 10).min(25 - x) } else { (10 - x).max(x - 25).max(0) };
            let dy = if inside { (y - 12).min(29 - y) } else { (12 - y).max(y - 29).max(0) };
            if inside {
                dx.min(dy)
            } else {
                dx.max(dy)
            }
        };
        let mut dark = 0;
        for (x, y, p) in e.enumerate_pixels() {
            if p[0] < 128 {
                dark += 1;
                assert!(dist_to_boundary(x as i32, y as i32) <= 2, "edge pixel at {x},{y}");
            }
        }
        assert!(dark > 60);
        assert!(gradient_edges(&white(9, 9), &ClassicalConfig::default()).pixels().all(|p| p[0] == 255));
    }

    #[test]
    fn two_hands_split_by_marker() {
        let cfg = ClassicalConfig::default();
        let mut img = white(32, 32);
        fill(&mut img, 2, 10, 8, 16, cfg.skin);
        fill(&mut img, 3, 10, 5, 12, cfg.marker_left);
        fill(&mut img, 22, 10, 28, 16, cfg.skin);
        let all = keyed_hands(&img, "hands", &cfg);
        assert_eq!(all.len(), 2);
        let left = keyed_hands(&img, "left hand", &cfg);
        assert_eq!(left.len(), 1);
        assert_eq!(left[0].values[[13, 4]], 1.0);
        let right = keyed_hands(&img, "right hand", &cfg);
        assert_eq!(right[0].values[[13, 25]], 1.0);
        assert_eq!(all[0].count_ones() + all[1].count_ones(), 72);
    }

    #[test]
    fn marker_centroid_and_confidence() {
        let cfg = ClassicalConfig::default();
        let mut img = white(20, 10);
        fill(&mut img, 4, 2, 6, 4, cfg.marker_right);
        img.put_pixel(15, 5, image::Rgb(cfg.marker_left));
        let d = markers(&img, &cfg);
        assert_eq!(d.len(), 2);
        let r = d.iter().find(|d| d.hand == Some(Hand::Right)).unwrap();
        assert!((r.x - 0.25).abs() < 1e-12 && (r.y - 0.3).abs() < 1e-12 && r.confidence == 1.0);
        let l = d.iter().find(|d| d.hand == Some(Hand::Left)).unwrap();
        assert_eq!(l.confidence, 0.25);
    }

    #[test]
    fn motion_energy_segment() {
        let frames: Vec<RgbImage> = (0..10)
            .map(|i| {
                let mut f = white(16, 16);
                let x = if i < 3 { 0 } else if i > 7 { 10 } else { 2 * (i - 3) };
                fill(&mut f, x, 4, x + 4, 8, [0, 0, 0]);
                f
            })
            .collect();
        assert_eq!(motion_segment(&frames), Some((3, 8)));
        assert_eq!(motion_segment(&vec![white(4, 4); 5]), None);
    }
}
