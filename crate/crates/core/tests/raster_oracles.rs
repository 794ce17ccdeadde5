//! Geometric oracles for arrow rasterization and mask pooling.

use illusign::evaluation::{is_arrow_orange, remove_arrows};
use illusign::overlay::{combine_masks, DownsampleRule, MaskKind, OverlayConfig, SpatialMask};
use illusign::trajectory::{composite, render_arrow, ArrowStyle};
use image::{Rgb, RgbImage};
use ndarray::Array2;

fn inside_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], u: [f64; 2], v: [f64; 2]| (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0]);
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
}

/// Pixel centers covered by a straight shaft with butt caps plus an
/// isosceles head whose tip sits on the end point.
fn oracle_pixels(from: [f64; 2], to: [f64; 2], style: &ArrowStyle, w: u32, h: u32) -> usize {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let (ux, uy) = (dx / len, dy / len);
    let (nx, ny) = (-uy, ux);
    let base = [to[0] - ux * style.head_length, to[1] - uy * style.head_length];
    let hw = style.head_width / 2.0;
    let b1 = [base[0] + nx * hw, base[1] + ny * hw];
    let b2 = [base[0] - nx * hw, base[1] - ny * hw];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let (rx, ry) = (p[0] - from[0], p[1] - from[1]);
            let along = rx * ux + ry * uy;
            let across = (rx * nx + ry * ny).abs();
            let shaft = (0.0..=len).contains(&along) && across <= style.stroke_width / 2.0;
            if shaft || inside_triangle(p, to, b1, b2) {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn orange_pixel_count_matches_geometry() {
    let style = ArrowStyle::default();
    for (from, to) in [([0.1, 0.5], [0.85, 0.5]), ([0.15, 0.8], [0.8, 0.2]), ([0.5, 0.1], [0.5, 0.9])] {
        let (w, h) = (128u32, 96u32);
        let img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let doc = render_arrow(&[from, to], &style, w, h).unwrap();
        let out = composite(&img, &doc).unwrap();
        let got = out.pixels().filter(|p| is_arrow_orange(p.0)).count() as f64;
        let px = |p: [f64; 2]| [p[0] * w as f64, p[1] * h as f64];
        let want = oracle_pixels(px(from), px(to), &style, w, h) as f64;
        assert!((got - want).abs() <= 0.1 * want, "{got} vs {want}");
    }
}

#[test]
fn remove_arrows_restores_the_sketch() {
    let sketch = RgbImage::from_fn(96, 96, |x, y| if (x / 6 + y / 6) % 3 == 0 { Rgb([30, 30, 30]) } else { Rgb([250, 250, 250]) });
    let doc = render_arrow(&[[0.1, 0.2], [0.5, 0.6], [0.9, 0.3]], &ArrowStyle::default(), 96, 96).unwrap();
    let annotated = composite(&sketch, &doc).unwrap();
    assert!(annotated.pixels().any(|p| is_arrow_orange(p.0)));
    let cleaned = remove_arrows(&annotated);
    assert!(!cleaned.pixels().any(|p| is_arrow_orange(p.0)));
    for (a, b) in sketch.pixels().zip(cleaned.pixels()) {
        if a.0 == [30, 30, 30] && b.0 != a.0 {
            // only pixels under the arrow change
            assert!(b.0 == [255, 255, 255] || b.0[0] > b.0[2]);
        }
    }
    assert_eq!(remove_arrows(&sketch), sketch);
}

#[test]
fn pooled_disc_matches_rasterization() {
    let (size, cells) = (512usize, 64usize);
    let (cx, cy, r) = (203.7, 288.2, 97.3);
    let disc = Array2::from_shape_fn((size, size), |(y, x)| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        (dx * dx + dy * dy <= r * r) as u8 as f64
    });
    let hands = SpatialMask::new(disc, MaskKind::HandsStart).unwrap();
    let cfg = OverlayConfig { dilation_radius: 0, mask_downsample_rule: DownsampleRule::MaxPool, ..Default::default() };
    let got = combine_masks(&[hands], &[], cells, &cfg, MaskKind::CombinedStart).unwrap();
    let k = (size / cells) as f64;
    let want = Array2::from_shape_fn((cells, cells), |(i, j)| {
        // the cell's pixel center nearest to the disc center, per axis
        let near = |c: f64, n: usize| (c.floor() + 0.5).clamp(n as f64 * k + 0.5, (n + 1) as f64 * k - 0.5);
        let (px, py) = (near(cx, j), near(cy, i));
        ((px - cx).powi(2) + (py - cy).powi(2) <= r * r) as u8 as f64
    });
    assert_eq!(got.values, want);
    let full = SpatialMask::new(Array2::ones((size, size)), MaskKind::HandsStart).unwrap();
    let all = combine_masks(&[full], &[], cells, &cfg, MaskKind::CombinedStart).unwrap();
    assert_eq!(all.count_ones(), cells * cells);
}
