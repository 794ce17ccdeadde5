//! Motion arrows as SVG 1.1 documents and their rasterization onto
//! illustrations.

use std::fmt::Write as _;

use image::RgbImage;
use resvg::{tiny_skia, usvg};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrowStyle {
    pub color: [u8; 3],
    pub stroke_width: f64,
    /// Isosceles arrowhead: length along the path and base width, in pixels.
    pub head_length: f64,
    pub head_width: f64,
}

impl Default for ArrowStyle {
    fn default() -> Self {
        ArrowStyle { color: [255, 140, 0], stroke_width: 4.0, head_length: 12.0, head_width: 12.0 }
    }
}

/// Arrows over a `width` x `height` canvas, coordinates in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrowDocument {
    pub width: u32,
    pub height: u32,
    pub style: ArrowStyle,
    pub arrows: Vec<Vec<[f64; 2]>>,
}

impl ArrowDocument {
    pub fn empty(width: u32, height: u32, style: ArrowStyle) -> Self {
        ArrowDocument { width, height, style, arrows: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.arrows.is_empty()
    }

    /// Appends the arrows of `other` (same canvas).
    pub fn merge(&mut self, other: ArrowDocument) -> Result<()> {
        if (other.width, other.height) != (self.width, self.height) {
            return Err(Error::Validation(format!(
                "arrow canvases differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        self.arrows.extend(other.arrows);
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        let [r, g, b] = self.style.color;
        let color = format!("rgb({r},{g},{b})");
        let (hl, hw) = (self.style.head_length, self.style.head_width);
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        );
        if !self.arrows.is_empty() {
            s.push_str("<defs>\n");
            for i in 0..self.arrows.len() {
                let _ = writeln!(
                    s,
                    r#"<marker id="arrowhead-{i}" markerUnits="userSpaceOnUse" markerWidth="{hl}" markerHeight="{hw}" refX="{hl}" refY="{c}" orient="auto"><path d="M 0 0 L {hl} {c} L 0 {hw} z" fill="{color}"/></marker>"#,
                    c = hw / 2.0
                );
            }
            s.push_str("</defs>\n");
        }
        for (i, pts) in self.arrows.iter().enumerate() {
            let mut d = String::new();
            for (j, p) in pts.iter().enumerate() {
                let _ = write!(d, "{}{} {}", if j == 0 { "M " } else { " L " }, p[0], p[1]);
            }
            let _ = writeln!(
                s,
                r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="{}" stroke-linecap="butt" stroke-linejoin="round" marker-end="url(#arrowhead-{i})"/>"#,
                self.style.stroke_width
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Arrow along a polyline given in normalized [0, 1] coordinates. A
/// polyline with no extent yields an empty document.
pub fn render_arrow(polyline: &[[f64; 2]], style: &ArrowStyle, width: u32, height: u32) -> Result<ArrowDocument> {
    if polyline.len() < 2 {
        return Err(Error::Validation(format!("arrow needs >= 2 points, got {}", polyline.len())));
    }
    let mut doc = ArrowDocument::empty(width, height, style.clone());
    let first = polyline[0];
    if polyline.iter().all(|p| *p == first) {
        log::warn!("zero-length arrow skipped");
        return Ok(doc);
    }
    let (w, h) = (width as f64, height as f64);
    doc.arrows.push(polyline.iter().map(|p| [p[0] * w, p[1] * h]).collect());
    Ok(doc)
}

/// Coordinate pairs of each `<path d="M .. L ..">` with a marker, in document order.
pub fn parse_arrow_paths(svg: &str) -> Vec<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for chunk in svg.split("<path d=\"").skip(1) {
        let Some(end) = chunk.find('"') else { continue };
        if !chunk[end..].split('>').next().unwrap_or("").contains("marker-end") {
            continue;
        }
        let nums: Vec<f64> = chunk[..end]
            .split(|c: char| c.is_whitespace() || c == 'M' || c == 'L')
            .filter(|t| !t.is_empty())
            .filter_map(|t| t.parse().ok())
            .collect();
        out.push(nums.chunks_exact(2).map(|c| [c[0], c[1]]).collect());
    }
    out
}

/// Rasterizes `doc` over `img` with alpha blending. An empty document
/// returns the illustration unchanged.
pub fn composite(img: &RgbImage, doc: &ArrowDocument) -> Result<RgbImage> {
    if (img.width(), img.height()) != (doc.width, doc.height) {
        return Err(Error::Validation(format!(
            "arrow canvas {}x{} does not match illustration {}x{}",
            doc.width,
            doc.height,
            img.width(),
            img.height()
        )));
    }
    if doc.is_empty() {
        return Ok(img.clone());
    }
    let tree = usvg::Tree::from_str(&doc.to_svg(), &usvg::Options::default())
        .map_err(|e| Error::Validation(format!("arrow svg: {e}")))?;
    let mut pixmap = tiny_skia::Pixmap::new(img.width(), img.height())
        .ok_or_else(|| Error::Validation("empty canvas".into()))?;
    for (dst, src) in pixmap.data_mut().chunks_exact_mut(4).zip(img.pixels()) {
        dst.copy_from_slice(&[src[0], src[1], src[2], 255]);
    }
    resvg::render(&tree, tiny_skia::Transform::identity(), &mut pixmap.as_mut());
    let mut out = img.clone();
    for (dst, src) in out.pixels_mut().zip(pixmap.data().chunks_exact(4)) {
        dst.0 = [src[0], src[1], src[2]];
    }
    Ok(out)
}
