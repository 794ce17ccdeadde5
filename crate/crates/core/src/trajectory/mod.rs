//! Fingertip trajectories: B-spline fitting and directional arrows.

mod arrow;
mod spline;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::perception::KeypointTrack;

pub use arrow::{composite, parse_arrow_paths, render_arrow, ArrowDocument, ArrowStyle};
pub use spline::{
    averaged_knots, basis_functions, chord_parameters, default_control_count, find_span, fit_bspline, sample_curve,
    Point, SplineCurve,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrowConfig {
    pub degree: usize,
    /// `None` picks the default count from the sample count.
    pub n_control: Option<usize>,
    pub curve_samples: usize,
    /// Hands whose net fingertip displacement is below this fraction of the
    /// image diagonal get no arrow.
    pub min_displacement: f64,
    pub style: ArrowStyle,
}

impl Default for ArrowConfig {
    fn default() -> Self {
        ArrowConfig { degree: 3, n_control: None, curve_samples: 50, min_displacement: 0.03, style: ArrowStyle::default() }
    }
}

/// Net displacement of a track in pixels on a `width` x `height` canvas.
pub fn displacement(track: &KeypointTrack, width: u32, height: u32) -> f64 {
    match (track.samples.first(), track.samples.last()) {
        (Some(a), Some(b)) => (((b.1 - a.1) * width as f64).powi(2) + ((b.2 - a.2) * height as f64).powi(2)).sqrt(),
        _ => 0.0,
    }
}

/// One arrow per moving hand.
pub fn arrows_for_tracks(tracks: &[KeypointTrack], cfg: &ArrowConfig, width: u32, height: u32) -> Result<ArrowDocument> {
    let mut doc = ArrowDocument::empty(width, height, cfg.style.clone());
    let diag = ((width as f64).powi(2) + (height as f64).powi(2)).sqrt();
    for t in tracks {
        if t.samples.len() < 2 {
            continue;
        }
        let moved = displacement(t, width, height);
        if moved < cfg.min_displacement * diag {
            log::info!("{} hand moved {moved:.1} px; no arrow", t.hand.as_str());
            continue;
        }
        let curve = fit_bspline(&t.points(), cfg.degree, cfg.n_control)?;
        let line = sample_curve(&curve, cfg.curve_samples)?;
        doc.merge(render_arrow(&line, &cfg.style, width, height)?)?;
    }
    Ok(doc)
}
