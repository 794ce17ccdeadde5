use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SignBoundaries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// One fingertip detection in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand: Option<Hand>,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<Detection>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Index-fingertip positions of one hand, `(frame, x, y)` with x, y in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointTrack {
    pub hand: Hand,
    pub samples: Vec<(usize, f64, f64)>,
    /// Left/right identity came from nearest-neighbour continuation.
    #[serde(default, skip_serializing_if = "is_false")]
    pub nn_paired: bool,
}

impl KeypointTrack {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.samples.iter().map(|&(_, x, y)| [x, y]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::imaging::ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("keypoint track", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: KeypointTrack = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if t.samples.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Validation(format!("{}: frame indices not strictly increasing", path.display())));
        }
        if t.samples.iter().any(|&(_, x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)) {
            return Err(Error::Validation(format!("{}: coordinates outside [0, 1]", path.display())));
        }
        Ok(t)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Splits detections into per-hand sample lists. Unlabelled detections are
/// assigned by nearest-neighbour continuation from each hand's last position;
/// without history the detection further right in the image is the signer's
/// left hand. The flag reports whether any assignment was made that way.
pub fn pair_detections(frames: &[FrameDetections]) -> (HashMap<Hand, Vec<(usize, f64, f64)>>, bool) {
    let mut out: HashMap<Hand, Vec<(usize, f64, f64)>> = HashMap::new();
    let mut last: HashMap<Hand, (f64, f64)> = HashMap::new();
    let mut nn = false;
    let mut sorted: Vec<&FrameDetections> = frames.iter().collect();
    sorted.sort_by_key(|f| f.frame);
    for f in sorted {
        let mut best: HashMap<Hand, Detection> = HashMap::new();
        let mut free = Vec::new();
        for d in &f.detections {
            match d.hand {
                Some(h) => {
                    if best.get(&h).is_none_or(|b| d.confidence > b.confidence) {
                        best.insert(h, *d);
                    }
                }
                None => free.push(*d),
            }
        }
        free.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let open: Vec<Hand> = [Hand::Left, Hand::Right].into_iter().filter(|h| !best.contains_key(h)).collect();
        free.truncate(open.len());
        if !free.is_empty() {
            nn = true;
        }
        match (open.as_slice(), free.as_slice()) {
            (_, []) => {}
            ([h], [d]) => {
                best.insert(*h, *d);
            }
            ([_, _], [d]) => {
                let p = (d.x, d.y);
                let fallback = if d.x >= 0.5 { Hand::Left } else { Hand::Right };
                let h = [Hand::Left, Hand::Right]
                    .into_iter()
                    .filter_map(|h| last.get(&h).map(|&q| (h, dist(p, q))))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(fallback, |(h, _)| h);
                best.insert(h, *d);
            }
            ([_, _], [a, b]) => {
                let (pa, pb) = ((a.x, a.y), (b.x, b.y));
                let a_is_left = match (last.get(&Hand::Left), last.get(&Hand::Right)) {
                    (Some(&l), Some(&r)) => dist(pa, l) + dist(pb, r) <= dist(pa, r) + dist(pb, l),
                    (Some(&l), None) => dist(pa, l) <= dist(pb, l),
                    (None, Some(&r)) => dist(pb, r) <= dist(pa, r),
                    (None, None) => a.x >= b.x,
                };
                let (l, r) = if a_is_left { (*a, *b) } else { (*b, *a) };
                best.insert(Hand::Left, l);
                best.insert(Hand::Right, r);
            }
            _ => {}
        }
        for (h, d) in best {
            last.insert(h, (d.x, d.y));
            out.entry(h).or_default().push((f.frame, d.x.clamp(0.0, 1.0), d.y.clamp(0.0, 1.0)));
        }
    }
    (out, nn)
}

/// Restricts samples to the stroke, fills gaps of at most `max_gap` frames
/// linearly and drops the hand (empty track) when it is missing from more
/// than half of the stroke's frames.
pub fn build_track(hand: Hand, samples: &[(usize, f64, f64)], bounds: &SignBoundaries, max_gap: usize) -> KeypointTrack {
    let mut s: Vec<(usize, f64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(f, _, _)| (bounds.start_frame..=bounds.end_frame).contains(&f))
        .collect();
    s.sort_by_key(|p| p.0);
    s.dedup_by_key(|p| p.0);
    let total = bounds.end_frame - bounds.start_frame + 1;
    let missing = total - s.len();
    if 2 * missing > total {
        log::warn!("{} hand missing in {missing} of {total} frames; dropping its track", hand.as_str());
        return KeypointTrack { hand, samples: Vec::new(), nn_paired: false };
    }
    let mut filled = Vec::with_capacity(total);
    for (i, &p) in s.iter().enumerate() {
        if i > 0 {
            let q = s[i - 1];
            let gap = p.0 - q.0 - 1;
            if gap > 0 && gap <= max_gap {
                for k in 1..=gap {
                    let a = k as f64 / (gap + 1) as f64;
                    filled.push((q.0 + k, q.1 + (p.1 - q.1) * a, q.2 + (p.2 - q.2) * a));
                }
            }
        }
        filled.push(p);
    }
    KeypointTrack { hand, samples: filled, nn_paired: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::BoundarySource;

    fn bounds(s: usize, e: usize) -> SignBoundaries {
        SignBoundaries { start_frame: s, end_frame: e, source: BoundarySource::ManualOverride }
    }

    #[test]
    fn gaps_interpolated_up_to_two() {
        let samples = [(0, 0.0, 0.0), (3, 0.3, 0.6), (4, 0.4, 0.8), (8, 0.8, 0.8), (9, 0.9, 0.9), (10, 1.0, 1.0)];
        let t = build_track(Hand::Left, &samples, &bounds(0, 10), 2);
        let frames: Vec<usize> = t.samples.iter().map(|s| s.0).collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4, 8, 9, 10]);
        assert!((t.samples[1].1 - 0.1).abs() < 1e-12 && (t.samples[2].2 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn mostly_missing_hand_dropped() {
        let samples = [(0, 0.1, 0.1), (1, 0.2, 0.2), (2, 0.3, 0.3)];
        assert!(build_track(Hand::Right, &samples, &bounds(0, 9), 2).samples.is_empty());
        assert_eq!(build_track(Hand::Right, &samples, &bounds(0, 5), 2).samples.len(), 3);
    }

    #[test]
    fn short_boundaries_cap_samples() {
        let samples: Vec<_> = (0..20).map(|f| (f, f as f64 / 20.0, 0.5)).collect();
        assert_eq!(build_track(Hand::Left, &samples, &bounds(7, 8), 2).samples.len(), 2);
    }

    #[test]
    fn crossing_hands_follow_nearest_neighbour() {
        // two unlabelled dots moving towards each other and crossing
        let frames: Vec<FrameDetections> = (0..9)
            .map(|f| {
                let t = f as f64 / 8.0;
                FrameDetections {
                    frame: f,
                    detections: vec![
                        Detection { hand: None, x: 0.1 + 0.8 * t, y: 0.3, confidence: 0.9 },
                        Detection { hand: None, x: 0.9 - 0.8 * t, y: 0.7, confidence: 0.9 },
                    ],
                }
            })
            .collect();
        let (tracks, nn) = pair_detections(&frames);
        assert!(nn);
        assert!(tracks[&Hand::Left].iter().all(|s| s.2 == 0.7));
        assert!(tracks[&Hand::Right].iter().all(|s| s.2 == 0.3));
    }

    #[test]
    fn labelled_detections_keep_identity() {
        let frames = vec![FrameDetections {
            frame: 0,
            detections: vec![
                Detection { hand: Some(Hand::Right), x: 0.9, y: 0.1, confidence: 0.8 },
                Detection { hand: Some(Hand::Left), x: 0.1, y: 0.2, confidence: 0.8 },
            ],
        }];
        let (tracks, nn) = pair_detections(&frames);
        assert!(!nn);
        assert_eq!(tracks[&Hand::Right], vec![(0, 0.9, 0.1)]);
    }

    #[test]
    fn json_shape() {
        let t = KeypointTrack { hand: Hand::Left, samples: vec![(3, 0.25, 0.5)], nn_paired: false };
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"{"hand":"left","samples":[[3,0.25,0.5]]}"#);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        t.save(&p).unwrap();
        assert_eq!(KeypointTrack::load(&p).unwrap(), t);
        std::fs::write(&p, r#"{"hand":"left","samples":[[3,0.2,0.5],[3,0.3,0.5]]}"#).unwrap();
        assert!(KeypointTrack::load(&p).is_err());
    }
}
