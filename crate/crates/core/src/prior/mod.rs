//! Per-frame bounding-box priors: parsing, validation, frame resampling and
//! rasterization into binary attention-grid masks.

mod parse;
mod raster;
mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syntax::{Pair, SyntaxPairs, TokenSequence};

pub use parse::{parse_boxes, parse_llm_boxes, parse_llm_boxes_with_size, parse_structured_boxes};
pub use raster::{rasterize_masks, MaskSet};
pub use validate::{validate_trajectories, Limits, Violation, ViolationKind};

/// Frame size the box-generation prompt asks for (width x height).
pub const DEFAULT_FRAME_WIDTH: u32 = 576;
pub const DEFAULT_FRAME_HEIGHT: u32 = 320;

/// `[x, y, w, h]` in pixels, x rightward and y downward from the top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct PixelBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<[i64; 4]> for PixelBox {
    fn from([x, y, w, h]: [i64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<PixelBox> for [i64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl PixelBox {
    pub fn from_corners(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`: top-left and bottom-right (exclusive).
    pub fn corners(&self) -> (i64, i64, i64, i64) {
        (self.x, self.y, self.x + self.w, self.y + self.h)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn area(&self) -> i64 {
        self.w.max(0) * self.h.max(0)
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        let (a0, b0, a1, b1) = self.corners();
        let (c0, d0, c1, d1) = other.corners();
        a0 <= c0 && b0 <= d0 && c1 <= a1 && d1 <= b1
    }

    pub fn within_frame(&self, width: u32, height: u32) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 >= 0 && y0 >= 0 && x1 <= width as i64 && y1 <= height as i64
    }

    /// Intersection with the frame rectangle.
    pub fn clipped(&self, width: u32, height: u32) -> PixelBox {
        let (x0, y0, x1, y1) = self.corners();
        let (w, h) = (width as i64, height as i64);
        let (x0, x1) = (x0.clamp(0, w), x1.clamp(0, w));
        let (y0, y1) = (y0.clamp(0, h), y1.clamp(0, h));
        PixelBox::from_corners(x0, y0, x1.max(x0), y1.max(y0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxTrajectory {
    pub subject_id: usize,
    pub name: String,
    pub boxes: Vec<PixelBox>,
}

/// Box trajectories for every subject over a fixed number of frames.
///
/// Boxes are kept exactly as written so that serialization round-trips and
/// validation can see off-frame coordinates; anything outside the frame is
/// recorded in `warnings` at load time and clipped when rasterized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialPriorSet {
    pub frame_width: u32,
    pub frame_height: u32,
    pub frame_count: usize,
    pub trajectories: Vec<BoxTrajectory>,
    pub background: String,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl SpatialPriorSet {
    pub fn new(
        frame_width: u32,
        frame_height: u32,
        frame_count: usize,
        mut trajectories: Vec<BoxTrajectory>,
        background: impl Into<String>,
    ) -> Result<Self> {
        if frame_width == 0 || frame_height == 0 {
            return Err(Error::Input("frame size must be positive".into()));
        }
        trajectories.sort_by_key(|t| t.subject_id);
        for pair in trajectories.windows(2) {
            if pair[0].subject_id == pair[1].subject_id {
                return Err(Error::Input(format!("duplicate subject id {}", pair[0].subject_id)));
            }
        }
        let mut warnings = Vec::new();
        for t in &trajectories {
            if t.boxes.len() != frame_count {
                return Err(Error::Input(format!(
                    "subject {} has {} boxes, expected {frame_count}",
                    t.subject_id,
                    t.boxes.len()
                )));
            }
            for (f, b) in t.boxes.iter().enumerate() {
                if b.w < 0 || b.h < 0 {
                    return Err(Error::Input(format!(
                        "subject {} frame {}: negative box size",
                        t.subject_id,
                        f + 1
                    )));
                }
                if !b.within_frame(frame_width, frame_height) {
                    warnings.push(format!(
                        "subject {} frame {}: box {:?} clipped to the {frame_width}x{frame_height} frame",
                        t.subject_id,
                        f + 1,
                        <[i64; 4]>::from(*b)
                    ));
                }
            }
        }
        Ok(Self {
            frame_width,
            frame_height,
            frame_count,
            trajectories,
            background: background.into(),
            warnings,
        })
    }

    pub fn trajectory(&self, subject_id: usize) -> Option<&BoxTrajectory> {
        self.trajectories.iter().find(|t| t.subject_id == subject_id)
    }

    /// Boxes in the `Frame k: [...]` text format.
    pub fn to_llm_text(&self) -> String {
        parse::to_llm_text(self)
    }

    pub fn to_structured_json(&self) -> Result<String> {
        parse::to_structured_json(self)
    }
}

/// Linearly interpolates every box corner onto `target_frames` evenly spaced
/// positions over the source frames; endpoints are preserved exactly and
/// corners are rounded to the nearest pixel.
pub fn resample_frames(set: &SpatialPriorSet, target_frames: usize) -> Result<SpatialPriorSet> {
    if set.frame_count < 2 || target_frames < 2 {
        return Err(Error::Input(format!(
            "resampling needs at least 2 source and target frames (got {} -> {target_frames})",
            set.frame_count
        )));
    }
    let span_src = set.frame_count - 1;
    let span_dst = target_frames - 1;
    let trajectories = set
        .trajectories
        .iter()
        .map(|t| {
            let boxes = (0..target_frames)
                .map(|k| {
                    // position k/span_dst mapped onto source index space, kept exact as a fraction
                    let num = k * span_src;
                    let (i0, rem) = (num / span_dst, num % span_dst);
                    if rem == 0 {
                        return t.boxes[i0];
                    }
                    let frac = rem as f64 / span_dst as f64;
                    let (a, b) = (t.boxes[i0].corners(), t.boxes[i0 + 1].corners());
                    let lerp = |p: i64, q: i64| (p as f64 + (q - p) as f64 * frac).round() as i64;
                    PixelBox::from_corners(lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2), lerp(a.3, b.3))
                })
                .collect();
            BoxTrajectory {
                subject_id: t.subject_id,
                name: t.name.clone(),
                boxes,
            }
        })
        .collect();
    SpatialPriorSet::new(
        set.frame_width,
        set.frame_height,
        target_frames,
        trajectories,
        set.background.clone(),
    )
}

/// Assigns a trajectory to every pair's noun.
///
/// A trajectory whose name contains the noun (or its singular) wins;
/// remaining pairs take the unused trajectories in subject-id order.
pub fn bind_subjects(
    set: &SpatialPriorSet,
    tokens: &TokenSequence,
    pairs: &SyntaxPairs,
) -> Result<Vec<(Pair, usize)>> {
    let mut used = vec![false; set.trajectories.len()];
    let mut chosen: Vec<Option<usize>> = vec![None; pairs.len()];
    for (k, pair) in pairs.pairs.iter().enumerate() {
        let noun = tokens.word(pair.noun).unwrap_or_default();
        let singular = noun.strip_suffix('s').unwrap_or(noun);
        let hit = set.trajectories.iter().enumerate().position(|(t, traj)| {
            !used[t]
                && traj
                    .name
                    .split_whitespace()
                    .any(|w| w.eq_ignore_ascii_case(noun) || w.eq_ignore_ascii_case(singular))
        });
        if let Some(t) = hit {
            used[t] = true;
            chosen[k] = Some(t);
        }
    }
    pairs
        .pairs
        .iter()
        .zip(chosen)
        .map(|(pair, hit)| {
            let t = match hit {
                Some(t) => t,
                None => {
                    let t = used.iter().position(|u| !u).ok_or_else(|| {
                        Error::Input(format!(
                            "no box trajectory left for noun {:?}",
                            tokens.word(pair.noun).unwrap_or_default()
                        ))
                    })?;
                    used[t] = true;
                    t
                }
            };
            Ok((*pair, set.trajectories[t].subject_id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::{parse_prompt, Lexicon, NegativeMode};

    fn set_with_xs(xs: &[i64]) -> SpatialPriorSet {
        let boxes = xs.iter().map(|&x| PixelBox { x, y: 70, w: 120, h: 200 }).collect();
        SpatialPriorSet::new(
            576,
            320,
            xs.len(),
            vec![BoxTrajectory {
                subject_id: 0,
                name: "walking woman".into(),
                boxes,
            }],
            "room",
        )
        .unwrap()
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let s = set_with_xs(&[0, 35, 70, 105, 140, 175, 210, 245]);
        assert_eq!(resample_frames(&s, 8).unwrap(), s);

        let two = set_with_xs(&[0, 70]);
        let three = resample_frames(&two, 3).unwrap();
        let xs: Vec<i64> = three.trajectories[0].boxes.iter().map(|b| b.x).collect();
        assert_eq!(xs, [0, 35, 70]);
    }

    #[test]
    fn resample_eight_to_sixteen() {
        let s = set_with_xs(&[0, 35, 70, 105, 140, 175, 210, 245]);
        let r = resample_frames(&s, 16).unwrap();
        // oracle: the source is exactly linear, so x_k = round(245 k / 15)
        let expected: Vec<i64> = (0..16).map(|k| (245.0 * k as f64 / 15.0).round() as i64).collect();
        let xs: Vec<i64> = r.trajectories[0].boxes.iter().map(|b| b.x).collect();
        assert_eq!(xs, expected);
        assert_eq!((xs[0], xs[15]), (0, 245));
        assert!(r.trajectories[0].boxes.iter().all(|b| b.w == 120 && b.h == 200 && b.y == 70));
    }

    #[test]
    fn resample_needs_two_frames() {
        let s = set_with_xs(&[0]);
        assert!(matches!(resample_frames(&s, 4), Err(Error::Input(_))));
        assert!(resample_frames(&set_with_xs(&[0, 1]), 1).is_err());
    }

    #[test]
    fn off_frame_boxes_are_warned_not_rejected() {
        let s = set_with_xs(&[600, 600]);
        assert_eq!(s.warnings.len(), 2);
        assert_eq!(s.trajectories[0].boxes[0].clipped(576, 320).w, 0);
    }

    #[test]
    fn binding_prefers_names_then_order() {
        let p = parse_prompt("a dog is running and a cat is sitting", &Lexicon::builtin(), NegativeMode::default())
            .unwrap();
        let traj = |id, name: &str| BoxTrajectory {
            subject_id: id,
            name: name.into(),
            boxes: vec![PixelBox { x: 0, y: 0, w: 1, h: 1 }],
        };
        let set = SpatialPriorSet::new(576, 320, 1, vec![traj(0, "sitting cat"), traj(1, "running dog")], "")
            .unwrap();
        let b = bind_subjects(&set, &p.tokens, &p.pairs).unwrap();
        assert_eq!(b.iter().map(|(_, id)| *id).collect::<Vec<_>>(), [1, 0]);

        let set = SpatialPriorSet::new(576, 320, 1, vec![traj(4, "x"), traj(2, "y")], "").unwrap();
        let b = bind_subjects(&set, &p.tokens, &p.pairs).unwrap();
        assert_eq!(b.iter().map(|(_, id)| *id).collect::<Vec<_>>(), [2, 4]);

        let set = SpatialPriorSet::new(576, 320, 1, vec![traj(0, "dog")], "").unwrap();
        assert!(bind_subjects(&set, &p.tokens, &p.pairs).is_err());
    }
}
