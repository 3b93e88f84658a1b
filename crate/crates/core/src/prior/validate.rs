use std::fmt;

use serde::{Deserialize, Serialize};

use super::SpatialPriorSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    /// Largest allowed frame-to-frame displacement of a box center.
    pub max_step_px: f64,
    pub allow_offscreen: bool,
    /// How far a box edge may poke past the frame before it is flagged.
    pub offscreen_tolerance_px: i64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_step_px: 150.0,
            allow_offscreen: false,
            offscreen_tolerance_px: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    OutOfFrame,
    Velocity,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject_id: usize,
    /// 1-based frame number.
    pub frame: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ViolationKind::OutOfFrame => "OUT_OF_FRAME",
            ViolationKind::Velocity => "VELOCITY",
            ViolationKind::Degenerate => "DEGENERATE",
        };
        write!(f, "{kind} subject={} frame={}: {}", self.subject_id, self.frame, self.detail)
    }
}

/// Diagnostics for boxes that leave the frame, move too fast between
/// consecutive frames, or have zero area. Never fails; the caller decides
/// what to do with the list.
pub fn validate_trajectories(set: &SpatialPriorSet, limits: &Limits) -> Vec<Violation> {
    let tol = limits.offscreen_tolerance_px;
    let (w, h) = (set.frame_width as i64, set.frame_height as i64);
    let mut out = Vec::new();
    for t in &set.trajectories {
        for (f, b) in t.boxes.iter().enumerate() {
            let (x0, y0, x1, y1) = b.corners();
            if b.area() == 0 {
                out.push(Violation {
                    kind: ViolationKind::Degenerate,
                    subject_id: t.subject_id,
                    frame: f + 1,
                    detail: format!("zero-area box {:?}", <[i64; 4]>::from(*b)),
                });
            }
            if !limits.allow_offscreen && (x0 < -tol || y0 < -tol || x1 > w + tol || y1 > h + tol) {
                out.push(Violation {
                    kind: ViolationKind::OutOfFrame,
                    subject_id: t.subject_id,
                    frame: f + 1,
                    detail: format!("box {:?} exceeds the {w}x{h} frame", <[i64; 4]>::from(*b)),
                });
            }
            if f > 0 {
                let (ax, ay) = t.boxes[f - 1].center();
                let (bx, by) = b.center();
                let step = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
                if step > limits.max_step_px {
                    out.push(Violation {
                        kind: ViolationKind::Velocity,
                        subject_id: t.subject_id,
                        frame: f + 1,
                        detail: format!(
                            "center moved {step:.1} px from frame {} (limit {})",
                            f, limits.max_step_px
                        ),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{parse_llm_boxes, BoxTrajectory, PixelBox};

    fn single(boxes: Vec<[i64; 4]>) -> SpatialPriorSet {
        let n = boxes.len();
        SpatialPriorSet::new(
            576,
            320,
            n,
            vec![BoxTrajectory {
                subject_id: 0,
                name: "thing".into(),
                boxes: boxes.into_iter().map(PixelBox::from).collect(),
            }],
            "",
        )
        .unwrap()
    }

    #[test]
    fn running_dog_jump_is_flagged() {
        let set = parse_llm_boxes(include_str!("../../tests/fixtures/dog_cat.txt")).unwrap();
        let limits = Limits {
            max_step_px: 60.0,
            ..Limits::default()
        };
        let v = validate_trajectories(&set, &limits);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Velocity);
        assert_eq!((v[0].subject_id, v[0].frame), (0, 8));
        assert!(v[0].detail.contains("125.0"));
    }

    #[test]
    fn full_frame_static_box_is_clean() {
        let set = single(vec![[0, 0, 576, 320]; 4]);
        assert!(validate_trajectories(&set, &Limits::default()).is_empty());
    }

    #[test]
    fn off_frame_and_degenerate() {
        let set = single(vec![[600, 0, 50, 50]]);
        let v = validate_trajectories(&set, &Limits::default());
        assert_eq!(v.iter().map(|v| v.kind).collect::<Vec<_>>(), [ViolationKind::OutOfFrame]);
        let relaxed = Limits {
            allow_offscreen: true,
            ..Limits::default()
        };
        assert!(validate_trajectories(&set, &relaxed).is_empty());

        let set = single(vec![[10, 10, 0, 5]]);
        let v = validate_trajectories(&set, &Limits::default());
        assert_eq!(v[0].kind, ViolationKind::Degenerate);
    }
}
