use std::collections::BTreeMap;

use super::{PixelBox, SpatialPriorSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::syntax::Pair;

/// Binary masks on an attention grid, one `[frames, grid_h * grid_w]`
/// tensor per key. Keys are subject ids straight out of
/// [`rasterize_masks`] and token indices after [`MaskSet::for_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub masks: BTreeMap<usize, Tensor>,
    pub warnings: Vec<String>,
}

impl MaskSet {
    pub fn pixels(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.masks.get(&key)
    }

    /// Row `frame` of the mask for `key`.
    pub fn frame(&self, key: usize, frame: usize) -> Option<&[f64]> {
        let n = self.pixels();
        self.masks.get(&key).map(|m| &m.data()[frame * n..(frame + 1) * n])
    }

    /// Re-keys subject masks by token index: each pair's noun and verb both
    /// get the mask of the subject bound to that pair.
    pub fn for_pairs(&self, binding: &[(Pair, usize)]) -> Result<MaskSet> {
        let mut masks = BTreeMap::new();
        for (pair, subject) in binding {
            let m = self
                .masks
                .get(subject)
                .ok_or_else(|| Error::Input(format!("no mask for subject {subject}")))?;
            masks.insert(pair.noun, m.clone());
            masks.insert(pair.verb, m.clone());
        }
        Ok(MaskSet {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            frames: self.frames,
            masks,
            warnings: self.warnings.clone(),
        })
    }
}

/// Whether the grid cell `(row, col)` has its center inside the half-open box.
fn cell_inside(b: &PixelBox, row: usize, col: usize, set: &SpatialPriorSet, grid_h: usize, grid_w: usize) -> bool {
    let cx = (col as f64 + 0.5) * set.frame_width as f64 / grid_w as f64;
    let cy = (row as f64 + 0.5) * set.frame_height as f64 / grid_h as f64;
    let (x0, y0, x1, y1) = b.corners();
    x0 as f64 <= cx && cx < x1 as f64 && y0 as f64 <= cy && cy < y1 as f64
}

/// A cell is 1 iff its center lies in `[x, x + w) x [y, y + h)`.
pub fn rasterize_masks(set: &SpatialPriorSet, grid_h: usize, grid_w: usize) -> Result<MaskSet> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Input(format!("grid must be at least 1x1, got {grid_h}x{grid_w}")));
    }
    let mut masks = BTreeMap::new();
    let mut warnings = Vec::new();
    for t in &set.trajectories {
        let mut data = Vec::with_capacity(set.frame_count * grid_h * grid_w);
        for (f, b) in t.boxes.iter().enumerate() {
            let before = data.len();
            for row in 0..grid_h {
                for col in 0..grid_w {
                    data.push(if cell_inside(b, row, col, set, grid_h, grid_w) { 1.0 } else { 0.0 });
                }
            }
            if data[before..].iter().all(|&v| v == 0.0) {
                warnings.push(format!(
                    "subject {} frame {}: mask is empty on the {grid_h}x{grid_w} grid",
                    t.subject_id,
                    f + 1
                ));
            }
        }
        masks.insert(t.subject_id, Tensor::new(&[set.frame_count, grid_h * grid_w], data)?);
    }
    Ok(MaskSet {
        grid_h,
        grid_w,
        frames: set.frame_count,
        masks,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::BoxTrajectory;
    use proptest::prelude::*;

    fn set_of(boxes: &[[i64; 4]]) -> SpatialPriorSet {
        let trajectories = boxes
            .iter()
            .enumerate()
            .map(|(k, b)| BoxTrajectory {
                subject_id: k,
                name: format!("s{k}"),
                boxes: vec![PixelBox::from(*b)],
            })
            .collect();
        SpatialPriorSet::new(576, 320, 1, trajectories, "").unwrap()
    }

    #[test]
    fn full_frame_is_all_ones() {
        let m = rasterize_masks(&set_of(&[[0, 0, 576, 320]]), 7, 3).unwrap();
        assert!(m.get(0).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn zero_area_is_empty_with_warning() {
        let m = rasterize_masks(&set_of(&[[100, 100, 0, 50]]), 8, 8).unwrap();
        assert_eq!(m.get(0).unwrap().sum(), 0.0);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn left_half_box_on_five_by_nine() {
        let m = rasterize_masks(&set_of(&[[0, 0, 288, 320]]), 5, 9).unwrap();
        // oracle: enumerate cell centers x = 32 + 64 c and test 0 <= x < 288
        for r in 0..5 {
            for c in 0..9 {
                let x = 32.0 + 64.0 * c as f64;
                let expected = if (0.0..288.0).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(m.frame(0, 0).unwrap()[r * 9 + c], expected, "cell ({r},{c})");
            }
        }
        assert_eq!(m.get(0).unwrap().sum(), 20.0);
    }

    #[test]
    fn adjacent_boxes_never_double_cover() {
        let m = rasterize_masks(&set_of(&[[0, 0, 288, 320], [288, 0, 288, 320]]), 5, 9).unwrap();
        let a = m.get(0).unwrap().data();
        let b = m.get(1).unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| x + y == 1.0));
    }

    #[test]
    fn invalid_grid() {
        assert!(rasterize_masks(&set_of(&[]), 0, 4).is_err());
    }

    fn nested_boxes() -> impl Strategy<Value = ([i64; 4], [i64; 4])> {
        (0i64..500, 0i64..300, 0i64..200, 0i64..200, 0i64..60, 0i64..60, 0i64..60, 0i64..60).prop_map(
            |(x, y, w, h, l, t, r, b)| ([x, y, w, h], [x - l, y - t, w + l + r, h + t + b]),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn containment_is_monotone((inner, outer) in nested_boxes(), gh in 1usize..12, gw in 1usize..12) {
            prop_assert!(PixelBox::from(outer).contains(&PixelBox::from(inner)));
            let m = rasterize_masks(&set_of(&[inner, outer]), gh, gw).unwrap();
            let (a, b) = (m.get(0).unwrap().data(), m.get(1).unwrap().data());
            prop_assert!(a.iter().zip(b).all(|(x, y)| x <= y));
        }

        #[test]
        fn split_boxes_partition_cells(split in 0i64..577, gh in 1usize..10, gw in 1usize..10) {
            let m = rasterize_masks(&set_of(&[[0, 0, split, 320], [split, 0, 576 - split, 320]]), gh, gw).unwrap();
            let (a, b) = (m.get(0).unwrap().data(), m.get(1).unwrap().data());
            prop_assert!(a.iter().zip(b).all(|(x, y)| x + y <= 1.0));
        }
    }
}
