//! Axis-aligned box arithmetic: IoU in 2D and projected-3D form, NMS,
//! GT-NMS, and anchor-relative box encoding/decoding.
//!
//! Boxes are half-open in area computations (`width = x_max - x_min`);
//! z slices are inclusive integers (`depth = z_max - z_min + 1`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: extents must be positive and finite")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("invalid z range [{z_min}, {z_max}]: z_min must be <= z_max")]
    InvalidZRange { z_min: i64, z_max: i64 },
    #[error("non-finite box deltas ({0}, {1}, {2}, {3})")]
    NonFiniteDeltas(f64, f64, f64, f64),
    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),
}

/// Axis-aligned 2D box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite =
            x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Union (smallest enclosing) box of `self` and `other`.
    pub fn union_bounds(&self, other: &Box2D) -> Box2D {
        Box2D {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Scale all coordinates by `ratio` (> 0), e.g. when resizing the image
    /// the box lives in.
    pub fn scaled(&self, ratio: f64) -> Box2D {
        debug_assert!(ratio > 0.0 && ratio.is_finite());
        Box2D {
            x_min: self.x_min * ratio,
            y_min: self.y_min * ratio,
            x_max: self.x_max * ratio,
            y_max: self.y_max * ratio,
        }
    }

    /// Clamp the box into `[0, width] x [0, height]`, keeping a tiny positive
    /// extent when the box falls entirely outside the bounds.
    pub fn clamped(&self, width: f64, height: f64) -> Box2D {
        const MIN_EXTENT: f64 = 1e-3;
        let x_min = self.x_min.clamp(0.0, width - MIN_EXTENT);
        let y_min = self.y_min.clamp(0.0, height - MIN_EXTENT);
        let x_max = self.x_max.clamp(x_min + MIN_EXTENT, width);
        let y_max = self.y_max.clamp(y_min + MIN_EXTENT, height);
        Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

/// Axis-aligned 3D box: continuous xy extent plus an inclusive integer slice
/// range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    xy: Box2D,
    z_min: i64,
    z_max: i64,
}

impl Box3D {
    pub fn new(xy: Box2D, z_min: i64, z_max: i64) -> Result<Self, GeometryError> {
        if z_min > z_max {
            return Err(GeometryError::InvalidZRange { z_min, z_max });
        }
        Ok(Self { xy, z_min, z_max })
    }

    pub fn xy(&self) -> &Box2D {
        &self.xy
    }

    pub fn z_min(&self) -> i64 {
        self.z_min
    }

    pub fn z_max(&self) -> i64 {
        self.z_max
    }

    pub fn depth(&self) -> i64 {
        self.z_max - self.z_min + 1
    }

    pub fn z_overlaps(&self, other: &Box3D) -> bool {
        self.z_min <= other.z_max && other.z_min <= self.z_max
    }
}

/// A scored 2D box, the unit of prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box2d: Box2D,
    pub score: f64,
}

impl Detection {
    pub fn new(box2d: Box2D, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self { box2d, score })
    }
}

/// A scored 3D box, produced by stitching per-slice detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection3D {
    pub box3d: Box3D,
    pub score: f64,
}

/// Intersection over union of two 2D boxes; 0 when disjoint.
pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Projected-3D IoU: 0 unless the z ranges share at least one slice,
/// otherwise the 2D IoU of the xy projections.
pub fn p3d_iou(a: &Box3D, b: &Box3D) -> f64 {
    if !a.z_overlaps(b) {
        return 0.0;
    }
    iou2d(a.xy(), b.xy())
}

/// Greedy non-maximum suppression. Detections are processed in descending
/// score order (ties broken by original index, lower first); a detection is
/// dropped when its IoU with an already retained one exceeds `iou_thresh`.
/// Retained boxes and scores are returned unmodified, highest score first.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut keep: Vec<Detection> = Vec::new();
    for &idx in &order {
        let candidate = &dets[idx];
        let suppressed = keep
            .iter()
            .any(|kept| iou2d(&kept.box2d, &candidate.box2d) > iou_thresh);
        if !suppressed {
            keep.push(*candidate);
        }
    }
    keep
}

/// Suppress predictions against ground truth: keeps exactly the predictions
/// whose IoU with every gt box is <= `iou_thresh`. Unlike [`nms`],
/// predictions never suppress each other; order and scores are preserved.
pub fn gt_nms(preds: &[Detection], gt: &[Box2D], iou_thresh: f64) -> Vec<Detection> {
    preds
        .iter()
        .filter(|p| gt.iter().all(|g| iou2d(&p.box2d, g) <= iou_thresh))
        .copied()
        .collect()
}

/// Anchor-relative box encoding: center offsets scaled by anchor size plus
/// log width/height ratios.
pub fn encode_deltas(anchor: &Box2D, target: &Box2D) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode_deltas`], clamping the result into
/// `[0, image_w] x [0, image_h]`.
pub fn decode_deltas(
    anchor: &Box2D,
    deltas: [f64; 4],
    image_w: f64,
    image_h: f64,
) -> Result<Box2D, GeometryError> {
    let [dx, dy, dw, dh] = deltas;
    if !(dx.is_finite() && dy.is_finite() && dw.is_finite() && dh.is_finite()) {
        return Err(GeometryError::NonFiniteDeltas(dx, dy, dw, dh));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + dx * anchor.width();
    let cy = acy + dy * anchor.height();
    // Cap the exponent so a wild regression output cannot overflow.
    let w = anchor.width() * dw.min(16.0).exp();
    let h = anchor.height() * dh.min(16.0).exp();
    let raw = Box2D {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    };
    Ok(raw.clamped(image_w, image_h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Box2D {
        Box2D::new(x_min, y_min, x_max, y_max).unwrap()
    }

    fn det(b: Box2D, score: f64) -> Detection {
        Detection::new(b, score).unwrap()
    }

    /// Area-count oracle: fraction of fine-grid cells of the bounding region
    /// covered by both boxes over cells covered by either.
    fn iou_rasterized(a: &Box2D, b: &Box2D, cells_per_unit: usize) -> f64 {
        let x_lo = a.x_min().min(b.x_min());
        let x_hi = a.x_max().max(b.x_max());
        let y_lo = a.y_min().min(b.y_min());
        let y_hi = a.y_max().max(b.y_max());
        let nx = ((x_hi - x_lo) * cells_per_unit as f64).ceil() as usize;
        let ny = ((y_hi - y_lo) * cells_per_unit as f64).ceil() as usize;
        let step = 1.0 / cells_per_unit as f64;
        let mut inter = 0u64;
        let mut union = 0u64;
        for iy in 0..ny {
            let cy = y_lo + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let cx = x_lo + (ix as f64 + 0.5) * step;
                let in_a =
                    cx >= a.x_min() && cx < a.x_max() && cy >= a.y_min() && cy < a.y_max();
                let in_b =
                    cx >= b.x_min() && cx < b.x_max() && cy >= b.y_min() && cy < b.y_max();
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(Box2D::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(Box2D::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou2d_identity_and_disjoint() {
        let b = bx(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou2d(&b, &b), 1.0);
        assert_eq!(iou2d(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // Edge-touching boxes share zero area.
        assert_eq!(iou2d(&bx(0.0, 0.0, 2.0, 2.0), &bx(2.0, 0.0, 4.0, 2.0)), 0.0);
    }

    #[test]
    fn iou2d_matches_rasterized_oracle() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        let expected = iou_rasterized(&a, &b, 100);
        assert!((expected - 1.0 / 7.0).abs() < 1e-3);
        assert!((iou2d(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou2d_symmetry() {
        let a = bx(0.0, 0.0, 5.0, 3.0);
        let b = bx(2.0, 1.0, 8.0, 9.0);
        assert_eq!(iou2d(&a, &b), iou2d(&b, &a));
    }

    #[test]
    fn p3d_iou_cases() {
        let xy = bx(0.0, 0.0, 2.0, 2.0);
        let a = Box3D::new(xy, 0, 3).unwrap();
        assert_eq!(p3d_iou(&a, &a), 1.0);

        // Same xy footprint, disjoint z ranges.
        let far = Box3D::new(xy, 5, 8).unwrap();
        assert_eq!(p3d_iou(&a, &far), 0.0);

        // xy IoU 1/7 composed with overlapping z ranges.
        let shifted = Box3D::new(bx(1.0, 1.0, 3.0, 3.0), 2, 6).unwrap();
        assert!((p3d_iou(&a, &shifted) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(p3d_iou(&a, &shifted), p3d_iou(&shifted, &a));

        // Adjacent (touching) z slices still count as overlapping: inclusive
        // ranges [0,3] and [3,5] share slice 3.
        let touching = Box3D::new(xy, 3, 5).unwrap();
        assert_eq!(p3d_iou(&a, &touching), 1.0);
    }

    #[test]
    fn invalid_z_range_rejected() {
        let xy = bx(0.0, 0.0, 1.0, 1.0);
        assert!(Box3D::new(xy, 4, 2).is_err());
    }

    #[test]
    fn nms_singleton_and_duplicate() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let single = vec![det(b, 0.7)];
        assert_eq!(nms(&single, 0.5), single);

        let dets = vec![det(b, 0.8), det(b, 0.9)];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let a = bx(0.0, 0.0, 4.0, 4.0);
        let b = bx(0.5, 0.5, 4.5, 4.5);
        let dets = vec![det(a, 0.8), det(b, 0.8)];
        let kept = nms(&dets, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].box2d, a);
    }

    /// Exhaustive O(n^2) greedy-suppression reference.
    fn nms_reference(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut suppressed = vec![false; dets.len()];
        let mut keep = Vec::new();
        for i in 0..order.len() {
            if suppressed[order[i]] {
                continue;
            }
            keep.push(dets[order[i]]);
            for j in (i + 1)..order.len() {
                if iou2d(&dets[order[i]].box2d, &dets[order[j]].box2d) > iou_thresh {
                    suppressed[order[j]] = true;
                }
            }
        }
        keep
    }

    #[test]
    fn nms_matches_brute_force_on_random_scenes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(411);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| {
                    let x = rng.gen_range(0.0..40.0);
                    let y = rng.gen_range(0.0..40.0);
                    let w = rng.gen_range(2.0..12.0);
                    let h = rng.gen_range(2.0..12.0);
                    det(bx(x, y, x + w, y + h), rng.gen_range(0.0..1.0))
                })
                .collect();
            let thresh = rng.gen_range(0.1..0.8);
            assert_eq!(nms(&dets, thresh), nms_reference(&dets, thresh));
        }
    }

    #[test]
    fn nms_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dets: Vec<Detection> = (0..30)
            .map(|_| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                det(bx(x, y, x + 5.0, y + 5.0), rng.gen_range(0.0..1.0))
            })
            .collect();
        let once = nms(&dets, 0.4);
        assert_eq!(nms(&once, 0.4), once);
    }

    #[test]
    fn gt_nms_removes_overlaps_only() {
        let gt = vec![bx(10.0, 10.0, 20.0, 20.0)];
        let on_gt = det(bx(10.0, 10.0, 20.0, 20.0), 0.95);
        let disjoint = det(bx(30.0, 30.0, 40.0, 40.0), 0.2);
        let kept = gt_nms(&[on_gt, disjoint], &gt, 0.7);
        assert_eq!(kept, vec![disjoint]);
    }

    #[test]
    fn gt_nms_keeps_exact_threshold_overlap() {
        // Boxes [0,0,10,7] and [0,0,10,10] have IoU 70/100 = 0.7 exactly.
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let pred = det(bx(0.0, 0.0, 10.0, 7.0), 0.9);
        assert_eq!(iou2d(&pred.box2d, &gt[0]), 0.7);
        assert_eq!(gt_nms(&[pred], &gt, 0.7), vec![pred]);
        // Slightly more overlap crosses the strict threshold.
        let bigger = det(bx(0.0, 0.0, 10.0, 7.1), 0.9);
        assert!(gt_nms(&[bigger], &gt, 0.7).is_empty());
    }

    #[test]
    fn gt_nms_with_empty_gt_is_identity() {
        let preds = vec![det(bx(0.0, 0.0, 1.0, 1.0), 0.5)];
        assert_eq!(gt_nms(&preds, &[], 0.7), preds);
    }

    #[test]
    fn encode_decode_identity() {
        let anchor = bx(8.0, 8.0, 24.0, 24.0);
        assert_eq!(encode_deltas(&anchor, &anchor), [0.0, 0.0, 0.0, 0.0]);
        let decoded = decode_deltas(&anchor, [0.0; 4], 64.0, 64.0).unwrap();
        assert_eq!(decoded, anchor);
    }

    #[test]
    fn decode_rejects_non_finite() {
        let anchor = bx(0.0, 0.0, 8.0, 8.0);
        assert!(matches!(
            decode_deltas(&anchor, [f64::NAN, 0.0, 0.0, 0.0], 64.0, 64.0),
            Err(GeometryError::NonFiniteDeltas(..))
        ));
    }

    #[test]
    fn encode_decode_round_trip_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let ax = rng.gen_range(5.0..50.0);
            let ay = rng.gen_range(5.0..50.0);
            let anchor = bx(ax, ay, ax + rng.gen_range(4.0..20.0), ay + rng.gen_range(4.0..20.0));
            let tx = rng.gen_range(5.0..50.0);
            let ty = rng.gen_range(5.0..50.0);
            let target = bx(tx, ty, tx + rng.gen_range(2.0..20.0), ty + rng.gen_range(2.0..20.0));
            let deltas = encode_deltas(&anchor, &target);
            // Bounds chosen large enough that clamping never fires.
            let decoded = decode_deltas(&anchor, deltas, 1e4, 1e4).unwrap();
            assert!((decoded.x_min() - target.x_min()).abs() < 1e-9);
            assert!((decoded.y_min() - target.y_min()).abs() < 1e-9);
            assert!((decoded.x_max() - target.x_max()).abs() < 1e-9);
            assert!((decoded.y_max() - target.y_max()).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_box_stays_valid() {
        let b = bx(-5.0, -5.0, 100.0, 100.0);
        let c = b.clamped(64.0, 64.0);
        assert_eq!(c, bx(0.0, 0.0, 64.0, 64.0));
        // Entirely outside the bounds still yields a valid (tiny) box.
        let outside = bx(200.0, 200.0, 210.0, 210.0);
        let c = outside.clamped(64.0, 64.0);
        assert!(c.width() > 0.0 && c.height() > 0.0);
        assert!(c.x_max() <= 64.0 && c.y_max() <= 64.0);
    }
}
