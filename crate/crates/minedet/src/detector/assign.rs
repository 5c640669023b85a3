//! Per-anchor label assignment against foreground, ignore, and hard-negative
//! boxes.

use serde::{Deserialize, Serialize};

use super::AnchorGrid;
use crate::geometry::{iou2d, Box2D};

/// Where a foreground target came from. `Hidden` only appears in
/// oracle-provenance assignments built by evaluation or analysis code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Labeled,
    Mined,
    Hidden,
}

/// A foreground target box with its provenance tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub box2d: Box2D,
    pub provenance: Provenance,
}

impl GtBox {
    pub fn labeled(box2d: Box2D) -> Self {
        Self {
            box2d,
            provenance: Provenance::Labeled,
        }
    }

    pub fn mined(box2d: Box2D) -> Self {
        Self {
            box2d,
            provenance: Provenance::Mined,
        }
    }

    pub fn hidden(box2d: Box2D) -> Self {
        Self {
            box2d,
            provenance: Provenance::Hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground { gt: usize, provenance: Provenance },
    Background,
    /// Background forced by a hard-negative box.
    HardNegative,
    Ignored,
}

/// Per-anchor labels; `M = M_fg + M_bg + M_ignored`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    labels: Vec<AnchorLabel>,
}

impl LabelAssignment {
    #[cfg(test)]
    pub(crate) fn from_labels(labels: Vec<AnchorLabel>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[AnchorLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_foreground(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Foreground { .. }))
            .count()
    }

    pub fn n_background(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Background | AnchorLabel::HardNegative))
            .count()
    }

    pub fn n_ignored(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Ignored))
            .count()
    }

    pub fn n_with_provenance(&self, provenance: Provenance) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Foreground { provenance: p, .. } if *p == provenance))
            .count()
    }

    /// Keep `keep` uniformly chosen plain-background anchors and ignore the
    /// rest, the way two-stage detector heads subsample their anchor sets.
    /// Foreground, hard-negative, and already-ignored labels are untouched.
    pub fn subsample_background<R: rand::Rng>(&self, keep: usize, rng: &mut R) -> LabelAssignment {
        let bg_indices: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, AnchorLabel::Background))
            .map(|(i, _)| i)
            .collect();
        if bg_indices.len() <= keep {
            return self.clone();
        }
        let mut order = bg_indices;
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut labels = self.labels.clone();
        for &i in order.iter().skip(keep) {
            labels[i] = AnchorLabel::Ignored;
        }
        LabelAssignment { labels }
    }
}

/// Assign every anchor to foreground, background, or ignored:
///
/// - foreground when its best IoU over `gt_fg` reaches `iou_fg` (matched to
///   the argmax box, ties to the lower index);
/// - ignored when instead a `gt_ignore` box reaches `iou_fg`;
/// - ignored when the best IoU over all boxes lands in `[iou_bg, iou_fg)`;
/// - background when every box stays below `iou_bg`.
///
/// Additionally each `gt_fg` box forces its own best-IoU anchor (ties to the
/// lower anchor index) to foreground, provided the IoU is positive; when two
/// boxes force the same anchor, the anchor keeps the box it overlaps most
/// (ties to the earlier box).
pub fn assign_labels(
    anchors: &AnchorGrid,
    gt_fg: &[GtBox],
    gt_ignore: &[Box2D],
    iou_fg: f64,
    iou_bg: f64,
) -> LabelAssignment {
    assign_labels_full(anchors, gt_fg, gt_ignore, &[], iou_fg, iou_bg)
}

/// [`assign_labels`] plus hard-negative forcing: any non-foreground anchor
/// whose IoU with a hard-negative box reaches `iou_fg` becomes explicit
/// background.
pub fn assign_labels_full(
    anchors: &AnchorGrid,
    gt_fg: &[GtBox],
    gt_ignore: &[Box2D],
    hard_negatives: &[Box2D],
    iou_fg: f64,
    iou_bg: f64,
) -> LabelAssignment {
    assert!(iou_bg <= iou_fg, "iou_bg must not exceed iou_fg");
    let boxes = anchors.anchors();
    let mut labels = Vec::with_capacity(boxes.len());
    // IoU of each anchor to its assigned gt, used to arbitrate forced matches.
    let mut fg_iou = vec![0.0f64; boxes.len()];

    for (i, anchor) in boxes.iter().enumerate() {
        let mut best_fg: Option<(usize, f64)> = None;
        for (g, gt) in gt_fg.iter().enumerate() {
            let v = iou2d(anchor, &gt.box2d);
            if best_fg.map_or(true, |(_, bv)| v > bv) {
                best_fg = Some((g, v));
            }
        }
        let best_ignore = gt_ignore
            .iter()
            .map(|b| iou2d(anchor, b))
            .fold(0.0f64, f64::max);
        let (fg_idx, fg_v) = best_fg.unwrap_or((0, 0.0));
        let label = if !gt_fg.is_empty() && fg_v >= iou_fg {
            fg_iou[i] = fg_v;
            AnchorLabel::Foreground {
                gt: fg_idx,
                provenance: gt_fg[fg_idx].provenance,
            }
        } else if best_ignore >= iou_fg || fg_v.max(best_ignore) >= iou_bg {
            AnchorLabel::Ignored
        } else {
            AnchorLabel::Background
        };
        labels.push(label);
    }

    // Force-match each gt box to its best anchor so no target goes untrained.
    for (g, gt) in gt_fg.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, anchor) in boxes.iter().enumerate() {
            let v = iou2d(anchor, &gt.box2d);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let Some((i, v)) = best else { continue };
        if v <= 0.0 {
            continue;
        }
        let replace = match labels[i] {
            AnchorLabel::Foreground { .. } => v > fg_iou[i],
            _ => true,
        };
        if replace {
            labels[i] = AnchorLabel::Foreground {
                gt: g,
                provenance: gt.provenance,
            };
            fg_iou[i] = v;
        }
    }

    for (i, anchor) in boxes.iter().enumerate() {
        if matches!(labels[i], AnchorLabel::Foreground { .. }) {
            continue;
        }
        let hn = hard_negatives
            .iter()
            .map(|b| iou2d(anchor, b))
            .fold(0.0f64, f64::max);
        if hn >= iou_fg {
            labels[i] = AnchorLabel::HardNegative;
        }
    }

    LabelAssignment { labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::build_anchor_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> Box2D {
        Box2D::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn no_gt_means_all_background() {
        let grid = build_anchor_grid(32, 32, 8, &[10.0]).unwrap();
        let assign = assign_labels(&grid, &[], &[], 0.5, 0.4);
        assert_eq!(assign.n_background(), grid.len());
        assert_eq!(assign.len(), grid.len());
    }

    #[test]
    fn anchor_identical_to_gt_is_foreground() {
        let grid = build_anchor_grid(32, 32, 8, &[8.0]).unwrap();
        let gt = GtBox::labeled(*grid.anchors().first().unwrap());
        let assign = assign_labels(&grid, &[gt], &[], 0.5, 0.4);
        match assign.labels()[0] {
            AnchorLabel::Foreground { gt: 0, provenance } => {
                assert_eq!(provenance, Provenance::Labeled)
            }
            other => panic!("expected foreground, got {other:?}"),
        }
    }

    #[test]
    fn counts_partition_all_anchors() {
        let grid = build_anchor_grid(48, 48, 8, &[10.0, 16.0]).unwrap();
        let gt = vec![
            GtBox::labeled(bx(8.0, 8.0, 20.0, 20.0)),
            GtBox::hidden(bx(30.0, 30.0, 42.0, 40.0)),
        ];
        let ignore = vec![bx(10.0, 30.0, 22.0, 44.0)];
        let assign = assign_labels(&grid, &gt, &ignore, 0.5, 0.4);
        assert_eq!(
            assign.n_foreground() + assign.n_background() + assign.n_ignored(),
            grid.len()
        );
        assert!(assign.n_foreground() >= gt.len());
    }

    #[test]
    fn every_gt_gets_at_least_one_anchor() {
        // A tiny gt box below the fg threshold for all anchors still gets its
        // best anchor through forcing.
        let grid = build_anchor_grid(32, 32, 8, &[16.0]).unwrap();
        let gt = vec![GtBox::labeled(bx(3.0, 3.0, 6.0, 6.0))];
        let assign = assign_labels(&grid, &gt, &[], 0.5, 0.4);
        assert_eq!(assign.n_foreground(), 1);
    }

    #[test]
    fn hard_negative_forces_background() {
        let grid = build_anchor_grid(32, 32, 8, &[8.0]).unwrap();
        let hn = vec![*grid.anchors().first().unwrap()];
        let assign = assign_labels_full(&grid, &[], &[], &hn, 0.5, 0.4);
        assert_eq!(assign.labels()[0], AnchorLabel::HardNegative);
        // Counted as background.
        assert_eq!(assign.n_background(), grid.len());
    }

    #[test]
    fn hard_negative_never_overrides_foreground() {
        let grid = build_anchor_grid(32, 32, 8, &[8.0]).unwrap();
        let b = *grid.anchors().first().unwrap();
        let assign = assign_labels_full(&grid, &[GtBox::labeled(b)], &[], &[b], 0.5, 0.4);
        assert!(matches!(
            assign.labels()[0],
            AnchorLabel::Foreground { gt: 0, .. }
        ));
    }

    /// Independent O(M x G) re-derivation of the assignment rules.
    fn assignment_oracle(
        anchors: &[Box2D],
        gt_fg: &[GtBox],
        gt_ignore: &[Box2D],
        iou_fg: f64,
        iou_bg: f64,
    ) -> Vec<AnchorLabel> {
        let iou_matrix: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gt_fg.iter().map(|g| iou2d(a, &g.box2d)).collect())
            .collect();
        let mut labels: Vec<AnchorLabel> = Vec::new();
        let mut assigned_iou: Vec<f64> = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let mut best_g = 0usize;
            let mut best_v = -1.0f64;
            for g in 0..gt_fg.len() {
                if iou_matrix[i][g] > best_v {
                    best_v = iou_matrix[i][g];
                    best_g = g;
                }
            }
            let ig = gt_ignore
                .iter()
                .map(|b| iou2d(anchor, b))
                .fold(0.0f64, f64::max);
            if !gt_fg.is_empty() && best_v >= iou_fg {
                labels.push(AnchorLabel::Foreground {
                    gt: best_g,
                    provenance: gt_fg[best_g].provenance,
                });
                assigned_iou.push(best_v);
            } else if ig >= iou_fg || best_v.max(ig) >= iou_bg {
                labels.push(AnchorLabel::Ignored);
                assigned_iou.push(0.0);
            } else {
                labels.push(AnchorLabel::Background);
                assigned_iou.push(0.0);
            }
        }
        for (g, gt) in gt_fg.iter().enumerate() {
            let mut best_i = 0usize;
            let mut best_v = -1.0f64;
            for i in 0..anchors.len() {
                if iou_matrix[i][g] > best_v {
                    best_v = iou_matrix[i][g];
                    best_i = i;
                }
            }
            if best_v <= 0.0 {
                continue;
            }
            let replace = match labels[best_i] {
                AnchorLabel::Foreground { .. } => best_v > assigned_iou[best_i],
                _ => true,
            };
            if replace {
                labels[best_i] = AnchorLabel::Foreground {
                    gt: g,
                    provenance: gt.provenance,
                };
                assigned_iou[best_i] = best_v;
            }
        }
        labels
    }

    #[test]
    fn random_scenes_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let grid = build_anchor_grid(48, 48, 8, &[8.0, 14.0]).unwrap();
            let n_fg = rng.gen_range(0..5);
            let n_ig = rng.gen_range(0..3);
            let mut rand_box = |rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(0.0..36.0);
                let y = rng.gen_range(0.0..36.0);
                bx(x, y, x + rng.gen_range(4.0..12.0), y + rng.gen_range(4.0..12.0))
            };
            let gt_fg: Vec<GtBox> = (0..n_fg)
                .map(|k| {
                    let b = rand_box(&mut rng);
                    if k % 2 == 0 {
                        GtBox::labeled(b)
                    } else {
                        GtBox::hidden(b)
                    }
                })
                .collect();
            let gt_ignore: Vec<Box2D> = (0..n_ig).map(|_| rand_box(&mut rng)).collect();
            let got = assign_labels(&grid, &gt_fg, &gt_ignore, 0.5, 0.4);
            let want = assignment_oracle(grid.anchors(), &gt_fg, &gt_ignore, 0.5, 0.4);
            assert_eq!(got.labels(), want.as_slice());
        }
    }
}
