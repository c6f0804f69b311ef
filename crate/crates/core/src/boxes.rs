//! Anchor grid, target assignment, box residual coding, and NMS.
//!
//! Anchors live on the detection head's output grid: per location, one
//! anchor per class at yaw 0 and one at yaw pi/2, sized by per-class means
//! of the training ground truth. Assignment and NMS both use IoU of
//! axis-aligned BEV footprints (the tightest AABB of the rotated rectangle),
//! which is exact for the anchor yaws and a close proxy for ground truth.

use crate::error::{Error, Result};
use crate::pillars::{wrap_angle, GridConfig, GtBox, SequenceSample};

pub const YAWS_PER_CLASS: usize = 2;
pub const BOX_PARAMS: usize = 7;

#[derive(Clone, Copy, Debug)]
pub struct Anchor {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub l: f32,
    pub w: f32,
    pub h: f32,
    pub yaw: f32,
    pub class_id: u32,
}

/// Per-class anchor statistics: length, width, height, vertical center.
pub type ClassStats = Vec<[f32; 4]>;

#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub h_out: usize,
    pub w_out: usize,
    pub classes: usize,
    pub stats: ClassStats,
    x_min: f32,
    y_min: f32,
    step_x: f32,
    step_y: f32,
}

impl AnchorGrid {
    pub fn new(grid: &GridConfig, h_out: usize, w_out: usize, stats: ClassStats) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::Config("anchor grid needs at least one class".into()));
        }
        if h_out == 0 || w_out == 0 {
            return Err(Error::Config("anchor grid extents must be positive".into()));
        }
        Ok(AnchorGrid {
            h_out,
            w_out,
            classes: stats.len(),
            stats,
            x_min: grid.x_min,
            y_min: grid.y_min,
            step_x: (grid.x_max - grid.x_min) / w_out as f32,
            step_y: (grid.y_max - grid.y_min) / h_out as f32,
        })
    }

    /// Anchors per grid location.
    pub fn per_location(&self) -> usize {
        self.classes * YAWS_PER_CLASS
    }

    pub fn len(&self) -> usize {
        self.h_out * self.w_out * self.per_location()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global index layout: location-major, then class, then yaw slot.
    pub fn anchor(&self, idx: usize) -> Anchor {
        let a = idx % self.per_location();
        let loc = idx / self.per_location();
        let (row, col) = (loc / self.w_out, loc % self.w_out);
        let class = a / YAWS_PER_CLASS;
        let yaw_slot = a % YAWS_PER_CLASS;
        let s = self.stats[class];
        Anchor {
            x: self.x_min + (col as f32 + 0.5) * self.step_x,
            y: self.y_min + (row as f32 + 0.5) * self.step_y,
            z: s[3],
            l: s[0],
            w: s[1],
            h: s[2],
            yaw: if yaw_slot == 0 { 0.0 } else { std::f32::consts::FRAC_PI_2 },
            class_id: class as u32,
        }
    }
}

/// Tightest axis-aligned bounds of a rotated BEV rectangle.
pub fn footprint(x: f32, y: f32, l: f32, w: f32, yaw: f32) -> [f32; 4] {
    let (s, c) = yaw.sin_cos();
    let ex = (c.abs() * l + s.abs() * w) / 2.0;
    let ey = (s.abs() * l + c.abs() * w) / 2.0;
    [x - ex, y - ey, x + ex, y + ey]
}

pub fn aabb_iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn gt_footprint(b: &GtBox) -> [f32; 4] {
    footprint(b.x, b.y, b.l, b.w, b.yaw)
}

pub fn anchor_footprint(a: &Anchor) -> [f32; 4] {
    footprint(a.x, a.y, a.l, a.w, a.yaw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct TargetAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Residual targets and direction bits for positive anchors, keyed by
    /// global anchor index.
    pub residuals: Vec<(usize, [f32; BOX_PARAMS], usize)>,
}

impl TargetAssignment {
    pub fn n_pos(&self) -> usize {
        self.residuals.len()
    }
}

/// Diagonal-normalized residuals from an anchor to a matched box. The yaw
/// residual is the sine of the angle difference, so it forgets any flip by
/// pi; the companion direction bit records whether the box yaw is positive.
pub fn encode_box(anchor: &Anchor, gt: &GtBox) -> ([f32; BOX_PARAMS], usize) {
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    (
        [
            (gt.x - anchor.x) / d,
            (gt.y - anchor.y) / d,
            (gt.z - anchor.z) / anchor.h,
            (gt.l / anchor.l).ln(),
            (gt.w / anchor.w).ln(),
            (gt.h / anchor.h).ln(),
            (gt.yaw - anchor.yaw).sin(),
        ],
        usize::from(gt.yaw > 0.0),
    )
}

/// Inverts `encode_box` and applies the direction correction: when the
/// classifier's sign disagrees with the decoded yaw, the yaw is rotated by
/// pi. Exact inverse whenever the true yaw lies within pi/2 of the anchor's.
pub fn decode_box(anchor: &Anchor, delta: &[f32; BOX_PARAMS], dir_positive: bool) -> GtBox {
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let mut yaw = wrap_angle(anchor.yaw + delta[6].clamp(-1.0, 1.0).asin());
    if (yaw > 0.0) != dir_positive {
        yaw = wrap_angle(yaw + std::f32::consts::PI);
    }
    GtBox {
        x: anchor.x + delta[0] * d,
        y: anchor.y + delta[1] * d,
        z: anchor.z + delta[2] * anchor.h,
        l: anchor.l * delta[3].exp(),
        w: anchor.w * delta[4].exp(),
        h: anchor.h * delta[5].exp(),
        yaw,
        class_id: anchor.class_id,
    }
}

/// IoU-threshold assignment with per-box force matching: anchors at or above
/// `pos_thr` against a same-class box are positive, anchors strictly below
/// `neg_thr` against everything are negative, the rest are ignored. Every
/// box with any overlap also claims its best same-class anchor.
pub fn assign_targets(
    grid: &AnchorGrid,
    gts: &[GtBox],
    pos_thr: f32,
    neg_thr: f32,
) -> TargetAssignment {
    let n = grid.len();
    let gt_boxes: Vec<[f32; 4]> = gts.iter().map(gt_footprint).collect();
    let mut best_iou = vec![0.0f32; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best_iou = vec![0.0f32; gts.len()];
    let mut gt_best_anchor = vec![usize::MAX; gts.len()];
    for idx in 0..n {
        let a = grid.anchor(idx);
        let af = anchor_footprint(&a);
        for (j, g) in gts.iter().enumerate() {
            if g.class_id != a.class_id {
                continue;
            }
            let iou = aabb_iou(&af, &gt_boxes[j]);
            if iou > best_iou[idx] {
                best_iou[idx] = iou;
                best_gt[idx] = j;
            }
            if iou > gt_best_iou[j] {
                gt_best_iou[j] = iou;
                gt_best_anchor[j] = idx;
            }
        }
    }
    let mut labels = vec![AnchorLabel::Negative; n];
    for idx in 0..n {
        if best_gt[idx] != usize::MAX && best_iou[idx] >= pos_thr {
            labels[idx] = AnchorLabel::Positive(best_gt[idx]);
        } else if best_iou[idx] >= neg_thr {
            labels[idx] = AnchorLabel::Ignore;
        }
    }
    for (j, &idx) in gt_best_anchor.iter().enumerate() {
        if idx != usize::MAX {
            labels[idx] = AnchorLabel::Positive(j);
        }
    }
    let mut residuals = Vec::new();
    for (idx, label) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(j) = label {
            let (delta, bit) = encode_box(&grid.anchor(idx), &gts[*j]);
            residuals.push((idx, delta, bit));
        }
    }
    TargetAssignment { labels, residuals }
}

#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub boxp: GtBox,
    pub score: f32,
}

/// Greedy per-class NMS over score-sorted candidates. Ties sort by the
/// candidate's original index, so the result is deterministic.
pub fn nms(dets: Vec<Detection>, iou_thr: f32, max_out: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut out: Vec<Detection> = Vec::new();
    'next: for &i in &order {
        if out.len() >= max_out {
            break;
        }
        let fi = gt_footprint(&dets[i].boxp);
        for k in &out {
            if k.boxp.class_id == dets[i].boxp.class_id
                && aabb_iou(&fi, &gt_footprint(&k.boxp)) > iou_thr
            {
                continue 'next;
            }
        }
        out.push(dets[i]);
    }
    out
}

/// Per-class mean of (l, w, h, z) over every ground-truth box in the target
/// frames; classes with no boxes fall back to the provided defaults.
pub fn class_stats(samples: &[SequenceSample], classes: usize, defaults: &ClassStats) -> ClassStats {
    let mut sums = vec![[0.0f64; 4]; classes];
    let mut counts = vec![0usize; classes];
    for s in samples {
        for b in &s.frames[s.target].gt {
            let k = b.class_id as usize;
            if k < classes {
                sums[k][0] += b.l as f64;
                sums[k][1] += b.w as f64;
                sums[k][2] += b.h as f64;
                sums[k][3] += b.z as f64;
                counts[k] += 1;
            }
        }
    }
    (0..classes)
        .map(|k| {
            if counts[k] == 0 {
                defaults[k.min(defaults.len() - 1)]
            } else {
                let n = counts[k] as f64;
                [
                    (sums[k][0] / n) as f32,
                    (sums[k][1] / n) as f32,
                    (sums[k][2] / n) as f32,
                    (sums[k][3] / n) as f32,
                ]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_grid() -> AnchorGrid {
        AnchorGrid::new(
            &GridConfig::desk(),
            32,
            32,
            vec![[4.2, 1.9, 1.6, -0.5], [0.8, 0.8, 1.7, -0.3]],
        )
        .unwrap()
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let f = footprint(1.0, 2.0, 4.0, 2.0, 0.3);
        assert!((aabb_iou(&f, &f) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = footprint(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = footprint(5.0, 5.0, 1.0, 1.0, 0.0);
        assert_eq!(aabb_iou(&a, &b), 0.0);
    }

    #[test]
    fn unit_squares_offset_half_give_third() {
        let a = footprint(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = footprint(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((aabb_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn quarter_turn_swaps_footprint_extents() {
        let f = footprint(0.0, 0.0, 4.0, 2.0, std::f32::consts::FRAC_PI_2);
        assert!((f[2] - f[0] - 2.0).abs() < 1e-5);
        assert!((f[3] - f[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn anchor_layout_covers_grid() {
        let g = test_grid();
        assert_eq!(g.len(), 32 * 32 * 4);
        let a0 = g.anchor(0);
        assert_eq!(a0.class_id, 0);
        assert_eq!(a0.yaw, 0.0);
        assert!((a0.x - (-6.4 + 0.2)).abs() < 1e-6);
        let a3 = g.anchor(3);
        assert_eq!(a3.class_id, 1);
        assert!(a3.yaw > 1.0);
        let a_last = g.anchor(g.len() - 1);
        assert!((a_last.x - 6.2).abs() < 1e-5 && (a_last.y - 6.2).abs() < 1e-5);
    }

    #[test]
    fn gt_equal_to_anchor_is_positive_with_zero_residuals() {
        let g = test_grid();
        let a = g.anchor(40);
        let gt = GtBox {
            x: a.x,
            y: a.y,
            z: a.z,
            l: a.l,
            w: a.w,
            h: a.h,
            yaw: a.yaw,
            class_id: a.class_id,
        };
        let t = assign_targets(&g, &[gt], 0.6, 0.45);
        assert_eq!(t.labels[40], AnchorLabel::Positive(0));
        let (idx, delta, _) = t.residuals.iter().find(|(i, _, _)| *i == 40).unwrap();
        assert_eq!(*idx, 40);
        assert!(delta.iter().all(|d| d.abs() < 1e-6), "{delta:?}");
    }

    #[test]
    fn empty_gt_list_marks_everything_negative() {
        let g = test_grid();
        let t = assign_targets(&g, &[], 0.6, 0.45);
        assert!(t.labels.iter().all(|&l| l == AnchorLabel::Negative));
        assert_eq!(t.n_pos(), 0);
    }

    #[test]
    fn force_match_claims_best_anchor_even_at_high_threshold() {
        let g = test_grid();
        let mut r = crate::rng::stream(5, "test/forcematch");
        for _ in 0..20 {
            let gts: Vec<GtBox> = (0..3)
                .map(|i| GtBox {
                    x: crate::rng::uniform(&mut r, -5.0, 5.0) as f32,
                    y: crate::rng::uniform(&mut r, -5.0, 5.0) as f32,
                    z: -0.4,
                    l: if i == 0 { 4.0 } else { 0.9 },
                    w: if i == 0 { 1.8 } else { 0.8 },
                    h: 1.6,
                    yaw: crate::rng::uniform(&mut r, -3.1, 3.1) as f32,
                    class_id: u32::from(i != 0),
                })
                .collect();
            let t = assign_targets(&g, &gts, 0.99, 0.45);
            for j in 0..gts.len() {
                assert!(
                    t.labels.iter().any(|&l| l == AnchorLabel::Positive(j)),
                    "gt {j} unmatched"
                );
            }
        }
    }

    #[test]
    fn encode_decode_is_identity_for_small_yaw_residuals() {
        let g = test_grid();
        let mut r = crate::rng::stream(6, "test/roundtrip");
        for i in 0..200 {
            let a = g.anchor(i * 17 % g.len());
            let dyaw = crate::rng::uniform(&mut r, -1.55, 1.55) as f32;
            let gt = GtBox {
                x: a.x + crate::rng::uniform(&mut r, -0.5, 0.5) as f32,
                y: a.y + crate::rng::uniform(&mut r, -0.5, 0.5) as f32,
                z: a.z + crate::rng::uniform(&mut r, -0.3, 0.3) as f32,
                l: a.l * crate::rng::uniform(&mut r, 0.8, 1.2) as f32,
                w: a.w * crate::rng::uniform(&mut r, 0.8, 1.2) as f32,
                h: a.h * crate::rng::uniform(&mut r, 0.8, 1.2) as f32,
                yaw: wrap_angle(a.yaw + dyaw),
                class_id: a.class_id,
            };
            let (delta, bit) = encode_box(&a, &gt);
            let back = decode_box(&a, &delta, bit == 1);
            assert!((back.x - gt.x).abs() < 1e-5);
            assert!((back.y - gt.y).abs() < 1e-5);
            assert!((back.z - gt.z).abs() < 1e-5);
            assert!((back.l - gt.l).abs() < 1e-5);
            assert!((back.w - gt.w).abs() < 1e-5);
            assert!((back.h - gt.h).abs() < 1e-5);
            assert!(wrap_angle(back.yaw - gt.yaw).abs() < 1e-4, "yaw {} vs {}", back.yaw, gt.yaw);
        }
    }

    #[test]
    fn decode_preserves_sine_for_any_yaw() {
        let g = test_grid();
        let a = g.anchor(10);
        for yaw in [-3.0f32, -2.0, 2.0, 3.0] {
            let gt = GtBox { x: a.x, y: a.y, z: a.z, l: a.l, w: a.w, h: a.h, yaw, class_id: 0 };
            let (delta, bit) = encode_box(&a, &gt);
            let back = decode_box(&a, &delta, bit == 1);
            assert!((back.l - gt.l).abs() < 1e-5);
            // the sine of the pre-flip residual always survives encoding
            assert!(((back.yaw - a.yaw).sin().abs() - (yaw - a.yaw).sin().abs()) < 1e-4);
        }
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = GtBox { x: 0.0, y: 0.0, z: 0.0, l: 4.0, w: 2.0, h: 1.5, yaw: 0.0, class_id: 0 };
        let dets = vec![
            Detection { boxp: b, score: 0.9 },
            Detection { boxp: b, score: 0.8 },
            Detection { boxp: b, score: 0.7 },
        ];
        let kept = nms(dets, 0.5, 100);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nms_is_per_class() {
        let mut b0 = GtBox { x: 0.0, y: 0.0, z: 0.0, l: 4.0, w: 2.0, h: 1.5, yaw: 0.0, class_id: 0 };
        let mut dets = vec![Detection { boxp: b0, score: 0.9 }];
        b0.class_id = 1;
        dets.push(Detection { boxp: b0, score: 0.8 });
        assert_eq!(nms(dets, 0.5, 100).len(), 2);
    }

    #[test]
    fn class_stats_mean_and_fallback() {
        use crate::pillars::PointFrame;
        let mk = |l: f32| GtBox { x: 0.0, y: 0.0, z: -0.5, l, w: 2.0, h: 1.5, yaw: 0.0, class_id: 0 };
        let s = SequenceSample {
            frames: vec![PointFrame { points: vec![], gt: vec![mk(4.0), mk(5.0)] }],
            target: 0,
        };
        let defaults = vec![[1.0, 1.0, 1.0, 0.0], [0.8, 0.8, 1.7, -0.3]];
        let stats = class_stats(&[s], 2, &defaults);
        assert!((stats[0][0] - 4.5).abs() < 1e-6);
        assert_eq!(stats[1], defaults[1]);
    }
}
