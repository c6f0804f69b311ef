//! Point-cloud domain types, pillar voxelization, the pillar feature
//! network, and sequence-consistent augmentation.
//!
//! A frame's points are binned into vertical pillars over a bird's-eye-view
//! grid. Each retained point is expanded to nine features (raw coordinates
//! and reflectance, offsets from the pillar's point mean, offsets from the
//! pillar's cell center), pushed through a shared linear+ReLU layer, and
//! max-reduced per pillar. Scattering the pillar vectors onto the grid gives
//! the pseudo-image the backbone consumes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, Stream};
use crate::scalar::{sum_sorted, Scalar};
use crate::tensor::Tensor;

pub const POINT_FEATURES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub l: f32,
    pub w: f32,
    pub h: f32,
    pub yaw: f32,
    pub class_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointFrame {
    pub points: Vec<Point>,
    pub gt: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<PointFrame>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GridConfig {
    pub x_min: f32,
    pub x_max: f32,
    pub y_min: f32,
    pub y_max: f32,
    pub z_min: f32,
    pub z_max: f32,
    pub dx: f32,
    pub dy: f32,
    pub max_points_per_pillar: usize,
}

impl GridConfig {
    pub fn desk() -> Self {
        GridConfig {
            x_min: -6.4,
            x_max: 6.4,
            y_min: -6.4,
            y_max: 6.4,
            z_min: -5.0,
            z_max: 3.0,
            dx: 0.2,
            dy: 0.2,
            max_points_per_pillar: 20,
        }
    }

    /// Cell count along one axis; the extent must divide into a power of two.
    fn cells(lo: f32, hi: f32, step: f32, axis: &str) -> Result<usize> {
        if !(step > 0.0) || !(hi > lo) {
            return Err(Error::Config(format!("{axis}: degenerate range or cell size")));
        }
        let ratio = ((hi - lo) / step) as f64;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "{axis}: extent {} not a whole multiple of cell size {step}",
                hi - lo
            )));
        }
        let n = n as usize;
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Config(format!("{axis}: cell count {n} must be a power of two")));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.max_points_per_pillar == 0 {
            return Err(Error::Config("max_points_per_pillar must be at least 1".into()));
        }
        if !(self.z_max > self.z_min) {
            return Err(Error::Config("z range is degenerate".into()));
        }
        let h0 = Self::cells(self.y_min, self.y_max, self.dy, "y")?;
        let w0 = Self::cells(self.x_min, self.x_max, self.dx, "x")?;
        Ok((h0, w0))
    }

    pub fn h0(&self) -> usize {
        Self::cells(self.y_min, self.y_max, self.dy, "y").expect("validated grid")
    }

    pub fn w0(&self) -> usize {
        Self::cells(self.x_min, self.x_max, self.dx, "x").expect("validated grid")
    }

    /// Flat cell index (row-major, row = y bin, col = x bin), or None if the
    /// point falls outside the grid. x and y bins are half-open on the high
    /// side; z is closed.
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        if !(p.x >= self.x_min && p.x < self.x_max) {
            return None;
        }
        if !(p.y >= self.y_min && p.y < self.y_max) {
            return None;
        }
        if !(p.z >= self.z_min && p.z <= self.z_max) {
            return None;
        }
        let col = (((p.x - self.x_min) / self.dx) as f64).floor() as usize;
        let row = (((p.y - self.y_min) / self.dy) as f64).floor() as usize;
        let (h0, w0) = (self.h0(), self.w0());
        let col = col.min(w0 - 1);
        let row = row.min(h0 - 1);
        Some(row * w0 + col)
    }

    /// BEV center of a flat cell index.
    pub fn cell_center(&self, cell: usize) -> (f32, f32) {
        let w0 = self.w0();
        let row = cell / w0;
        let col = cell % w0;
        (
            self.x_min + (col as f32 + 0.5) * self.dx,
            self.y_min + (row as f32 + 0.5) * self.dy,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Pillar {
    pub cell: usize,
    pub points: Vec<Point>,
}

/// Occupied pillars in ascending cell order.
#[derive(Clone, Debug, Default)]
pub struct PillarSet {
    pub pillars: Vec<Pillar>,
}

impl PillarSet {
    pub fn total_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

/// Bins a frame into pillars. Out-of-range points are dropped. Pillars over
/// the per-pillar cap keep a seeded random subset; the subsampling stream is
/// keyed by the cell index, so unrelated pillars never perturb each other.
pub fn voxelize(frame: &PointFrame, cfg: &GridConfig, seed: u64) -> Result<PillarSet> {
    cfg.validate()?;
    let mut by_cell: BTreeMap<usize, Vec<Point>> = BTreeMap::new();
    for p in &frame.points {
        if let Some(cell) = cfg.cell_of(p) {
            by_cell.entry(cell).or_default().push(*p);
        }
    }
    let cap = cfg.max_points_per_pillar;
    let mut pillars = Vec::with_capacity(by_cell.len());
    for (cell, points) in by_cell {
        let points = if points.len() <= cap {
            points
        } else {
            let mut rng = rng::stream_indexed(seed, "voxelize/subsample", cell as u64);
            let mut idx: Vec<usize> = (0..points.len()).collect();
            for i in 0..cap {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            let mut keep = idx[..cap].to_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| points[i]).collect()
        };
        pillars.push(Pillar { cell, points });
    }
    Ok(PillarSet { pillars })
}

/// Per-point feature rows plus segment bounds and cell targets for the
/// downstream reduce/scatter. Pillar means use order-independent summation,
/// so any permutation of the input points yields bit-identical rows per
/// pillar (in some row order), and the post-max pillar vector is unchanged.
pub fn point_features<S: Scalar>(
    ps: &PillarSet,
    cfg: &GridConfig,
) -> Option<(Tensor<S>, Vec<usize>, Vec<usize>)> {
    let total = ps.total_points();
    if total == 0 {
        return None;
    }
    let mut data = Vec::with_capacity(total * POINT_FEATURES);
    let mut bounds = Vec::with_capacity(ps.pillars.len() + 1);
    let mut cells = Vec::with_capacity(ps.pillars.len());
    bounds.push(0);
    for pillar in &ps.pillars {
        let n = S::from_usize(pillar.points.len()).unwrap();
        let mut xs: Vec<S> = pillar.points.iter().map(|p| S::from_f32c(p.x)).collect();
        let mut ys: Vec<S> = pillar.points.iter().map(|p| S::from_f32c(p.y)).collect();
        let mut zs: Vec<S> = pillar.points.iter().map(|p| S::from_f32c(p.z)).collect();
        let mx = sum_sorted(&mut xs) / n;
        let my = sum_sorted(&mut ys) / n;
        let mz = sum_sorted(&mut zs) / n;
        let (cx, cy) = cfg.cell_center(pillar.cell);
        let (cx, cy) = (S::from_f32c(cx), S::from_f32c(cy));
        for p in &pillar.points {
            let (x, y, z) = (S::from_f32c(p.x), S::from_f32c(p.y), S::from_f32c(p.z));
            data.extend_from_slice(&[
                x,
                y,
                z,
                S::from_f32c(p.r),
                x - mx,
                y - my,
                z - mz,
                x - cx,
                y - cy,
            ]);
        }
        bounds.push(bounds.last().unwrap() + pillar.points.len());
        cells.push(pillar.cell);
    }
    Some((
        Tensor::from_vec(&[total, POINT_FEATURES], data).unwrap(),
        bounds,
        cells,
    ))
}

/// Shared linear + ReLU per point, max over each pillar, scatter onto the
/// grid. Registers parameters `pfn.w` and `pfn.b`. A frame with no retained
/// points yields an all-zero pseudo-image.
pub fn pfn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    ps: &PillarSet,
    cfg: &GridConfig,
    c0: usize,
) -> Result<VarId> {
    let (h0, w0) = cfg.validate()?;
    let Some((feat, bounds, cells)) = point_features::<S>(ps, cfg) else {
        return Ok(tape.constant(Tensor::zeros(&[c0, h0, w0])?));
    };
    let w = tape.param(store, "pfn.w")?;
    let b = tape.param(store, "pfn.b")?;
    let x = tape.constant(feat);
    let lin = tape.linear(x, w, b)?;
    let act = tape.relu(lin)?;
    let pooled = tape.segment_max(act, &bounds)?;
    tape.scatter_pillars(pooled, Arc::new(cells), c0, h0, w0)
}

pub fn register_pfn_params<S: Scalar>(store: &mut ParamStore<S>, c0: usize, seed: u64) -> Result<()> {
    store.init_trunc_normal("pfn.w", &[POINT_FEATURES, c0], 0.02, seed)?;
    store.init_zeros("pfn.b", &[c0])
}

// ---- augmentation ----

#[derive(Clone, Copy, Debug)]
pub struct AugConfig {
    pub enabled: bool,
    pub flip_x: bool,
    pub flip_y: bool,
    pub rot_max: f32,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enabled: true,
            flip_x: true,
            flip_y: true,
            rot_max: 0.3925,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

/// One similarity transform applied identically to every frame of a
/// sequence: optional axis flips, a z-rotation, and a global scale.
#[derive(Clone, Copy, Debug)]
pub struct Transform {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rot: f32,
    pub scale: f32,
}

impl Transform {
    pub fn identity() -> Self {
        Transform { flip_x: false, flip_y: false, rot: 0.0, scale: 1.0 }
    }

    pub fn draw(cfg: &AugConfig, rng: &mut Stream) -> Self {
        Transform {
            flip_x: cfg.flip_x && rng.gen_bool(0.5),
            flip_y: cfg.flip_y && rng.gen_bool(0.5),
            rot: rng::uniform(rng, -cfg.rot_max as f64, cfg.rot_max as f64) as f32,
            scale: rng::uniform(rng, cfg.scale_min as f64, cfg.scale_max as f64) as f32,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let (mut x, mut y) = (p.x, p.y);
        if self.flip_x {
            x = -x;
        }
        if self.flip_y {
            y = -y;
        }
        let (s, c) = self.rot.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        Point { x: rx * self.scale, y: ry * self.scale, z: p.z * self.scale, r: p.r }
    }

    pub fn apply_box(&self, b: &GtBox) -> GtBox {
        let (mut x, mut y, mut yaw) = (b.x, b.y, b.yaw);
        if self.flip_x {
            x = -x;
            yaw = wrap_angle(std::f32::consts::PI - yaw);
        }
        if self.flip_y {
            y = -y;
            yaw = wrap_angle(-yaw);
        }
        let (s, c) = self.rot.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        GtBox {
            x: rx * self.scale,
            y: ry * self.scale,
            z: b.z * self.scale,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: wrap_angle(yaw + self.rot),
            class_id: b.class_id,
        }
    }

    pub fn apply_sequence(&self, seq: &SequenceSample) -> SequenceSample {
        let frames = seq
            .frames
            .iter()
            .map(|f| PointFrame {
                points: f.points.iter().map(|p| self.apply_point(p)).collect(),
                gt: f.gt.iter().map(|b| self.apply_box(b)).collect(),
            })
            .collect();
        SequenceSample { frames, target: seq.target }
    }
}

pub fn augment_sequence(seq: &SequenceSample, cfg: &AugConfig, rng: &mut Stream) -> SequenceSample {
    if !cfg.enabled {
        return seq.clone();
    }
    Transform::draw(cfg, rng).apply_sequence(seq)
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f32) -> f32 {
    let two_pi = 2.0 * std::f32::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f32::consts::PI {
        a += two_pi;
    } else if a > std::f32::consts::PI {
        a -= two_pi;
    }
    a
}

/// Membership test in the box frame, with every half-extent inflated.
pub fn point_in_box(p: &Point, b: &GtBox, inflate: f32) -> bool {
    let (dx, dy, dz) = (p.x - b.x, p.y - b.y, p.z - b.z);
    let (s, c) = (-b.yaw).sin_cos();
    let lx = c * dx - s * dy;
    let ly = s * dx + c * dy;
    lx.abs() <= b.l / 2.0 + inflate && ly.abs() <= b.w / 2.0 + inflate && dz.abs() <= b.h / 2.0 + inflate
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f32, y: f32, z: f32) -> Point {
        Point { x, y, z, r: 0.5 }
    }

    #[test]
    fn desk_grid_is_64_by_64() {
        let (h0, w0) = GridConfig::desk().validate().unwrap();
        assert_eq!((h0, w0), (64, 64));
    }

    #[test]
    fn non_power_of_two_grid_is_rejected() {
        let mut cfg = GridConfig::desk();
        cfg.x_max = 5.8; // 61 columns
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn point_at_0p1_lands_in_column_32() {
        let cfg = GridConfig::desk();
        let cell = cfg.cell_of(&pt(0.1, 0.1, 0.0)).unwrap();
        assert_eq!(cell % 64, 32);
        assert_eq!(cell / 64, 32);
    }

    #[test]
    fn out_of_range_z_is_dropped() {
        let cfg = GridConfig::desk();
        assert!(cfg.cell_of(&pt(0.0, 0.0, 9.0)).is_none());
        let frame = PointFrame { points: vec![pt(0.0, 0.0, 9.0)], gt: vec![] };
        assert_eq!(voxelize(&frame, &cfg, 0).unwrap().total_points(), 0);
    }

    #[test]
    fn overflow_subsamples_to_cap_deterministically() {
        let cfg = GridConfig::desk();
        let points: Vec<Point> = (0..50).map(|i| pt(0.05, 0.05, -1.0 + 0.01 * i as f32)).collect();
        let frame = PointFrame { points, gt: vec![] };
        let a = voxelize(&frame, &cfg, 7).unwrap();
        let b = voxelize(&frame, &cfg, 7).unwrap();
        assert_eq!(a.pillars[0].points.len(), 20);
        assert_eq!(a.pillars[0].points, b.pillars[0].points);
        let c = voxelize(&frame, &cfg, 8).unwrap();
        assert_ne!(a.pillars[0].points, c.pillars[0].points, "distinct seeds should differ");
    }

    #[test]
    fn single_point_pillar_has_zero_mean_offsets() {
        let cfg = GridConfig::desk();
        let frame = PointFrame { points: vec![pt(0.1, 0.1, 0.3)], gt: vec![] };
        let ps = voxelize(&frame, &cfg, 0).unwrap();
        let (feat, bounds, _) = point_features::<f64>(&ps, &cfg).unwrap();
        assert_eq!(bounds, vec![0, 1]);
        let row = feat.data();
        assert_eq!(&row[4..7], &[0.0, 0.0, 0.0]);
        // offsets from the cell center at (0.1, 0.1): the cell spans
        // [0.0, 0.2) in both axes, so the center is exactly the point.
        assert!(row[7].abs() < 1e-6 && row[8].abs() < 1e-6);
    }

    fn pfn_output(frame: &PointFrame) -> Tensor<f64> {
        let cfg = GridConfig::desk();
        let mut store = ParamStore::<f64>::new();
        register_pfn_params(&mut store, 4, 99).unwrap();
        let ps = voxelize(frame, &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let out = pfn_forward(&mut tape, &store, &ps, &cfg, 4).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn empty_frame_gives_zero_pseudo_image() {
        let out = pfn_output(&PointFrame::default());
        assert_eq!(out.dims(), &[4, 64, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_point_leaves_pillar_feature_unchanged() {
        let single = PointFrame { points: vec![pt(0.1, 0.1, 0.3)], gt: vec![] };
        let doubled =
            PointFrame { points: vec![pt(0.1, 0.1, 0.3), pt(0.1, 0.1, 0.3)], gt: vec![] };
        assert!(pfn_output(&single).bit_eq(&pfn_output(&doubled)));
    }

    #[test]
    fn pfn_is_point_order_invariant_below_cap() {
        let mut points = Vec::new();
        let mut r = rng::stream(3, "test/points");
        for _ in 0..200 {
            points.push(Point {
                x: rng::uniform(&mut r, -6.0, 6.0) as f32,
                y: rng::uniform(&mut r, -6.0, 6.0) as f32,
                z: rng::uniform(&mut r, -1.0, 1.0) as f32,
                r: rng::uniform(&mut r, 0.0, 1.0) as f32,
            });
        }
        let frame = PointFrame { points: points.clone(), gt: vec![] };
        points.reverse();
        points.swap(0, 57);
        let shuffled = PointFrame { points, gt: vec![] };
        assert!(pfn_output(&frame).bit_eq(&pfn_output(&shuffled)));
    }

    #[test]
    fn flip_x_twice_is_identity() {
        let t = Transform { flip_x: true, flip_y: false, rot: 0.0, scale: 1.0 };
        let b = GtBox { x: 1.0, y: 2.0, z: 0.1, l: 4.0, w: 2.0, h: 1.5, yaw: 0.7, class_id: 0 };
        let seq = SequenceSample {
            frames: vec![PointFrame { points: vec![pt(1.0, 2.0, 0.1)], gt: vec![b] }],
            target: 0,
        };
        let twice = t.apply_sequence(&t.apply_sequence(&seq));
        let p0 = twice.frames[0].points[0];
        assert!((p0.x - 1.0).abs() < 1e-5 && (p0.y - 2.0).abs() < 1e-5);
        let b0 = twice.frames[0].gt[0];
        assert!((b0.x - b.x).abs() < 1e-5);
        assert!(wrap_angle(b0.yaw - b.yaw).abs() < 1e-5);
    }

    #[test]
    fn identity_transform_is_identity() {
        let seq = SequenceSample {
            frames: vec![PointFrame { points: vec![pt(1.0, 2.0, 0.1)], gt: vec![] }],
            target: 0,
        };
        assert_eq!(Transform::identity().apply_sequence(&seq), seq);
    }

    #[test]
    fn augmentation_preserves_box_membership() {
        let b = GtBox { x: 1.0, y: -2.0, z: 0.0, l: 4.0, w: 2.0, h: 1.6, yaw: 0.5, class_id: 0 };
        // corner-ish interior points of the box
        let mut pts = Vec::new();
        for &(fx, fy, fz) in
            &[(0.45_f32, 0.45_f32, 0.45_f32), (-0.45, 0.4, -0.3), (0.0, 0.0, 0.0), (0.3, -0.45, 0.2)]
        {
            let (s, c) = b.yaw.sin_cos();
            let (lx, ly) = (fx * b.l, fy * b.w);
            pts.push(Point {
                x: b.x + c * lx - s * ly,
                y: b.y + s * lx + c * ly,
                z: b.z + fz * b.h,
                r: 0.0,
            });
        }
        for p in &pts {
            assert!(point_in_box(p, &b, 1e-4));
        }
        let t = Transform { flip_x: true, flip_y: true, rot: 0.3, scale: 1.04 };
        let tb = t.apply_box(&b);
        for p in &pts {
            assert!(point_in_box(&t.apply_point(p), &tb, 1e-4));
        }
    }

    #[test]
    fn rotated_box_yaw_tracks_point_rotation() {
        let b = GtBox { x: 2.0, y: 1.0, z: 0.0, l: 3.0, w: 1.0, h: 1.0, yaw: 0.2, class_id: 1 };
        // nose point on the +x face of the box
        let (s, c) = b.yaw.sin_cos();
        let nose = Point { x: b.x + c * b.l / 2.0, y: b.y + s * b.l / 2.0, z: 0.0, r: 0.0 };
        let t = Transform { flip_x: false, flip_y: false, rot: 0.35, scale: 1.0 };
        let tb = t.apply_box(&b);
        let tn = t.apply_point(&nose);
        let (ts, tc) = tb.yaw.sin_cos();
        assert!((tn.x - (tb.x + tc * tb.l / 2.0)).abs() < 1e-5);
        assert!((tn.y - (tb.y + ts * tb.l / 2.0)).abs() < 1e-5);
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        for a in [-7.0_f32, -3.2, 0.0, 3.2, 7.0, 31.4] {
            let w = wrap_angle(a);
            assert!(w > -std::f32::consts::PI - 1e-6 && w <= std::f32::consts::PI + 1e-6);
            let turns = (w - a) / (2.0 * std::f32::consts::PI);
            assert!((turns - turns.round()).abs() < 1e-4);
        }
    }
}
