//! Synthetic Lidar sequence generator and the LSEQ dataset format.
//!
//! Scenes hold a few rigid boxes (car-like and pedestrian-like) moving at
//! constant velocity and yaw rate over a handful of frames. A virtual sensor
//! above the origin samples points on the 2-3 faces it can see, with density
//! falling off as 1/range^2 (clamped), bounded Gaussian surface noise, and
//! uniform ground clutter. Occlusion dropout removes an object's points from
//! some non-target frames so that temporal context carries real signal.

use std::fs;
use std::path::Path;

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::pillars::{wrap_angle, GridConfig, GtBox, Point, PointFrame, SequenceSample};
use crate::rng;

/// Sensor sits above the origin looking down at the scene.
pub const SENSOR_Z: f64 = 1.5;
/// Scene floor; boxes rest on it and clutter scatters just above it.
pub const GROUND_Z: f64 = -1.0;
/// Surface noise scale (standard deviation, meters).
pub const NOISE_STD: f64 = 0.02;
/// Objects may never enter this radius around the sensor column.
pub const SENSOR_CLEARANCE: f32 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug)]
pub struct ClassTemplate {
    pub l: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub grid: GridConfig,
    pub min_objects: usize,
    pub max_objects: usize,
    pub templates: Vec<ClassTemplate>,
    pub size_jitter: f32,
    pub speed_min: f32,
    pub speed_max: f32,
    pub yaw_rate_max: f32,
    pub density: f32,
    pub clutter_points: usize,
    pub occlusion_dropout: f32,
    pub frames: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        SceneConfig {
            grid: GridConfig::desk(),
            min_objects: 2,
            max_objects: 4,
            templates: vec![
                ClassTemplate { l: 4.2, w: 1.9, h: 1.6 },
                ClassTemplate { l: 0.8, w: 0.8, h: 1.7 },
            ],
            size_jitter: 0.1,
            speed_min: 0.05,
            speed_max: 0.3,
            yaw_rate_max: 0.1,
            density: 80.0,
            clutter_points: 256,
            occlusion_dropout: 0.0,
            frames: 3,
            seed: 0,
        }
    }

    /// Companion of the mini model config: a 3.2 m world with sub-meter
    /// objects moving slowly enough to stay inside it.
    pub fn mini() -> Self {
        let mut cfg = SceneConfig::desk();
        cfg.grid.x_min = -1.6;
        cfg.grid.x_max = 1.6;
        cfg.grid.y_min = -1.6;
        cfg.grid.y_max = 1.6;
        cfg.min_objects = 1;
        cfg.max_objects = 2;
        cfg.templates = vec![
            ClassTemplate { l: 0.9, w: 0.5, h: 1.0 },
            ClassTemplate { l: 0.4, w: 0.4, h: 1.2 },
        ];
        cfg.speed_min = 0.02;
        cfg.speed_max = 0.08;
        cfg.clutter_points = 32;
        cfg
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one class template required".into()));
        }
        if !(self.density > 0.0) {
            return Err(Error::Config(format!("density must be positive, got {}", self.density)));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config(format!("size_jitter {} outside [0, 1)", self.size_jitter)));
        }
        if self.speed_min < 0.0 || self.speed_min > self.speed_max {
            return Err(Error::Config(format!(
                "speed range [{}, {}] invalid",
                self.speed_min, self.speed_max
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_dropout) {
            return Err(Error::Config(format!(
                "occlusion_dropout {} outside [0, 1]",
                self.occlusion_dropout
            )));
        }
        if self.grid.x_min >= self.grid.x_max || self.grid.y_min >= self.grid.y_max {
            return Err(Error::Config("world ranges are empty".into()));
        }
        Ok(())
    }
}

/// One rigid object over the whole sequence.
struct Track {
    class_id: u32,
    l: f32,
    w: f32,
    h: f32,
    x0: f64,
    y0: f64,
    z: f64,
    yaw0: f64,
    vx: f64,
    vy: f64,
    yaw_rate: f64,
}

impl Track {
    fn pose(&self, frame: usize) -> GtBox {
        let f = frame as f64;
        GtBox {
            x: (self.x0 + self.vx * f) as f32,
            y: (self.y0 + self.vy * f) as f32,
            z: self.z as f32,
            l: self.l,
            w: self.w,
            h: self.h,
            yaw: wrap_angle((self.yaw0 + self.yaw_rate * f) as f32),
            class_id: self.class_id,
        }
    }
}

fn footprint_aabb(b: &GtBox) -> [f32; 4] {
    crate::boxes::footprint(b.x, b.y, b.l, b.w, b.yaw)
}

fn aabbs_touch(a: &[f32; 4], b: &[f32; 4]) -> bool {
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

fn pose_ok(cfg: &SceneConfig, b: &GtBox, placed: &[[f32; 4]]) -> bool {
    let fp = footprint_aabb(b);
    let g = &cfg.grid;
    if fp[0] < g.x_min || fp[1] < g.y_min || fp[2] > g.x_max || fp[3] > g.y_max {
        return false;
    }
    if b.z - b.h / 2.0 < g.z_min || b.z + b.h / 2.0 > g.z_max {
        return false;
    }
    // keep the sensor column clear so side-face visibility stays well defined
    let c = SENSOR_CLEARANCE;
    let clear = fp[2] < -c || fp[0] > c || fp[3] < -c || fp[1] > c;
    if !clear {
        return false;
    }
    placed.iter().all(|p| !aabbs_touch(p, &fp))
}

/// A planar rectangle the sensor can see, parameterized by two half-axes.
struct Face {
    center: [f64; 3],
    u_axis: [f64; 3],
    v_axis: [f64; 3],
    half_u: f64,
    half_v: f64,
    area: f64,
}

fn visible_faces(b: &GtBox) -> Vec<Face> {
    let (s, c) = (b.yaw as f64).sin_cos();
    let ex = [c, s, 0.0];
    let ey = [-s, c, 0.0];
    let ez = [0.0, 0.0, 1.0];
    let (cx, cy, cz) = (b.x as f64, b.y as f64, b.z as f64);
    let (hl, hw, hh) = (b.l as f64 / 2.0, b.w as f64 / 2.0, b.h as f64 / 2.0);
    let mut faces = Vec::with_capacity(3);
    let sides: [([f64; 3], f64, [f64; 3], f64, f64, f64); 4] = [
        (ex, hl, ey, hw, hh, b.w as f64 * b.h as f64),
        ([-ex[0], -ex[1], 0.0], hl, ey, hw, hh, b.w as f64 * b.h as f64),
        (ey, hw, ex, hl, hh, b.l as f64 * b.h as f64),
        ([-ey[0], -ey[1], 0.0], hw, ex, hl, hh, b.l as f64 * b.h as f64),
    ];
    for (n, dist, u, hu, hv, area) in sides {
        let center = [cx + n[0] * dist, cy + n[1] * dist, cz];
        let to_sensor = [-center[0], -center[1], SENSOR_Z - center[2]];
        if n[0] * to_sensor[0] + n[1] * to_sensor[1] > 1e-9 {
            faces.push(Face { center, u_axis: u, v_axis: ez, half_u: hu, half_v: hv, area });
        }
    }
    if SENSOR_Z > cz + hh {
        faces.push(Face {
            center: [cx, cy, cz + hh],
            u_axis: ex,
            v_axis: ey,
            half_u: hl,
            half_v: hw,
            area: b.l as f64 * b.w as f64,
        });
    }
    faces
}

fn sample_object_points(b: &GtBox, density: f64, out: &mut Vec<Point>, r: &mut rng::Stream) {
    let faces = visible_faces(b);
    let (s, c) = (b.yaw as f64).sin_cos();
    let ex = [c, s, 0.0];
    let ey = [-s, c, 0.0];
    // per-component noise bound sits just inside the membership inflation so
    // rounding in the world/box round trip cannot push a point past it
    let clamp = 0.99 * NOISE_STD;
    let mut counts: Vec<usize> = faces
        .iter()
        .map(|f| {
            let range2 = f.center[0] * f.center[0]
                + f.center[1] * f.center[1]
                + (f.center[2] - SENSOR_Z) * (f.center[2] - SENSOR_Z);
            (density * f.area * (1.0 / range2).min(1.0)).round() as usize
        })
        .collect();
    if counts.iter().all(|&n| n == 0) && !counts.is_empty() {
        counts[0] = 1;
    }
    for (face, n) in faces.iter().zip(counts) {
        for _ in 0..n {
            let a = rng::uniform(r, -face.half_u, face.half_u);
            let v = rng::uniform(r, -face.half_v, face.half_v);
            let base = [
                face.center[0] + a * face.u_axis[0] + v * face.v_axis[0],
                face.center[1] + a * face.u_axis[1] + v * face.v_axis[1],
                face.center[2] + a * face.u_axis[2] + v * face.v_axis[2],
            ];
            let nx = rng::normal(r, NOISE_STD).clamp(-clamp, clamp);
            let ny = rng::normal(r, NOISE_STD).clamp(-clamp, clamp);
            let nz = rng::normal(r, NOISE_STD).clamp(-clamp, clamp);
            out.push(Point {
                x: (base[0] + nx * ex[0] + ny * ey[0]) as f32,
                y: (base[1] + nx * ex[1] + ny * ey[1]) as f32,
                z: (base[2] + nz) as f32,
                r: rng::uniform(r, 0.4, 1.0) as f32,
            });
        }
    }
}

pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut scene = rng::stream(seed, "synth/scene");
    let n_objects = if cfg.min_objects == cfg.max_objects {
        cfg.min_objects
    } else {
        rng::uniform(&mut scene, cfg.min_objects as f64, cfg.max_objects as f64 + 1.0) as usize
    };

    let mut tracks: Vec<Track> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let k = rng::uniform(&mut scene, 0.0, cfg.templates.len() as f64) as usize;
            let t = cfg.templates[k.min(cfg.templates.len() - 1)];
            let j = cfg.size_jitter as f64;
            let l = (t.l as f64 * (1.0 + rng::uniform(&mut scene, -j, j))) as f32;
            let w = (t.w as f64 * (1.0 + rng::uniform(&mut scene, -j, j))) as f32;
            let h = (t.h as f64 * (1.0 + rng::uniform(&mut scene, -j, j))) as f32;
            let x0 = rng::uniform(&mut scene, cfg.grid.x_min as f64, cfg.grid.x_max as f64);
            let y0 = rng::uniform(&mut scene, cfg.grid.y_min as f64, cfg.grid.y_max as f64);
            let yaw0 = rng::uniform(&mut scene, -std::f64::consts::PI, std::f64::consts::PI);
            let speed = rng::uniform(&mut scene, cfg.speed_min as f64, cfg.speed_max as f64);
            let heading = rng::uniform(&mut scene, -std::f64::consts::PI, std::f64::consts::PI);
            let yr = rng::uniform(&mut scene, -cfg.yaw_rate_max as f64, cfg.yaw_rate_max as f64);
            let track = Track {
                class_id: k.min(cfg.templates.len() - 1) as u32,
                l,
                w,
                h,
                x0,
                y0,
                z: GROUND_Z + h as f64 / 2.0,
                yaw0,
                vx: speed * heading.cos(),
                vy: speed * heading.sin(),
                yaw_rate: yr,
            };
            let ok = (0..cfg.frames).all(|f| {
                let pose = track.pose(f);
                let others: Vec<[f32; 4]> =
                    tracks.iter().map(|o| footprint_aabb(&o.pose(f))).collect();
                pose_ok(cfg, &pose, &others)
            });
            if ok {
                tracks.push(track);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {i} without overlap after {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }

    let target = cfg.frames / 2;
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let mut frame = PointFrame::default();
        for (i, track) in tracks.iter().enumerate() {
            let pose = track.pose(f);
            frame.gt.push(pose);
            let idx = ((f as u64) << 32) | i as u64;
            let dropped = f != target && cfg.occlusion_dropout > 0.0 && {
                let mut d = rng::stream_indexed(seed, "synth/dropout", idx);
                rng::uniform(&mut d, 0.0, 1.0) < cfg.occlusion_dropout as f64
            };
            if !dropped {
                let mut r = rng::stream_indexed(seed, "synth/surface", idx);
                sample_object_points(&pose, cfg.density as f64, &mut frame.points, &mut r);
            }
        }
        let mut cr = rng::stream_indexed(seed, "synth/clutter", f as u64);
        for _ in 0..cfg.clutter_points {
            frame.points.push(Point {
                x: rng::uniform(&mut cr, cfg.grid.x_min as f64, cfg.grid.x_max as f64) as f32,
                y: rng::uniform(&mut cr, cfg.grid.y_min as f64, cfg.grid.y_max as f64) as f32,
                z: (GROUND_Z + rng::uniform(&mut cr, 0.0, 0.25)) as f32,
                r: rng::uniform(&mut cr, 0.0, 0.4) as f32,
            });
        }
        frames.push(frame);
    }
    Ok(SequenceSample { frames, target })
}

/// A whole dataset from one base seed. Per-sequence seeds are spread with a
/// golden-ratio stride, so neighboring base seeds still give disjoint scenes.
pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<SequenceSample>> {
    (0..n)
        .map(|i| {
            let seed = cfg.seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
            generate_sequence(cfg, seed)
        })
        .collect()
}

// ---- LSEQ dataset format ----

pub const MAGIC: &[u8; 4] = b"LSEQ";
pub const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    fs::write(path, dataset_to_bytes(samples))?;
    Ok(())
}

pub fn dataset_to_bytes(samples: &[SequenceSample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(s.target as u32).to_le_bytes());
        for frame in &s.frames {
            out.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
            for p in &frame.points {
                for v in [p.x, p.y, p.z, p.r] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend_from_slice(&(frame.gt.len() as u32).to_le_bytes());
            for b in &frame.gt {
                for v in [b.x, b.y, b.z, b.l, b.w, b.h, b.yaw] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&b.class_id.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequenceSample>> {
    dataset_from_bytes(&fs::read(path)?)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<SequenceSample>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("sequence count")?;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n_frames = r.u32("frame count")? as usize;
        let target_off = r.pos;
        let target = r.u32("target index")? as usize;
        if target >= n_frames {
            return Err(Error::Format {
                offset: target_off as u64,
                msg: format!("target index {target} outside {n_frames} frames"),
            });
        }
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let n_points = r.u32("point count")? as usize;
            let mut points = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                points.push(Point {
                    x: r.f32("point x")?,
                    y: r.f32("point y")?,
                    z: r.f32("point z")?,
                    r: r.f32("point reflectance")?,
                });
            }
            let n_gt = r.u32("gt count")? as usize;
            let mut gt = Vec::with_capacity(n_gt);
            for _ in 0..n_gt {
                gt.push(GtBox {
                    x: r.f32("gt x")?,
                    y: r.f32("gt y")?,
                    z: r.f32("gt z")?,
                    l: r.f32("gt l")?,
                    w: r.f32("gt w")?,
                    h: r.f32("gt h")?,
                    yaw: r.f32("gt yaw")?,
                    class_id: r.u32("gt class")?,
                });
            }
            frames.push(PointFrame { points, gt });
        }
        samples.push(SequenceSample { frames, target });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(samples)
}
