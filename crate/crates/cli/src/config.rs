//! Run configuration: a flat `key = value` text format covering every knob
//! of the pipeline, with documented defaults, strict unknown-key rejection,
//! and `--set` overrides. The resolved config has a canonical rendering that
//! is echoed into run logs and hashed into `config_hash`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use tctr_core::backbone::BackboneConfig;
use tctr_core::model::{ModelConfig, TemporalMode};
use tctr_core::pillars::AugConfig;
use tctr_core::refine_head::{FusionMode, LossWeights};
use tctr_core::synthlidar::{ClassTemplate, SceneConfig};
use tctr_core::tctr::EncoderVariant;

/// Key table: (name, default, doc). Single source of truth for the schema.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for init, batching, augmentation, generation"),
    ("data.sequences", "8", "sequence count written by gen"),
    ("grid.x_min", "-6.4", "world range, meters"),
    ("grid.x_max", "6.4", "world range, meters"),
    ("grid.y_min", "-6.4", "world range, meters"),
    ("grid.y_max", "6.4", "world range, meters"),
    ("grid.z_min", "-5.0", "vertical crop, meters"),
    ("grid.z_max", "3.0", "vertical crop, meters"),
    ("grid.dx", "0.2", "pillar cell size, meters"),
    ("grid.dy", "0.2", "pillar cell size, meters"),
    ("grid.max_points_per_pillar", "20", "per-pillar point cap before subsampling"),
    ("pfn.channels", "32", "pillar feature width C0"),
    ("backbone.width", "32", "residual trunk width"),
    ("backbone.out_channels", "64", "frame feature width C1"),
    ("backbone.stem_stride", "1", "stride of the first conv"),
    ("backbone.pool_after", "1,1,1,0", "2x pool after each of the four blocks"),
    ("tctr.t_radius", "1", "temporal context radius T; window is 2T+1 frames"),
    ("tctr.c2", "16", "encoder channel-token width C2"),
    ("tctr.c3", "32", "decoder voxel feature width C3"),
    ("tctr.enc_blocks", "2", "encoder block count M"),
    ("tctr.dec_blocks", "2", "decoder block count"),
    ("tctr.heads", "4", "attention heads"),
    ("tctr.d_k", "16", "per-head projection width"),
    ("tctr.ffn_hidden", "128", "feed-forward hidden width"),
    ("tctr.variant", "tc_encoder", "tc_encoder | t_encoder | c_encoder"),
    ("tctr.use_pe", "true", "add sinusoidal positional encodings"),
    ("model.temporal", "tctr", "tctr | concat_frames | target_only"),
    ("model.fusion", "gate", "gate | concat | add | x_only | g_only"),
    ("model.refine_stages", "2", "2x upsample-refine stages before the head"),
    ("model.classes", "2", "object classes; must match scene.templates"),
    ("model.pos_thr", "0.6", "anchor-matching positive IoU threshold"),
    ("model.neg_thr", "0.45", "anchor-matching negative IoU threshold"),
    ("loss.gamma", "2.0", "focal loss exponent"),
    ("loss.beta_cls", "1.0", "classification loss weight"),
    ("loss.beta_loc", "0.25", "localization loss weight"),
    ("loss.beta_dir", "0.2", "direction loss weight"),
    ("detect.score_thr", "0.1", "minimum sigmoid score kept before NMS"),
    ("detect.nms_iou", "0.5", "per-class NMS IoU threshold"),
    ("detect.max_detections", "100", "detections kept per sample"),
    ("scene.min_objects", "2", "objects per generated scene, lower bound"),
    ("scene.max_objects", "4", "objects per generated scene, upper bound"),
    ("scene.templates", "4.2x1.9x1.6,0.8x0.8x1.7", "per-class l x w x h, comma separated"),
    ("scene.size_jitter", "0.1", "uniform size jitter, fraction"),
    ("scene.speed_min", "0.05", "object speed, meters per frame"),
    ("scene.speed_max", "0.3", "object speed, meters per frame"),
    ("scene.yaw_rate_max", "0.1", "yaw rate bound, radians per frame"),
    ("scene.density", "80.0", "surface points per square meter at close range"),
    ("scene.clutter_points", "256", "uniform ground clutter points per frame"),
    ("scene.occlusion_dropout", "0.0", "chance an object vanishes from a context frame"),
    ("scene.frames", "3", "frames per generated sequence"),
    ("aug.enabled", "true", "train-time global flips, rotation, scaling"),
    ("aug.flip_x", "true", "allow mirroring across the y axis"),
    ("aug.flip_y", "true", "allow mirroring across the x axis"),
    ("aug.rot_max", "0.3925", "global rotation bound, radians"),
    ("aug.scale_min", "0.95", "global scale range"),
    ("aug.scale_max", "1.05", "global scale range"),
    ("train.lr", "0.001", "one-cycle peak learning rate"),
    ("train.batch_size", "2", "sequences per optimizer step"),
    ("train.steps", "300", "optimizer steps"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.eps", "1e-8", "Adam denominator floor"),
];

#[derive(Clone, Debug)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| anyhow!("unknown config key {key:?} (see `tctr config --list`)"))?;
        *slot = value.trim().to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies a config file on top of the defaults. Lines are `key = value`;
    /// blank lines and `#` comments are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            self.set(key.trim(), value).with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// `--set key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set needs key=value, got {kv:?}"))?;
        self.set(key.trim(), value)
    }

    /// Canonical rendering: every key, sorted, one per line. This exact text
    /// is echoed into run logs and hashed.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    /// Schema listing with defaults and docs, for `--help`-style output.
    pub fn describe() -> String {
        let mut out = String::new();
        for (k, v, doc) in SCHEMA {
            writeln!(out, "{k} = {v}  # {doc}").unwrap();
        }
        out
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = &self.values[key];
        raw.parse::<T>().map_err(|e| anyhow!("config key {key} = {raw:?}: {e}"))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.values[key].as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => bail!("config key {key} = {other:?}: expected true/false"),
        }
    }

    pub fn build(&self) -> Result<RunConfig> {
        let mut grid = tctr_core::pillars::GridConfig::desk();
        grid.x_min = self.parse("grid.x_min")?;
        grid.x_max = self.parse("grid.x_max")?;
        grid.y_min = self.parse("grid.y_min")?;
        grid.y_max = self.parse("grid.y_max")?;
        grid.z_min = self.parse("grid.z_min")?;
        grid.z_max = self.parse("grid.z_max")?;
        grid.dx = self.parse("grid.dx")?;
        grid.dy = self.parse("grid.dy")?;
        grid.max_points_per_pillar = self.parse("grid.max_points_per_pillar")?;

        let pool_raw: String = self.parse("backbone.pool_after")?;
        let pools: Vec<&str> = pool_raw.split(',').map(str::trim).collect();
        if pools.len() != 4 {
            bail!("backbone.pool_after needs exactly 4 flags, got {pool_raw:?}");
        }
        let mut pool_after = [false; 4];
        for (slot, p) in pool_after.iter_mut().zip(&pools) {
            *slot = match *p {
                "1" | "true" => true,
                "0" | "false" => false,
                other => bail!("backbone.pool_after entry {other:?}: expected 0 or 1"),
            };
        }

        let backbone = BackboneConfig {
            in_channels: self.parse("pfn.channels")?,
            width: self.parse("backbone.width")?,
            out_channels: self.parse("backbone.out_channels")?,
            stem_stride: self.parse("backbone.stem_stride")?,
            pool_after,
        };

        let tctr = tctr_core::tctr::TctrConfig {
            t_radius: self.parse("tctr.t_radius")?,
            c2: self.parse("tctr.c2")?,
            c3: self.parse("tctr.c3")?,
            enc_blocks: self.parse("tctr.enc_blocks")?,
            dec_blocks: self.parse("tctr.dec_blocks")?,
            heads: self.parse("tctr.heads")?,
            d_k: self.parse("tctr.d_k")?,
            ffn_hidden: self.parse("tctr.ffn_hidden")?,
            variant: EncoderVariant::parse(&self.values["tctr.variant"])?,
            use_pe: self.parse_bool("tctr.use_pe")?,
        };

        let model = ModelConfig {
            grid,
            pfn_channels: self.parse("pfn.channels")?,
            backbone,
            tctr,
            temporal: TemporalMode::parse(&self.values["model.temporal"])?,
            fusion: FusionMode::parse(&self.values["model.fusion"])?,
            refine_stages: self.parse("model.refine_stages")?,
            classes: self.parse("model.classes")?,
            pos_thr: self.parse("model.pos_thr")?,
            neg_thr: self.parse("model.neg_thr")?,
            loss: LossWeights {
                gamma: self.parse("loss.gamma")?,
                beta_cls: self.parse("loss.beta_cls")?,
                beta_loc: self.parse("loss.beta_loc")?,
                beta_dir: self.parse("loss.beta_dir")?,
            },
            score_thr: self.parse("detect.score_thr")?,
            nms_iou: self.parse("detect.nms_iou")?,
            max_detections: self.parse("detect.max_detections")?,
        };

        let templates_raw: String = self.parse("scene.templates")?;
        let mut templates = Vec::new();
        for part in templates_raw.split(',') {
            let dims: Vec<&str> = part.trim().split('x').collect();
            if dims.len() != 3 {
                bail!("scene.templates entry {part:?}: expected l x w x h");
            }
            templates.push(ClassTemplate {
                l: dims[0].parse().map_err(|e| anyhow!("scene.templates {part:?}: {e}"))?,
                w: dims[1].parse().map_err(|e| anyhow!("scene.templates {part:?}: {e}"))?,
                h: dims[2].parse().map_err(|e| anyhow!("scene.templates {part:?}: {e}"))?,
            });
        }
        if templates.len() != model.classes {
            bail!(
                "scene.templates defines {} classes but model.classes = {}",
                templates.len(),
                model.classes
            );
        }

        let seed: u64 = self.parse("seed")?;
        let scene = SceneConfig {
            grid,
            min_objects: self.parse("scene.min_objects")?,
            max_objects: self.parse("scene.max_objects")?,
            templates,
            size_jitter: self.parse("scene.size_jitter")?,
            speed_min: self.parse("scene.speed_min")?,
            speed_max: self.parse("scene.speed_max")?,
            yaw_rate_max: self.parse("scene.yaw_rate_max")?,
            density: self.parse("scene.density")?,
            clutter_points: self.parse("scene.clutter_points")?,
            occlusion_dropout: self.parse("scene.occlusion_dropout")?,
            frames: self.parse("scene.frames")?,
            seed,
        };

        let aug = AugConfig {
            enabled: self.parse_bool("aug.enabled")?,
            flip_x: self.parse_bool("aug.flip_x")?,
            flip_y: self.parse_bool("aug.flip_y")?,
            rot_max: self.parse("aug.rot_max")?,
            scale_min: self.parse("aug.scale_min")?,
            scale_max: self.parse("aug.scale_max")?,
        };

        let train = TrainParams {
            lr: self.parse("train.lr")?,
            batch_size: self.parse("train.batch_size")?,
            steps: self.parse("train.steps")?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            eps: self.parse("train.eps")?,
        };
        if train.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }

        model.validate()?;
        scene.validate()?;
        Ok(RunConfig {
            model,
            scene,
            aug,
            train,
            sequences: self.parse("data.sequences")?,
            seed,
            hash: self.hash(),
            canonical: self.canonical(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub aug: AugConfig,
    pub train: TrainParams,
    pub sequences: usize,
    pub seed: u64,
    pub hash: String,
    pub canonical: String,
}

/// Overrides that shrink everything to the mini scale used in fast tests.
pub fn mini_overrides() -> Vec<(&'static str, &'static str)> {
    vec![
        ("grid.x_min", "-1.6"),
        ("grid.x_max", "1.6"),
        ("grid.y_min", "-1.6"),
        ("grid.y_max", "1.6"),
        ("pfn.channels", "8"),
        ("backbone.width", "8"),
        ("backbone.out_channels", "16"),
        ("backbone.pool_after", "1,1,0,0"),
        ("tctr.c2", "4"),
        ("tctr.c3", "8"),
        ("tctr.enc_blocks", "1"),
        ("tctr.dec_blocks", "1"),
        ("tctr.heads", "2"),
        ("tctr.d_k", "4"),
        ("tctr.ffn_hidden", "16"),
        ("model.refine_stages", "1"),
        ("scene.min_objects", "1"),
        ("scene.max_objects", "2"),
        ("scene.templates", "0.9x0.5x1.0,0.4x0.4x1.2"),
        ("scene.speed_min", "0.02"),
        ("scene.speed_max", "0.08"),
        ("scene.clutter_points", "32"),
    ]
}

pub fn mini_raw() -> RawConfig {
    let mut raw = RawConfig::default();
    for (k, v) in mini_overrides() {
        raw.set(k, v).unwrap();
    }
    raw
}
