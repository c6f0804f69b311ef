//! Full pipeline assembly: pillar features, per-frame backbone, temporal
//! enhancement, fusion, staged refinement, and the detection head, as one
//! differentiable forward pass on a shared tape.
//!
//! The temporal stage has three modes. `tctr` runs the channel-token encoder
//! and voxel-query decoder over the frame window; `concat_frames` replaces it
//! with channel concatenation plus a 1x1 conv; `target_only` skips temporal
//! context entirely and detects from the target frame alone.

use crate::autodiff::{Tape, VarId};
use crate::backbone::{backbone_forward, register_backbone_params, BackboneConfig};
use crate::boxes::{assign_targets, AnchorGrid, ClassStats, Detection};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pillars::{pfn_forward, register_pfn_params, voxelize, GridConfig, SequenceSample};
use crate::refine_head::{
    decode_detections, detection_loss, fuse_variant, head_forward, register_fusion_params,
    register_head_params, register_refine_params, upsample_refine, FusionMode, HeadOut,
    LossBreakdown, LossWeights,
};
use crate::scalar::Scalar;
use crate::tctr::{decode_spatial, encode_memory, register_tctr_params, TctrConfig};
use crate::tensor::Tensor;

pub const STATS_BUFFER: &str = "anchors.stats";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    TargetOnly,
    ConcatFrames,
    Tctr,
}

impl TemporalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target_only" => Ok(Self::TargetOnly),
            "concat_frames" => Ok(Self::ConcatFrames),
            "tctr" => Ok(Self::Tctr),
            other => Err(Error::Config(format!(
                "unknown temporal mode {other:?} (expected target_only, concat_frames, tctr)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TargetOnly => "target_only",
            Self::ConcatFrames => "concat_frames",
            Self::Tctr => "tctr",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub pfn_channels: usize,
    pub backbone: BackboneConfig,
    pub tctr: TctrConfig,
    pub temporal: TemporalMode,
    pub fusion: FusionMode,
    pub refine_stages: usize,
    pub classes: usize,
    pub pos_thr: f32,
    pub neg_thr: f32,
    pub loss: LossWeights,
    pub score_thr: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            grid: GridConfig::desk(),
            pfn_channels: 32,
            backbone: BackboneConfig::desk(),
            tctr: TctrConfig::desk(),
            temporal: TemporalMode::Tctr,
            fusion: FusionMode::Gate,
            refine_stages: 2,
            classes: 2,
            pos_thr: 0.6,
            neg_thr: 0.45,
            loss: LossWeights::default(),
            score_thr: 0.1,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }

    /// Scaled-down everything: 16x16 pillar grid over a 3.2 m world, narrow
    /// backbone, one encoder and decoder block, one refine stage. Useful for
    /// fast tests and finite-difference sweeps.
    pub fn mini() -> Self {
        let mut grid = GridConfig::desk();
        grid.x_min = -1.6;
        grid.x_max = 1.6;
        grid.y_min = -1.6;
        grid.y_max = 1.6;
        let mut cfg = ModelConfig::desk();
        cfg.grid = grid;
        cfg.pfn_channels = 8;
        cfg.backbone = BackboneConfig {
            in_channels: 8,
            width: 8,
            out_channels: 16,
            stem_stride: 1,
            pool_after: [true, true, false, false],
        };
        cfg.tctr = TctrConfig {
            t_radius: 1,
            c2: 4,
            c3: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            d_k: 4,
            ffn_hidden: 16,
            variant: crate::tctr::EncoderVariant::TemporalChannel,
            use_pe: true,
        };
        cfg.refine_stages = 1;
        cfg
    }

    /// Frames consumed per forward pass.
    pub fn n_frames(&self) -> usize {
        match self.temporal {
            TemporalMode::TargetOnly => 1,
            _ => self.tctr.n_frames(),
        }
    }

    /// Whether the staged refinement re-applies the sigmoid gate.
    pub fn gated_refine(&self) -> bool {
        self.temporal != TemporalMode::TargetOnly && self.fusion.gated_refine()
    }

    /// (c1, h1, w1) of the per-frame feature maps.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (h0, w0) = self.grid.validate()?;
        self.backbone.output_shape(h0, w0)
    }

    /// (h_out, w_out) of the head after refinement.
    pub fn head_extents(&self) -> Result<(usize, usize)> {
        let (_, h1, w1) = self.feature_shape()?;
        Ok((h1 << self.refine_stages, w1 << self.refine_stages))
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.in_channels != self.pfn_channels {
            return Err(Error::Config(format!(
                "backbone expects {} input channels but the pillar network emits {}",
                self.backbone.in_channels, self.pfn_channels
            )));
        }
        let (_, h1, w1) = self.feature_shape()?;
        if self.temporal == TemporalMode::Tctr {
            self.tctr.validate()?;
            let _ = (h1, w1);
        }
        if self.classes == 0 {
            return Err(Error::Config("at least one class required".into()));
        }
        if !(0.0..=1.0).contains(&self.neg_thr)
            || !(0.0..=1.0).contains(&self.pos_thr)
            || self.neg_thr > self.pos_thr
        {
            return Err(Error::Config(format!(
                "matching thresholds neg {} / pos {} out of order",
                self.neg_thr, self.pos_thr
            )));
        }
        Ok(())
    }
}

/// Per-class mean box prior used before any dataset statistics exist:
/// car-like, pedestrian-like, then unit boxes.
pub fn default_stats(classes: usize) -> ClassStats {
    let built_in = [[4.2f32, 1.9, 1.6, -0.2], [0.8, 0.8, 1.7, -0.15]];
    (0..classes).map(|k| *built_in.get(k).unwrap_or(&[1.0, 1.0, 1.0, 0.0])).collect()
}

pub fn register_model_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let (c1, h1, w1) = cfg.feature_shape()?;
    register_pfn_params(store, cfg.pfn_channels, seed)?;
    register_backbone_params(store, &cfg.backbone, seed)?;
    match cfg.temporal {
        TemporalMode::TargetOnly => {}
        TemporalMode::ConcatFrames => {
            let n = cfg.n_frames();
            store.init_kaiming("temporal.concat.w", &[c1, n * c1, 1, 1], n * c1, seed)?;
            store.init_zeros("temporal.concat.b", &[c1])?;
        }
        TemporalMode::Tctr => register_tctr_params(store, &cfg.tctr, c1, h1, w1, seed)?,
    }
    if cfg.temporal != TemporalMode::TargetOnly {
        register_fusion_params(store, c1, cfg.fusion, seed)?;
    }
    register_refine_params(store, c1, cfg.refine_stages, cfg.gated_refine(), seed)?;
    register_head_params(store, c1, cfg.classes, seed)?;
    let stats = default_stats(cfg.classes);
    store.insert_buffer(STATS_BUFFER, stats_tensor(&stats)?)?;
    Ok(())
}

fn stats_tensor<S: Scalar>(stats: &ClassStats) -> Result<Tensor<S>> {
    let flat: Vec<S> = stats.iter().flatten().map(|&v| S::from_f32c(v)).collect();
    Tensor::from_vec(&[stats.len(), 4], flat)
}

/// Overwrites the anchor prior buffer, normally with training-set means.
pub fn set_class_stats<S: Scalar>(store: &mut ParamStore<S>, stats: &ClassStats) -> Result<()> {
    store.set_buffer(STATS_BUFFER, stats_tensor(stats)?)
}

pub fn stats_from_store<S: Scalar>(store: &ParamStore<S>) -> Result<ClassStats> {
    let t = store.buffer(STATS_BUFFER)?;
    let d = t.dims();
    if d.len() != 2 || d[1] != 4 {
        return Err(Error::Contract(format!("anchor stats buffer has shape {d:?}")));
    }
    Ok((0..d[0])
        .map(|k| {
            let row = &t.data()[k * 4..k * 4 + 4];
            [row[0].to_f32c(), row[1].to_f32c(), row[2].to_f32c(), row[3].to_f32c()]
        })
        .collect())
}

pub fn anchor_grid<S: Scalar>(cfg: &ModelConfig, store: &ParamStore<S>) -> Result<AnchorGrid> {
    let (h_out, w_out) = cfg.head_extents()?;
    let stats = stats_from_store(store)?;
    if stats.len() != cfg.classes {
        return Err(Error::Contract(format!(
            "anchor stats cover {} classes, config says {}",
            stats.len(),
            cfg.classes
        )));
    }
    AnchorGrid::new(&cfg.grid, h_out, w_out, stats)
}

/// The frame window `target - T ..= target + T` of a sample.
pub fn frame_window(sample: &SequenceSample, n_frames: usize) -> Result<std::ops::Range<usize>> {
    let t = n_frames / 2;
    if sample.target < t || sample.target + t >= sample.frames.len() {
        return Err(Error::Contract(format!(
            "window of {} frames around target {} exceeds the {} available",
            n_frames,
            sample.target,
            sample.frames.len()
        )));
    }
    Ok(sample.target - t..sample.target + t + 1)
}

pub struct Forward {
    /// Per-frame backbone outputs, window order.
    pub frames: Vec<VarId>,
    /// Dense temporal map; absent in target-only mode.
    pub g: Option<VarId>,
    pub fused: VarId,
    pub refined: VarId,
    pub head: HeadOut,
}

/// Pillar features and per-frame backbone for the sample's window. Returns
/// the feature maps and the target's position within them.
pub fn frame_features<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    voxel_seed: u64,
) -> Result<(Vec<VarId>, usize)> {
    let window = frame_window(sample, cfg.n_frames())?;
    let target_pos = sample.target - window.start;
    let mut xs = Vec::with_capacity(window.len());
    for (i, f) in window.enumerate() {
        let pillars = voxelize(&sample.frames[f], &cfg.grid, voxel_seed.wrapping_add(i as u64))?;
        let pseudo = pfn_forward(tape, store, &pillars, &cfg.grid, cfg.pfn_channels)?;
        xs.push(backbone_forward(tape, store, pseudo, &cfg.backbone)?);
    }
    Ok((xs, target_pos))
}

/// Temporal stage, fusion, refinement, and head over already-computed frame
/// features. Split from `forward` so finite-difference checks can restart
/// from cached intermediate values.
pub fn detect_from_frames<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    xs: Vec<VarId>,
    target_pos: usize,
) -> Result<Forward> {
    if xs.len() != cfg.n_frames() || target_pos >= xs.len() {
        return Err(Error::Contract(format!(
            "got {} frames with target at {}, config wants {}",
            xs.len(),
            target_pos,
            cfg.n_frames()
        )));
    }
    let x_t = xs[target_pos];
    let (g, fused) = match cfg.temporal {
        TemporalMode::TargetOnly => (None, x_t),
        TemporalMode::ConcatFrames => {
            let cat = tape.concat0(&xs)?;
            let w = tape.param(store, "temporal.concat.w")?;
            let b = tape.param(store, "temporal.concat.b")?;
            let y = tape.conv2d(cat, w, 1, 0)?;
            let g = tape.add_bias_channels(y, b)?;
            (Some(g), fuse_variant(tape, store, x_t, g, cfg.fusion)?)
        }
        TemporalMode::Tctr => {
            let enc = encode_memory(tape, store, &xs, target_pos, &cfg.tctr)?;
            let dec = decode_spatial(tape, store, x_t, enc.memory, &cfg.tctr)?;
            (Some(dec.g), fuse_variant(tape, store, x_t, dec.g, cfg.fusion)?)
        }
    };

    let refined = upsample_refine(
        tape,
        store,
        fused,
        g.unwrap_or(fused),
        cfg.refine_stages,
        cfg.gated_refine(),
    )?;
    let head = head_forward(tape, store, refined)?;
    Ok(Forward { frames: xs, g, fused, refined, head })
}

pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    voxel_seed: u64,
) -> Result<Forward> {
    let (xs, target_pos) = frame_features(tape, store, cfg, sample, voxel_seed)?;
    detect_from_frames(tape, store, cfg, xs, target_pos)
}

/// Forward plus target assignment and the full loss for one sample.
pub fn loss_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    voxel_seed: u64,
) -> Result<(Forward, LossBreakdown)> {
    let fw = forward(tape, store, cfg, sample, voxel_seed)?;
    let grid = anchor_grid(cfg, store)?;
    let assignment = assign_targets(&grid, &sample.frames[sample.target].gt, cfg.pos_thr, cfg.neg_thr);
    let loss = detection_loss(tape, &fw.head, &assignment, &grid, &cfg.loss)?;
    Ok((fw, loss))
}

/// Inference on one sample: forward, residual decoding, per-class NMS.
pub fn detect<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    voxel_seed: u64,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let fw = forward(&mut tape, store, cfg, sample, voxel_seed)?;
    let grid = anchor_grid(cfg, store)?;
    decode_detections(
        tape.value(fw.head.cls),
        tape.value(fw.head.reg),
        tape.value(fw.head.dir),
        &grid,
        cfg.score_thr,
        cfg.nms_iou,
        cfg.max_detections,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::synthlidar::{generate_sequence, SceneConfig};

    fn mini() -> ModelConfig {
        ModelConfig::mini()
    }

    fn mini_scene() -> SceneConfig {
        SceneConfig::mini()
    }

    #[test]
    fn desk_config_shapes_line_up() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_shape().unwrap(), (64, 8, 8));
        assert_eq!(cfg.head_extents().unwrap(), (32, 32));
        assert_eq!(cfg.n_frames(), 3);
    }

    #[test]
    fn mini_forward_produces_expected_head_shapes() {
        let cfg = mini();
        cfg.validate().unwrap();
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 7).unwrap();
        let sample = generate_sequence(&mini_scene(), 3).unwrap();
        let mut tape = Tape::new();
        let fw = forward(&mut tape, &store, &cfg, &sample, 0).unwrap();
        assert_eq!(fw.frames.len(), 3);
        assert_eq!(tape.dims(fw.fused), &[16, 4, 4]);
        assert_eq!(tape.dims(fw.refined), &[16, 8, 8]);
        assert_eq!(tape.dims(fw.head.cls), &[8, 8, 8]);
        assert_eq!(tape.dims(fw.head.reg), &[28, 8, 8]);
        assert_eq!(tape.dims(fw.head.dir), &[8, 8, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = mini();
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 7).unwrap();
        let sample = generate_sequence(&mini_scene(), 5).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let fw = forward(&mut tape, &store, &cfg, &sample, 9).unwrap();
            tape.value(fw.head.cls).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn temporal_modes_register_distinct_param_sets() {
        let mut cfg = mini();
        let mut tctr = ParamStore::<f32>::new();
        register_model_params(&mut tctr, &cfg, 1).unwrap();
        assert!(tctr.has("tctr.token.w"));
        assert!(!tctr.has("temporal.concat.w"));

        cfg.temporal = TemporalMode::ConcatFrames;
        let mut cat = ParamStore::<f32>::new();
        register_model_params(&mut cat, &cfg, 1).unwrap();
        assert!(cat.has("temporal.concat.w"));
        assert!(!cat.has("tctr.token.w"));

        cfg.temporal = TemporalMode::TargetOnly;
        let mut solo = ParamStore::<f32>::new();
        register_model_params(&mut solo, &cfg, 1).unwrap();
        assert!(!solo.has("temporal.concat.w"));
        assert!(!solo.has("tctr.token.w"));
        // no gate path without a dense map to gate on
        assert!(!solo.has("refine.s0.g.w"));
        assert!(solo.has("refine.s0.f.w"));
    }

    #[test]
    fn window_outside_sample_is_contract_error() {
        let cfg = mini();
        let mut sample = generate_sequence(&mini_scene(), 2).unwrap();
        sample.target = 0; // window [-1, 1] impossible
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 7).unwrap();
        let mut tape = Tape::new();
        match forward(&mut tape, &store, &cfg, &sample, 0) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn loss_drops_under_plain_gradient_steps() {
        let cfg = mini();
        let mut store = ParamStore::<f64>::new();
        register_model_params(&mut store, &cfg, 11).unwrap();
        let sample = generate_sequence(&mini_scene(), 8).unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..30 {
            let mut tape = Tape::new();
            let (_, loss) = loss_forward(&mut tape, &store, &cfg, &sample, 1).unwrap();
            let v = tape.value(loss.total).item().unwrap();
            if step == 0 {
                first = v;
            }
            last = v;
            tape.backward(loss.total, &mut store).unwrap();
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in names {
                let g = store.grad(&name).unwrap().clone();
                let p = store.value(&name).unwrap().clone();
                let stepped = Tensor::from_fn(p.dims(), |i| p.data()[i] - 0.05 * g.data()[i]).unwrap();
                store.set_value(&name, stepped).unwrap();
            }
        }
        assert!(last < first * 0.8, "loss {first} -> {last} did not drop");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_the_forward() {
        let cfg = mini();
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 13).unwrap();
        let sample = generate_sequence(&mini_scene(), 21).unwrap();

        let bytes = checkpoint::to_bytes(&store);
        let mut reloaded = ParamStore::<f32>::new();
        register_model_params(&mut reloaded, &cfg, 99).unwrap(); // different init
        checkpoint::apply(&checkpoint::from_bytes(&bytes).unwrap(), &mut reloaded).unwrap();

        let run = |s: &ParamStore<f32>| {
            let mut tape = Tape::new();
            let fw = forward(&mut tape, s, &cfg, &sample, 4).unwrap();
            tape.value(fw.head.reg).clone()
        };
        assert!(run(&store).bit_eq(&run(&reloaded)));
    }

    #[test]
    #[ignore = "manual timing probe"]
    fn desk_step_timing_probe() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 7).unwrap();
        println!("scalars: {}", store.num_scalars());
        let sample = generate_sequence(&SceneConfig::desk(), 3).unwrap();
        for step in 0..3 {
            let t0 = std::time::Instant::now();
            let mut tape = Tape::new();
            let (_, loss) = loss_forward(&mut tape, &store, &cfg, &sample, step).unwrap();
            let fwd = t0.elapsed();
            tape.backward(loss.total, &mut store).unwrap();
            println!(
                "step {step}: fwd {:.2}s fwd+bwd {:.2}s loss {:.4}",
                fwd.as_secs_f64(),
                t0.elapsed().as_secs_f64(),
                tape.value(loss.total).item().unwrap()
            );
        }
    }

    #[test]
    fn stats_buffer_round_trips_through_the_store() {
        let cfg = mini();
        let mut store = ParamStore::<f32>::new();
        register_model_params(&mut store, &cfg, 1).unwrap();
        assert_eq!(stats_from_store(&store).unwrap(), default_stats(2));
        let custom = vec![[1.0f32, 2.0, 3.0, -0.5], [0.5, 0.5, 1.0, 0.0]];
        set_class_stats(&mut store, &custom).unwrap();
        assert_eq!(stats_from_store(&store).unwrap(), custom);
    }
}
