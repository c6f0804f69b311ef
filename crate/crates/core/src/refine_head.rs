//! Fusion of the decoder's dense map into the target features, staged
//! up-sampling refinement, the anchor detection head, and the loss stack.
//!
//! The default fusion is a sigmoid gate: F = X * sigmoid(g), so the decoder
//! output acts as a soft relevance mask over the target frame. Refinement
//! up-samples F and g in lockstep and re-applies the gate at every scale.
//! The head is three 1x1 branches: per-anchor class logits, seven box
//! residuals, and a two-way yaw direction classifier.

use std::sync::Arc;

use crate::autodiff::{Tape, VarId};
use crate::boxes::{AnchorGrid, AnchorLabel, Detection, TargetAssignment, BOX_PARAMS, YAWS_PER_CLASS};
use crate::boxes::{decode_box, nms};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FOCAL_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Gate,
    Concat,
    Add,
    XOnly,
    GOnly,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Self::Gate),
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            "x_only" => Ok(Self::XOnly),
            "g_only" => Ok(Self::GOnly),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected gate, concat, add, x_only, g_only)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gate => "gate",
            Self::Concat => "concat",
            Self::Add => "add",
            Self::XOnly => "x_only",
            Self::GOnly => "g_only",
        }
    }

    /// The staged refinement re-applies the sigmoid gate only when the
    /// fusion itself is gated.
    pub fn gated_refine(&self) -> bool {
        *self == Self::Gate
    }
}

pub fn gate_fuse<S: Scalar>(tape: &mut Tape<S>, x: VarId, g: VarId) -> Result<VarId> {
    if tape.dims(x) != tape.dims(g) {
        return Err(Error::shape(
            "gate_fuse",
            format!("{:?} vs {:?}", tape.dims(x), tape.dims(g)),
        ));
    }
    let s = tape.sigmoid(g)?;
    tape.mul(x, s)
}

pub fn fuse_variant<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: VarId,
    g: VarId,
    mode: FusionMode,
) -> Result<VarId> {
    match mode {
        FusionMode::Gate => gate_fuse(tape, x, g),
        FusionMode::Add => tape.add(x, g),
        FusionMode::XOnly => Ok(x),
        FusionMode::GOnly => Ok(g),
        FusionMode::Concat => {
            let both = tape.concat0(&[x, g])?;
            let w = tape.param(store, "fuse.concat.w")?;
            let b = tape.param(store, "fuse.concat.b")?;
            let y = tape.conv2d(both, w, 1, 0)?;
            tape.add_bias_channels(y, b)
        }
    }
}

/// Doubles the extents `stages` times. Each stage re-convolves the
/// up-sampled features; in gated mode the dense map g is up-sampled through
/// its own 1x1 conv and multiplied back in through a sigmoid.
pub fn upsample_refine<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    f: VarId,
    g: VarId,
    stages: usize,
    gated: bool,
) -> Result<VarId> {
    let mut f = f;
    let mut g = g;
    for s in 0..stages {
        let up = tape.upsample2x(f)?;
        let w = tape.param(store, &format!("refine.s{s}.f.w"))?;
        let b = tape.param(store, &format!("refine.s{s}.f.b"))?;
        let conv = tape.conv2d(up, w, 1, 1)?;
        f = tape.add_bias_channels(conv, b)?;
        if gated {
            let gu = tape.upsample2x(g)?;
            let wg = tape.param(store, &format!("refine.s{s}.g.w"))?;
            let bg = tape.param(store, &format!("refine.s{s}.g.b"))?;
            let gc = tape.conv2d(gu, wg, 1, 0)?;
            g = tape.add_bias_channels(gc, bg)?;
            f = gate_fuse(tape, f, g)?;
        }
    }
    Ok(f)
}

pub struct HeadOut {
    pub cls: VarId,
    pub reg: VarId,
    pub dir: VarId,
}

pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    f: VarId,
) -> Result<HeadOut> {
    let branch = |tape: &mut Tape<S>, name: &str, f: VarId| -> Result<VarId> {
        let w = tape.param(store, &format!("head.{name}.w"))?;
        let b = tape.param(store, &format!("head.{name}.b"))?;
        let y = tape.conv2d(f, w, 1, 0)?;
        tape.add_bias_channels(y, b)
    };
    Ok(HeadOut {
        cls: branch(tape, "cls", f)?,
        reg: branch(tape, "reg", f)?,
        dir: branch(tape, "dir", f)?,
    })
}

pub fn register_fusion_params<S: Scalar>(
    store: &mut ParamStore<S>,
    c1: usize,
    mode: FusionMode,
    seed: u64,
) -> Result<()> {
    if mode == FusionMode::Concat {
        store.init_kaiming("fuse.concat.w", &[c1, 2 * c1, 1, 1], 2 * c1, seed)?;
        store.init_zeros("fuse.concat.b", &[c1])?;
    }
    Ok(())
}

pub fn register_refine_params<S: Scalar>(
    store: &mut ParamStore<S>,
    c1: usize,
    stages: usize,
    gated: bool,
    seed: u64,
) -> Result<()> {
    for s in 0..stages {
        store.init_kaiming(&format!("refine.s{s}.f.w"), &[c1, c1, 3, 3], c1 * 9, seed)?;
        store.init_zeros(&format!("refine.s{s}.f.b"), &[c1])?;
        if gated {
            store.init_kaiming(&format!("refine.s{s}.g.w"), &[c1, c1, 1, 1], c1, seed)?;
            store.init_zeros(&format!("refine.s{s}.g.b"), &[c1])?;
        }
    }
    Ok(())
}

pub fn register_head_params<S: Scalar>(
    store: &mut ParamStore<S>,
    c1: usize,
    classes: usize,
    seed: u64,
) -> Result<()> {
    let a = classes * YAWS_PER_CLASS;
    for (name, ch) in [("cls", a * classes), ("reg", a * BOX_PARAMS), ("dir", a * 2)] {
        store.init_kaiming(&format!("head.{name}.w"), &[ch, c1, 1, 1], c1, seed)?;
        store.init_zeros(&format!("head.{name}.b"), &[ch])?;
    }
    Ok(())
}

// ---- loss stack ----

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub gamma: f64,
    pub beta_cls: f64,
    pub beta_loc: f64,
    pub beta_dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 2.0, beta_cls: 1.0, beta_loc: 0.25, beta_dir: 0.2 }
    }
}

/// Focal term for one (anchor, class) entry.
pub fn focal_term(p_t: f64, gamma: f64) -> f64 {
    -(1.0 - p_t).powf(gamma) * p_t.max(FOCAL_CLAMP).ln()
}

/// Elementwise smooth-L1.
pub fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Weighted combination normalized by the positive count (clamped to 1).
pub fn combine_losses(cls: f64, loc: f64, dir: f64, n_pos: usize, w: &LossWeights) -> f64 {
    (w.beta_cls * cls + w.beta_loc * loc + w.beta_dir * dir) / n_pos.max(1) as f64
}

pub struct LossBreakdown {
    pub total: VarId,
    pub cls: VarId,
    pub loc: VarId,
    pub dir: VarId,
    pub n_pos: usize,
}

/// Assembles the full detection loss on the tape.
///
/// Every component is a raw sum: sigmoid focal loss over the (anchor, class)
/// entries of non-ignored anchors, smooth-L1 over the seven residuals of
/// every positive, cross-entropy over positives for direction. The total is
/// the beta-weighted sum of those three divided once by max(n_pos, 1), so
/// after that division loc and dir read as per-positive means while cls keeps
/// the weight it needs to shape the shared trunk. Head layouts: cls channel
/// a*K + k, reg channel a*7 + j, dir channel a*2 + bit, over the output grid.
pub fn detection_loss<S: Scalar>(
    tape: &mut Tape<S>,
    head: &HeadOut,
    assignment: &TargetAssignment,
    grid: &AnchorGrid,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let classes = grid.classes;
    let per_loc = grid.per_location();
    let hw = grid.h_out * grid.w_out;
    let expect_cls = [per_loc * classes, grid.h_out, grid.w_out];
    if tape.dims(head.cls) != expect_cls {
        return Err(Error::shape(
            "detection_loss",
            format!("cls head {:?}, expected {:?}", tape.dims(head.cls), expect_cls),
        ));
    }

    // classification entries for every non-ignored anchor
    let mut cls_idx = Vec::new();
    let mut cls_tgt = Vec::new();
    for (global, label) in assignment.labels.iter().enumerate() {
        let (loc, a) = (global / per_loc, global % per_loc);
        let pos_class = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive(_) => Some(grid.anchor(global).class_id as usize),
            AnchorLabel::Negative => None,
        };
        for k in 0..classes {
            cls_idx.push((a * classes + k) * hw + loc);
            cls_tgt.push(pos_class == Some(k));
        }
    }
    let l_cls = if cls_idx.is_empty() {
        tape.constant(Tensor::scalar(S::zero()))
    } else {
        let n = cls_idx.len();
        let logits = tape.gather(head.cls, Arc::new(cls_idx), &[n, 1])?;
        let p = tape.sigmoid(logits)?;
        let t = tape.constant(Tensor::from_fn(&[n, 1], |i| {
            if cls_tgt[i] {
                S::one()
            } else {
                S::zero()
            }
        })?);
        let not_t = tape.constant(Tensor::from_fn(&[n, 1], |i| {
            if cls_tgt[i] {
                S::zero()
            } else {
                S::one()
            }
        })?);
        let ones = tape.constant(Tensor::filled(&[n, 1], S::one())?);
        let p_hit = tape.mul(t, p)?;
        let p_comp = tape.sub(ones, p)?;
        let p_miss = tape.mul(not_t, p_comp)?;
        let p_t = tape.add(p_hit, p_miss)?;
        let p_t = tape.clamp_min(p_t, S::lit(FOCAL_CLAMP))?;
        let ln_pt = tape.ln(p_t)?;
        let margin = tape.sub(ones, p_t)?;
        let mod_factor = tape.pow_const(margin, S::lit(weights.gamma))?;
        let terms = tape.mul(mod_factor, ln_pt)?;
        let sum = tape.sum_all(terms)?;
        tape.affine(sum, -S::one(), S::zero())?
    };

    let n_pos = assignment.n_pos();
    let (l_loc, l_dir) = if n_pos == 0 {
        (
            tape.constant(Tensor::scalar(S::zero())),
            tape.constant(Tensor::scalar(S::zero())),
        )
    } else {
        let mut reg_idx = Vec::with_capacity(n_pos * BOX_PARAMS);
        let mut reg_tgt = Vec::with_capacity(n_pos * BOX_PARAMS);
        let mut dir_idx = Vec::with_capacity(n_pos * 2);
        let mut dir_bit = Vec::with_capacity(n_pos);
        for (global, delta, bit) in &assignment.residuals {
            let (loc, a) = (global / per_loc, global % per_loc);
            for (j, d) in delta.iter().enumerate() {
                reg_idx.push((a * BOX_PARAMS + j) * hw + loc);
                reg_tgt.push(S::from_f32c(*d));
            }
            for b in 0..2 {
                dir_idx.push((a * 2 + b) * hw + loc);
            }
            dir_bit.push(*bit);
        }
        let pred = tape.gather(head.reg, Arc::new(reg_idx), &[n_pos, BOX_PARAMS])?;
        let tgt = tape.constant(Tensor::from_vec(&[n_pos, BOX_PARAMS], reg_tgt)?);
        let diff = tape.sub(pred, tgt)?;
        let hub = tape.huber(diff)?;
        let l_loc = tape.sum_all(hub)?;

        let dir_logits = tape.gather(head.dir, Arc::new(dir_idx), &[n_pos, 2])?;
        let ls = tape.log_softmax_rows(dir_logits)?;
        let picked_idx: Vec<usize> = dir_bit.iter().enumerate().map(|(r, &b)| r * 2 + b).collect();
        let picked = tape.gather(ls, Arc::new(picked_idx), &[n_pos, 1])?;
        let sum = tape.sum_all(picked)?;
        let l_dir = tape.affine(sum, -S::one(), S::zero())?;
        (l_loc, l_dir)
    };

    let n = S::from_usize(n_pos.max(1)).unwrap();
    let a = tape.affine(l_cls, S::lit(weights.beta_cls) / n, S::zero())?;
    let b = tape.affine(l_loc, S::lit(weights.beta_loc) / n, S::zero())?;
    let c = tape.affine(l_dir, S::lit(weights.beta_dir) / n, S::zero())?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossBreakdown { total, cls: l_cls, loc: l_loc, dir: l_dir, n_pos })
}

/// Decodes head outputs into boxes: per anchor, the score is the sigmoid of
/// its own class's logit; candidates above the threshold are residual-decoded
/// (with the direction fix) and filtered by greedy per-class NMS.
pub fn decode_detections<S: Scalar>(
    cls: &Tensor<S>,
    reg: &Tensor<S>,
    dir: &Tensor<S>,
    grid: &AnchorGrid,
    score_thr: f32,
    nms_iou: f32,
    max_out: usize,
) -> Result<Vec<Detection>> {
    let per_loc = grid.per_location();
    let hw = grid.h_out * grid.w_out;
    let classes = grid.classes;
    if cls.dims() != [per_loc * classes, grid.h_out, grid.w_out] {
        return Err(Error::shape(
            "decode_detections",
            format!("cls {:?} does not match a {}x{} grid", cls.dims(), grid.h_out, grid.w_out),
        ));
    }
    let mut cands = Vec::new();
    for idx in 0..grid.len() {
        let (loc, a) = (idx / per_loc, idx % per_loc);
        let anchor = grid.anchor(idx);
        let k = anchor.class_id as usize;
        let logit = cls.data()[(a * classes + k) * hw + loc].to_f32c();
        let score = 1.0 / (1.0 + (-logit).exp());
        if score < score_thr {
            continue;
        }
        let mut delta = [0.0f32; BOX_PARAMS];
        for (j, d) in delta.iter_mut().enumerate() {
            *d = reg.data()[(a * BOX_PARAMS + j) * hw + loc].to_f32c();
        }
        let d0 = dir.data()[a * 2 * hw + loc].to_f32c();
        let d1 = dir.data()[(a * 2 + 1) * hw + loc].to_f32c();
        let boxp = decode_box(&anchor, &delta, d1 > d0);
        cands.push(Detection { boxp, score });
    }
    Ok(nms(cands, nms_iou, max_out))
}
