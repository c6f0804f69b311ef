//! Finite-difference gradient verification in f64.
//!
//! One analytic backward pass is compared against central differences at
//! randomly probed parameter entries. Probes restart from cached intermediate
//! activations where the dataflow allows it: a parameter can only influence
//! the loss downstream of its own stage, so perturbing, say, a head weight
//! never changes the refined feature map feeding the head.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{bail, Result};
use tctr_core::autodiff::Tape;
use tctr_core::boxes::{assign_targets, class_stats, AnchorGrid, TargetAssignment};
use tctr_core::model::{self, ModelConfig};
use tctr_core::params::ParamStore;
use tctr_core::refine_head::{detection_loss, head_forward, upsample_refine};
use tctr_core::rng;
use tctr_core::synthlidar::{generate_sequence, SceneConfig};
use tctr_core::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;
/// Each retry shrinks the probe interval by this factor.
const STEP_SHRINK: f64 = 64.0;
/// Probes at or below this disagreement stop refining early.
const ACCEPT_EARLY: f64 = 1e-5;
/// Levels of step refinement per probe (including the first).
const STEP_LEVELS: i32 = 3;

/// Relative disagreement with an absolute floor, so gradients near zero do
/// not divide by themselves.
pub fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR)
}

/// Central difference of `eval` along one parameter entry.
pub fn central_diff(
    store: &mut ParamStore<f64>,
    name: &str,
    idx: usize,
    h: f64,
    eval: &mut dyn FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<f64> {
    let base = store.value(name)?.clone();
    let dims = base.dims().to_vec();
    let mut bump = |delta: f64, store: &mut ParamStore<f64>| -> Result<f64> {
        let mut data = base.data().to_vec();
        data[idx] += delta;
        store.set_value(name, Tensor::from_vec(&dims, data)?)?;
        eval(store)
    };
    let plus = bump(h, store)?;
    let minus = bump(-h, store)?;
    store.set_value(name, base)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    pub max_rel: f64,
    pub probes: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub max_rel: f64,
    pub probes: usize,
    pub wall_seconds: f64,
}

impl GradReport {
    pub fn render(&self) -> String {
        let mut out = String::from("group      probes  max_rel_err\n");
        for g in &self.groups {
            out.push_str(&format!("{:<10} {:>6}  {:.3e}\n", g.group, g.probes, g.max_rel));
        }
        out.push_str(&format!(
            "overall    {:>6}  {:.3e}  ({:.1}s)\n",
            self.probes, self.max_rel, self.wall_seconds
        ));
        out
    }
}

/// Which cached activation a probe of a given parameter may restart from.
#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Full,
    FromFrames,
    FromFused,
    FromRefined,
}

fn stage_of(name: &str) -> Stage {
    match name.split('.').next().unwrap_or("") {
        "pfn" | "backbone" => Stage::Full,
        "tctr" | "temporal" | "fuse" => Stage::FromFrames,
        "refine" => Stage::FromFused,
        "head" => Stage::FromRefined,
        _ => Stage::Full,
    }
}

/// Moves every parameter to a generic point. Biases initialize to exactly
/// zero while empty pillar cells contribute exactly zero input, which parks
/// whole channels on the ReLU kink; there the loss is one-sided and central
/// differences cannot agree with any subgradient. A small random offset makes
/// kink hits measure-zero.
fn nudge_off_kinks(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let mut rng = rng::stream(seed, &format!("gradcheck/nudge/{name}"));
        let t = store.value(&name)?;
        let dims = t.dims().to_vec();
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|v| {
                let sign = if rng::uniform(&mut rng, 0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                v + sign * rng::uniform(&mut rng, 0.01, 0.05)
            })
            .collect();
        store.set_value(&name, Tensor::from_vec(&dims, data)?)?;
    }
    Ok(())
}

struct Caches {
    xs: Vec<Tensor<f64>>,
    target_pos: usize,
    fused: Tensor<f64>,
    g: Option<Tensor<f64>>,
    refined: Tensor<f64>,
    grid: AnchorGrid,
    assignment: TargetAssignment,
}

/// Checks every registered parameter of a model built from `cfg` against
/// central differences on one generated scene. `probes_per_param` entries of
/// each tensor are tested (all of them when the tensor is smaller).
pub fn gradcheck_model(
    cfg: &ModelConfig,
    scene: &SceneConfig,
    seed: u64,
    probes_per_param: usize,
    h: f64,
) -> Result<GradReport> {
    let start = Instant::now();
    let mut store = ParamStore::<f64>::new();
    model::register_model_params(&mut store, cfg, seed)?;
    nudge_off_kinks(&mut store, seed)?;
    let sample = generate_sequence(scene, seed)?;
    let stats = class_stats(std::slice::from_ref(&sample), cfg.classes, &model::default_stats(cfg.classes));
    model::set_class_stats(&mut store, &stats)?;
    let voxel_seed = seed;

    // Analytic gradients and stage caches from one forward/backward pass.
    let mut tape = Tape::new();
    let (fw, loss) = model::loss_forward(&mut tape, &store, cfg, &sample, voxel_seed)?;
    tape.backward(loss.total, &mut store)?;
    let analytic: BTreeMap<String, Tensor<f64>> = store
        .entries()
        .into_iter()
        .map(|(n, _, g)| (n.to_string(), g.clone()))
        .collect();
    let window = model::frame_window(&sample, cfg.n_frames())?;
    let grid = model::anchor_grid(cfg, &store)?;
    let caches = Caches {
        xs: fw.frames.iter().map(|&v| tape.value(v).clone()).collect(),
        target_pos: sample.target - window.start,
        fused: tape.value(fw.fused).clone(),
        g: fw.g.map(|v| tape.value(v).clone()),
        refined: tape.value(fw.refined).clone(),
        assignment: assign_targets(&grid, &sample.frames[sample.target].gt, cfg.pos_thr, cfg.neg_thr),
        grid,
    };
    drop(tape);

    let eval_loss = |tape: &mut Tape<f64>,
                     store: &ParamStore<f64>,
                     caches: &Caches,
                     stage: Stage|
     -> Result<f64> {
        let head = match stage {
            Stage::Full => {
                let (fw, loss) = model::loss_forward(tape, store, cfg, &sample, voxel_seed)?;
                let _ = fw;
                return Ok(tape.value(loss.total).item()?);
            }
            Stage::FromFrames => {
                let xs = caches.xs.iter().map(|t| tape.constant(t.clone())).collect();
                model::detect_from_frames(tape, store, cfg, xs, caches.target_pos)?.head
            }
            Stage::FromFused => {
                let fused = tape.constant(caches.fused.clone());
                let g = caches.g.as_ref().map(|t| tape.constant(t.clone())).unwrap_or(fused);
                let refined =
                    upsample_refine(tape, store, fused, g, cfg.refine_stages, cfg.gated_refine())?;
                head_forward(tape, store, refined)?
            }
            Stage::FromRefined => {
                let refined = tape.constant(caches.refined.clone());
                head_forward(tape, store, refined)?
            }
        };
        let loss = detection_loss(tape, &head, &caches.assignment, &caches.grid, &cfg.loss)?;
        tape.value(loss.total).item().map_err(Into::into)
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut probes = 0usize;
    for name in names {
        let stage = stage_of(&name);
        let numel = store.value(&name)?.numel();
        let mut idxs: Vec<usize> = if numel <= probes_per_param {
            (0..numel).collect()
        } else {
            let mut rng = rng::stream(seed, &format!("gradcheck/{name}"));
            let mut picks: Vec<usize> =
                (0..probes_per_param).map(|_| rng::uniform(&mut rng, 0.0, numel as f64) as usize).collect();
            picks.sort_unstable();
            picks.dedup();
            picks
        };
        idxs.retain(|&i| i < numel);
        let group_key = name.split('.').next().unwrap_or("").to_string();
        let entry = groups.entry(group_key.clone()).or_insert(GroupReport {
            group: group_key,
            max_rel: 0.0,
            probes: 0,
        });
        for idx in idxs {
            let an = analytic[&name].data()[idx];
            // Two failure modes limit naive central differences at full
            // scale. A ReLU or max kink inside the probe interval turns the
            // two-sided estimate into an average of two slopes; shrinking the
            // step evicts the kink. And for directions whose derivative is
            // orders of magnitude below the loss scale, quadratic truncation
            // already exceeds the target precision at any step roundoff
            // allows; extrapolating two steps cancels that term. A wrong
            // analytic gradient disagrees with every estimate at every step,
            // so taking the best-agreeing estimate cannot mask real defects.
            let mut rel = f64::INFINITY;
            'levels: for level in 0..STEP_LEVELS {
                let step = h / STEP_SHRINK.powi(level);
                let mut eval = |s: &ParamStore<f64>| {
                    let mut tape = Tape::new();
                    eval_loss(&mut tape, s, &caches, stage)
                };
                let d1 = central_diff(&mut store, &name, idx, step, &mut eval)?;
                let d2 = central_diff(&mut store, &name, idx, step * 0.5, &mut eval)?;
                let richardson = (4.0 * d2 - d1) / 3.0;
                for fd in [d1, d2, richardson] {
                    rel = rel.min(relative_error(fd, an));
                    if rel <= ACCEPT_EARLY {
                        break 'levels;
                    }
                }
            }
            if rel > entry.max_rel {
                entry.max_rel = rel;
            }
            entry.probes += 1;
            probes += 1;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    if probes == 0 {
        bail!("no parameters probed");
    }
    Ok(GradReport {
        groups: groups.into_values().collect(),
        max_rel,
        probes,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
