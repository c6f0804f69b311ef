//! Training loop: batched loss on a shared tape, one-cycle schedule, Adam,
//! per-step component logging, and a machine-readable run summary.

use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use tctr_core::autodiff::Tape;
use tctr_core::boxes::class_stats;
use tctr_core::model::{self, default_stats};
use tctr_core::params::ParamStore;
use tctr_core::pillars::{augment_sequence, SequenceSample};
use tctr_core::rng;
use tctr_core::Error;

use crate::config::RunConfig;
use crate::evaluate::EvalReport;
use crate::optim::Adam;
use crate::schedule::one_cycle;

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
    pub total: f64,
}

pub struct TrainResult {
    pub store: ParamStore<f32>,
    pub records: Vec<StepRecord>,
    pub wall_seconds: f64,
}

impl TrainResult {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.total)
    }
}

/// Trains a fresh model on `data`, writing one log line per step.
pub fn train(cfg: &RunConfig, data: &[SequenceSample], log: &mut dyn Write) -> Result<TrainResult> {
    if data.is_empty() {
        bail!("training set is empty");
    }
    let start = Instant::now();
    let mut store = ParamStore::<f32>::new();
    model::register_model_params(&mut store, &cfg.model, cfg.seed)?;
    let stats = class_stats(data, cfg.model.classes, &default_stats(cfg.model.classes));
    model::set_class_stats(&mut store, &stats)?;
    writeln!(log, "# params={} scalars={}", store.num_params(), store.num_scalars())?;

    let mut adam = Adam::new(cfg.train.beta1, cfg.train.beta2, cfg.train.eps);
    let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let lr = one_cycle(step, cfg.train.steps, cfg.train.lr);
        let mut tape = Tape::new();
        let mut batch_rng = rng::stream_indexed(cfg.seed, "train/batch", step as u64);
        let mut total_var = None;
        let (mut cls, mut loc, mut dir) = (0.0f64, 0.0f64, 0.0f64);
        for item in 0..cfg.train.batch_size {
            let idx = rng::uniform(&mut batch_rng, 0.0, data.len() as f64) as usize;
            let idx = idx.min(data.len() - 1);
            let draw = (step * cfg.train.batch_size + item) as u64;
            let mut aug_rng = rng::stream_indexed(cfg.seed, "train/aug", draw);
            let sample = augment_sequence(&data[idx], &cfg.aug, &mut aug_rng);
            let voxel_seed = cfg.seed ^ (draw + 1).wrapping_mul(0x9e3779b97f4a7c15);
            let (_, loss) = model::loss_forward(&mut tape, &store, &cfg.model, &sample, voxel_seed)?;
            cls += tape.value(loss.cls).item()? as f64;
            loc += tape.value(loss.loc).item()? as f64;
            dir += tape.value(loss.dir).item()? as f64;
            total_var = Some(match total_var {
                None => loss.total,
                Some(acc) => tape.add(acc, loss.total)?,
            });
        }
        let inv_b = 1.0 / cfg.train.batch_size as f64;
        let mean = tape.affine(total_var.unwrap(), inv_b as f32, 0.0)?;
        let total = tape.value(mean).item()? as f64;
        cls *= inv_b;
        loc *= inv_b;
        dir *= inv_b;
        if !total.is_finite() {
            let last = records.last().map_or_else(
                || "none recorded".to_string(),
                |r| format!("step {} cls={:.6} loc={:.6} dir={:.6} total={:.6}", r.step, r.cls, r.loc, r.dir, r.total),
            );
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {total}; last finite step: {last}"),
            }
            .into());
        }
        tape.backward(mean, &mut store)?;
        adam.step(&mut store, lr)?;
        writeln!(
            log,
            "step={step:>4} lr={lr:.6} cls={cls:.6} loc={loc:.6} dir={dir:.6} total={total:.6}"
        )?;
        records.push(StepRecord { step, lr, cls, loc, dir, total });
    }
    Ok(TrainResult { store, records, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Key=value run summary written next to the checkpoint.
pub fn run_summary(cfg: &RunConfig, result: &TrainResult, eval: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_hash={}\n", cfg.hash));
    out.push_str(&format!("seed={}\n", cfg.seed));
    out.push_str(&format!("steps={}\n", cfg.train.steps));
    out.push_str(&format!("initial_loss={:.6}\n", result.initial_loss()));
    out.push_str(&format!("final_loss={:.6}\n", result.final_loss()));
    out.push_str(&format!("map={:.6}\n", eval.map));
    for (k, row) in eval.per_class.iter().enumerate() {
        for (t, ap) in row.iter().enumerate() {
            let thr = crate::evaluate::MATCH_THRESHOLDS[t];
            match ap {
                Some(v) => out.push_str(&format!("per_class_ap.{k}.{thr:.1}={v:.6}\n")),
                None => out.push_str(&format!("per_class_ap.{k}.{thr:.1}=n/a\n")),
            }
        }
    }
    out.push_str(&format!(
        "wall_seconds={:.1}\n",
        result.wall_seconds + eval.wall_seconds
    ));
    out
}
