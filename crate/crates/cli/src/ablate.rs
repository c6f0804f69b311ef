//! Ablation axes: families of model variants trained and evaluated under
//! identical seeds, data, and step budgets, reported as a deterministic table.

use std::io::Write;

use anyhow::{bail, Result};
use tctr_core::model::{ModelConfig, TemporalMode};
use tctr_core::pillars::SequenceSample;
use tctr_core::refine_head::FusionMode;
use tctr_core::tctr::EncoderVariant;

use crate::config::RunConfig;
use crate::evaluate::{evaluate, EvalReport, MATCH_THRESHOLDS};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Architecture ladder: single-frame baseline, naive frame concatenation,
    /// temporal transformer, temporal transformer plus gated refinement.
    Framework,
    /// Which token axis the encoder attends over.
    Encoder,
    /// How the temporal map is combined with the target frame.
    Fusion,
    /// Temporal window size: 1, 3, or 5 frames.
    Frames,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "framework" => Ok(Axis::Framework),
            "encoder" => Ok(Axis::Encoder),
            "fusion" => Ok(Axis::Fusion),
            "frames" => Ok(Axis::Frames),
            other => bail!("unknown ablation axis {other:?} (framework|encoder|fusion|frames)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Framework => "framework",
            Axis::Encoder => "encoder",
            Axis::Fusion => "fusion",
            Axis::Frames => "frames",
        }
    }
}

/// The variant list for an axis, derived from a base model config.
pub fn variants(axis: Axis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    match axis {
        Axis::Framework => {
            let mut baseline = base.clone();
            baseline.temporal = TemporalMode::TargetOnly;
            baseline.refine_stages = 0;
            out.push(("baseline".to_string(), baseline));
            let mut concat = base.clone();
            concat.temporal = TemporalMode::ConcatFrames;
            concat.fusion = FusionMode::GOnly;
            concat.refine_stages = 0;
            out.push(("concat".to_string(), concat));
            let mut tctr = base.clone();
            tctr.temporal = TemporalMode::Tctr;
            tctr.fusion = FusionMode::GOnly;
            tctr.refine_stages = 0;
            out.push(("tctr".to_string(), tctr));
            let mut full = base.clone();
            full.temporal = TemporalMode::Tctr;
            full.fusion = FusionMode::Gate;
            out.push(("tctr_frm".to_string(), full));
        }
        Axis::Encoder => {
            for variant in [
                EncoderVariant::TemporalOnly,
                EncoderVariant::ChannelOnly,
                EncoderVariant::TemporalChannel,
            ] {
                let mut cfg = base.clone();
                cfg.temporal = TemporalMode::Tctr;
                cfg.tctr.variant = variant;
                out.push((variant.name().to_string(), cfg));
            }
        }
        Axis::Fusion => {
            for mode in [
                FusionMode::Gate,
                FusionMode::Concat,
                FusionMode::Add,
                FusionMode::XOnly,
                FusionMode::GOnly,
            ] {
                let mut cfg = base.clone();
                cfg.temporal = TemporalMode::Tctr;
                cfg.fusion = mode;
                out.push((mode.name().to_string(), cfg));
            }
        }
        Axis::Frames => {
            for (label, t) in [("n1", 0usize), ("n3", 1), ("n5", 2)] {
                let mut cfg = base.clone();
                cfg.temporal = TemporalMode::Tctr;
                cfg.tctr.t_radius = t;
                out.push((label.to_string(), cfg));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub map: f64,
    pub final_loss: f64,
    pub eval: EvalReport,
}

/// Trains and evaluates every variant of the axis on the same data.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    data: &[SequenceSample],
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, model) in variants(axis, &base.model) {
        writeln!(log, "== variant {name}")?;
        let mut cfg = base.clone();
        cfg.model = model;
        let result = train(&cfg, data, log)?;
        let eval = evaluate(&result.store, &cfg.model, data)?;
        writeln!(log, "variant {name}: map={:.4}", eval.map)?;
        rows.push(AblationRow {
            variant: name,
            map: eval.map,
            final_loss: result.final_loss(),
            eval,
        });
    }
    Ok(rows)
}

pub fn render_table(axis: Axis, rows: &[AblationRow], classes: usize) -> String {
    let mut out = format!("axis: {}\n", axis.name());
    out.push_str(&format!("{:<12} {:>8} {:>10}", "variant", "map", "final_loss"));
    for k in 0..classes {
        for thr in MATCH_THRESHOLDS {
            out.push_str(&format!(" {:>9}", format!("ap{k}@{thr:.1}")));
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<12} {:>8.4} {:>10.4}", row.variant, row.map, row.final_loss));
        for class_row in &row.eval.per_class {
            for ap in class_row {
                match ap {
                    Some(v) => out.push_str(&format!(" {v:>9.4}")),
                    None => out.push_str(&format!(" {:>9}", "n/a")),
                }
            }
        }
        out.push('\n');
    }
    out
}
