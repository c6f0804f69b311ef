//! Detection metrics: greedy center-distance matching at fixed thresholds,
//! 101-point interpolated average precision per class, and the mean over all
//! class/threshold cells that have ground truth.

use std::time::Instant;

use anyhow::Result;
use tctr_core::boxes::Detection;
use tctr_core::model::{self, ModelConfig};
use tctr_core::params::ParamStore;
use tctr_core::pillars::{GtBox, SequenceSample};

/// Center-distance match thresholds in meters.
pub const MATCH_THRESHOLDS: [f32; 2] = [0.5, 1.0];
const RECALL_POINTS: usize = 101;

/// One prediction after matching: its score and whether it hit a ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Scored {
    pub score: f32,
    pub tp: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// `per_class[k][t]` is the AP of class `k` at `MATCH_THRESHOLDS[t]`;
    /// `None` when the class has no ground truth anywhere in the set.
    pub per_class: Vec<[Option<f64>; 2]>,
    pub map: f64,
    pub tp: [usize; 2],
    pub fp: [usize; 2],
    pub missed: [usize; 2],
    pub sequences: usize,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("class  thr    ap\n");
        for (k, row) in self.per_class.iter().enumerate() {
            for (t, ap) in row.iter().enumerate() {
                match ap {
                    Some(v) => {
                        out.push_str(&format!("{k:<5}  {:<4.1}  {v:.4}\n", MATCH_THRESHOLDS[t]))
                    }
                    None => out.push_str(&format!("{k:<5}  {:<4.1}  n/a\n", MATCH_THRESHOLDS[t])),
                }
            }
        }
        for t in 0..2 {
            out.push_str(&format!(
                "thr {:.1}: tp={} fp={} missed={}\n",
                MATCH_THRESHOLDS[t], self.tp[t], self.fp[t], self.missed[t]
            ));
        }
        out.push_str(&format!("map = {:.4}\n", self.map));
        out
    }
}

/// Matches one sample's detections of one class against its ground truth,
/// greedily in score order: each detection takes the nearest still-unmatched
/// ground truth within `thr` meters (center distance in the ground plane).
pub fn match_sample(dets: &[Detection], gts: &[GtBox], class: u32, thr: f32) -> (Vec<Scored>, usize) {
    let gts: Vec<&GtBox> = gts.iter().filter(|g| g.class_id == class).collect();
    let mut taken = vec![false; gts.len()];
    let mut scored = Vec::new();
    // Detector output is already score-sorted; sort again so the contract
    // holds for arbitrary input.
    let mut order: Vec<usize> =
        (0..dets.len()).filter(|&i| dets[i].boxp.class_id == class).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    for i in order {
        let d = &dets[i].boxp;
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist = ((d.x - g.x).powi(2) + (d.y - g.y).powi(2)).sqrt();
            if dist <= thr && best.map_or(true, |(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            scored.push(Scored { score: dets[i].score, tp: true });
        } else {
            scored.push(Scored { score: dets[i].score, tp: false });
        }
    }
    let missed = taken.iter().filter(|&&t| !t).count();
    (scored, missed)
}

/// 101-point interpolated AP from pooled scored predictions. Predictions are
/// ranked by descending score (ties by insertion order); the precision at
/// each recall grid point is the maximum precision at any rank whose recall
/// reaches it.
pub fn average_precision(scored: &[Scored], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<usize> = (0..scored.len()).collect();
    ranked.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for (rank, &i) in ranked.iter().enumerate() {
        if scored[i].tp {
            tp += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / (rank + 1) as f64;
        pr.push((recall, precision));
    }
    let mut ap = 0.0;
    for s in 0..RECALL_POINTS {
        let r = s as f64 / (RECALL_POINTS - 1) as f64;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    Some(ap / RECALL_POINTS as f64)
}

/// Runs the detector over every sequence and scores it.
pub fn evaluate(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    data: &[SequenceSample],
) -> Result<EvalReport> {
    let start = Instant::now();
    let dets: Vec<Vec<Detection>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| model::detect(store, cfg, s, i as u64))
        .collect::<std::result::Result<_, _>>()?;
    let mut per_class = vec![[None, None]; cfg.classes];
    let mut tp = [0usize; 2];
    let mut fp = [0usize; 2];
    let mut missed = [0usize; 2];
    for class in 0..cfg.classes as u32 {
        for (t, thr) in MATCH_THRESHOLDS.iter().enumerate() {
            let mut pooled: Vec<Scored> = Vec::new();
            let mut n_gt = 0usize;
            for (sample, det) in data.iter().zip(&dets) {
                let gts = &sample.frames[sample.target].gt;
                let (scored, miss) = match_sample(det, gts, class, *thr);
                n_gt += gts.iter().filter(|g| g.class_id == class).count();
                tp[t] += scored.iter().filter(|s| s.tp).count();
                fp[t] += scored.iter().filter(|s| !s.tp).count();
                missed[t] += miss;
                pooled.extend(scored);
            }
            per_class[class as usize][t] = average_precision(&pooled, n_gt);
        }
    }
    let cells: Vec<f64> = per_class.iter().flatten().filter_map(|ap| *ap).collect();
    let map = if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 };
    Ok(EvalReport {
        per_class,
        map,
        tp,
        fp,
        missed,
        sequences: data.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
