//! Shared test helpers: a brute-force reference for the matcher/AP pipeline.

#![allow(dead_code)]

use tctr_core::boxes::Detection;
use tctr_core::pillars::GtBox;
use tctr_core::rng;
use tctr_harness::evaluate::{average_precision, match_sample};

#[derive(Clone, Debug)]
pub struct Instance {
    pub preds: Vec<(f32, f32, f32)>, // x, y, score
    pub gts: Vec<(f32, f32)>,
    pub thr: f32,
}

pub fn gt_box(x: f32, y: f32) -> GtBox {
    GtBox { x, y, z: 0.0, l: 1.0, w: 1.0, h: 1.0, yaw: 0.0, class_id: 0 }
}

pub fn detections(inst: &Instance) -> Vec<Detection> {
    inst.preds.iter().map(|&(x, y, s)| Detection { boxp: gt_box(x, y), score: s }).collect()
}

pub fn gts(inst: &Instance) -> Vec<GtBox> {
    inst.gts.iter().map(|&(x, y)| gt_box(x, y)).collect()
}

pub fn harness_ap(inst: &Instance) -> Option<f64> {
    let (scored, _) = match_sample(&detections(inst), &gts(inst), 0, inst.thr);
    average_precision(&scored, inst.gts.len())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for slot in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(slot, n - 1);
            out.push(p);
        }
    }
    out
}

/// Every ordering that sorts the scores in non-increasing order; ties admit
/// more than one.
fn score_consistent_orderings(scores: &[f32]) -> Vec<Vec<usize>> {
    permutations(scores.len())
        .into_iter()
        .filter(|p| p.windows(2).all(|w| scores[w[0]] >= scores[w[1]]))
        .collect()
}

/// Greedy replay for one fixed ordering: each prediction claims the nearest
/// unclaimed ground truth within the threshold. Returns hit flags in ordering
/// order.
fn replay_matching(inst: &Instance, order: &[usize]) -> Vec<bool> {
    let mut taken = vec![false; inst.gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &i in order {
        let (px, py, _) = inst.preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &(gx, gy)) in inst.gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let dist = (((px - gx) as f64).powi(2) + ((py - gy) as f64).powi(2)).sqrt();
            if dist <= inst.thr as f64 && best.map_or(true, |(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    hits
}

/// Plain 101-point interpolated AP over ranked hit flags: for every recall
/// grid value take the best precision among ranks whose recall reaches it.
fn reference_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for s in 0..101 {
        let r = s as f64 / 100.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &points {
            if rec >= r - 1e-12 && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 101.0
}

/// AP of every score-consistent ordering. The first entry uses the stable
/// ordering (score descending, original index ascending), which is the
/// tie-break the harness documents.
pub fn oracle_aps(inst: &Instance) -> Vec<f64> {
    let scores: Vec<f32> = inst.preds.iter().map(|p| p.2).collect();
    let mut orderings = score_consistent_orderings(&scores);
    let stable_pos = orderings
        .iter()
        .position(|p| p.windows(2).all(|w| scores[w[0]] > scores[w[1]] || w[0] < w[1]))
        .expect("stable ordering is always score-consistent");
    orderings.swap(0, stable_pos);
    orderings.iter().map(|o| reference_ap(&replay_matching(inst, o), inst.gts.len())).collect()
}

pub fn random_instance(r: &mut rng::Stream, quantize_scores: bool) -> Instance {
    let n_preds = (rng::uniform(r, 0.0, 6.0) as usize).min(5);
    let n_gts = (rng::uniform(r, 1.0, 4.0) as usize).min(3);
    let mut preds = Vec::with_capacity(n_preds);
    for _ in 0..n_preds {
        let x = rng::uniform(r, -2.5, 2.5) as f32;
        let y = rng::uniform(r, -2.5, 2.5) as f32;
        let mut s = rng::uniform(r, 0.05, 1.0);
        if quantize_scores {
            s = (s * 4.0).round() / 4.0;
        }
        preds.push((x, y, s as f32));
    }
    let mut gts = Vec::with_capacity(n_gts);
    for _ in 0..n_gts {
        let x = rng::uniform(r, -2.5, 2.5) as f32;
        let y = rng::uniform(r, -2.5, 2.5) as f32;
        gts.push((x, y));
    }
    let thr = if rng::uniform(r, 0.0, 1.0) < 0.5 { 0.5 } else { 1.0 };
    Instance { preds, gts, thr }
}
