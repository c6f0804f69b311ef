//! One-cycle learning-rate schedule: linear warmup from lr/10 to the peak
//! over the first 30% of steps, then cosine decay down to lr/100.

const WARMUP_FRAC: f64 = 0.3;
const START_DIV: f64 = 10.0;
const END_DIV: f64 = 100.0;

pub fn one_cycle(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    assert!(total_steps > 0, "schedule needs at least one step");
    assert!(step < total_steps, "step {step} out of range for {total_steps} steps");
    if total_steps == 1 {
        return lr_max;
    }
    let p = step as f64 / (total_steps - 1) as f64;
    let lr_start = lr_max / START_DIV;
    let lr_end = lr_max / END_DIV;
    if p <= WARMUP_FRAC {
        lr_start + (lr_max - lr_start) * (p / WARMUP_FRAC)
    } else {
        let q = (p - WARMUP_FRAC) / (1.0 - WARMUP_FRAC);
        lr_end + 0.5 * (lr_max - lr_end) * (1.0 + (std::f64::consts::PI * q).cos())
    }
}
