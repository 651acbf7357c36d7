//! Scalar schedules used by training loops.

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero
/// across the remaining steps. `step` counts from 0; `total` is the run
/// length in steps.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let step = step.min(total);
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total.saturating_sub(warmup)).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Cosine interpolation from `a` at `t = 0` to `b` at `t = 1` (`t` clamped).
pub fn cosine_between(a: f64, b: f64, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    a + (b - a) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
}

/// Linear interpolation from `a` at `t = 0` to `b` at `t = 1` (`t` clamped).
pub fn linear_between(a: f64, b: f64, t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    a + (b - a) * t
}
