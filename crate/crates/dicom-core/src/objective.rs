//! The combined pre-training objective: masked pixel reconstruction,
//! token-level distillation over masked positions, and cross-view
//! class-token distillation — plus the temperature sharpening, running
//! teacher-logit standardization, and schedules that drive them.
//!
//! Everything here operates on plain arrays and is generic over the scalar,
//! so the same code serves the teacher path (no gradients), the f64
//! verification suite, and value checks against the tape ops the student
//! path uses.

use autograd::Scalar;
use ndarray::{Array1, Array2};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Probability floor applied inside every logarithm.
pub const EPS_LOG: f64 = 1e-8;
/// Smallest standard deviation the teacher standardizer divides by.
pub const STD_FLOOR: f64 = 1e-5;
/// How far a teacher probability row may drift from summing to one before
/// the distillation losses reject it.
pub const ROW_SUM_TOL: f64 = 1e-4;

// ── Elementary pieces ────────────────────────────────────────────────────

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Temperature-sharpened row softmax: `softmax(logits / temp)`. Lower
/// temperatures concentrate the distribution; `temp` must be positive.
pub fn sharpen<F: Scalar>(logits: &Array2<F>, temp: F) -> Result<Array2<F>> {
    if temp <= F::zero() {
        return Err(Error::Config(vec![format!(
            "sharpening temperature must be > 0, got {temp}"
        )]));
    }
    let scaled = logits.mapv(|v| v / temp);
    Ok(softmax_rows(&scaled))
}

/// Shannon entropy of one distribution, with 0·ln 0 taken as 0.
pub fn entropy<F: Scalar>(probs: &[F]) -> F {
    let mut h = F::zero();
    for &p in probs {
        if p > F::zero() {
            h = h - p * p.ln();
        }
    }
    h
}

/// Column means of a (rows, k) matrix.
pub fn column_means<F: Scalar>(x: &Array2<F>) -> Array1<F> {
    let n = F::from_f64(x.nrows() as f64);
    let mut out = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            out[j] += v;
        }
    }
    out.mapv_inplace(|v| v / n);
    out
}

// ── Teacher logit standardization ────────────────────────────────────────

/// Running per-dimension mean and standard deviation of teacher projection
/// logits — normalization without adaptive parameters. Each batch is
/// standardized with the *current* statistics, which are then folded in
/// with momentum (use-then-update), so a resumed run replays identically.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterStats<F> {
    mean: Array1<F>,
    std: Array1<F>,
    momentum: F,
}

impl<F: Scalar> CenterStats<F> {
    /// Fresh statistics: mean 0, std 1.
    pub fn new(k: usize, momentum: F) -> Self {
        CenterStats { mean: Array1::zeros(k), std: Array1::from_elem(k, F::one()), momentum }
    }

    /// Rebuild from checkpointed state.
    pub fn from_parts(mean: Array1<F>, std: Array1<F>, momentum: F) -> Self {
        assert_eq!(mean.len(), std.len(), "center stats shape");
        CenterStats { mean, std, momentum }
    }

    pub fn mean(&self) -> &Array1<F> {
        &self.mean
    }

    pub fn std(&self) -> &Array1<F> {
        &self.std
    }

    /// `(x − mean) / max(std, floor)` per column.
    pub fn standardize(&self, logits: &Array2<F>) -> Array2<F> {
        assert_eq!(logits.ncols(), self.mean.len(), "standardize width");
        let floor = F::from_f64(STD_FLOOR);
        let mut out = logits.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j].maximum(floor);
            }
        }
        out
    }

    /// Fold one batch of logits into the running statistics. Batch std is
    /// the population standard deviation of each column.
    pub fn update(&mut self, logits: &Array2<F>) {
        assert_eq!(logits.ncols(), self.mean.len(), "update width");
        assert!(logits.nrows() > 0, "update on an empty batch");
        let n = F::from_f64(logits.nrows() as f64);
        let batch_mean = column_means(logits);
        let mut batch_var = Array1::<F>::zeros(logits.ncols());
        for row in logits.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - batch_mean[j];
                batch_var[j] += d * d;
            }
        }
        batch_var.mapv_inplace(|v| (v / n).sqrt());
        let m = self.momentum;
        let rest = F::one() - m;
        for j in 0..self.mean.len() {
            self.mean[j] = m * self.mean[j] + rest * batch_mean[j];
            self.std[j] = m * self.std[j] + rest * batch_var[j];
        }
    }
}

// ── Loss terms ───────────────────────────────────────────────────────────

/// Masked L1 reconstruction: `Σ mask∘|pred − target|`, divided by the
/// number of masked entries (at least one) when `normalize` is set.
pub fn recon_loss<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
    mask: &Array2<F>,
    normalize: bool,
) -> Result<F> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Data(format!(
            "reconstruction loss shapes disagree: pred {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    let mut loss = F::zero();
    let mut weight = F::zero();
    for ((p, t), m) in pred.iter().zip(target.iter()).zip(mask.iter()) {
        loss = loss + *m * (*p - *t).abs();
        weight = weight + *m;
    }
    if normalize {
        loss = loss / weight.maximum(F::one());
    }
    Ok(loss)
}

fn check_prob_rows<F: Scalar>(probs: &Array2<F>, weights: Option<&Array1<F>>) -> Result<()> {
    let tol = F::from_f64(ROW_SUM_TOL);
    for (i, row) in probs.rows().into_iter().enumerate() {
        if let Some(w) = weights {
            if w[i] == F::zero() {
                continue;
            }
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            if v < F::zero() {
                return Err(Error::Data(format!(
                    "teacher probability row {i} has a negative entry"
                )));
            }
            sum += v;
        }
        if (sum - F::one()).abs() > tol {
            return Err(Error::Data(format!(
                "teacher probability row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Token-level distillation: weighted cross-entropy of sharpened student
/// rows against teacher distributions,
/// `Σ_i w_i · Σ_j −t[i,j] · ln max(softmax(s[i]/τ)[j], eps)`,
/// divided by `max(Σw, 1)` when `normalize` is set. Rows with zero weight
/// are skipped entirely; all others must carry valid distributions.
pub fn local_loss<F: Scalar>(
    student_logits: &Array2<F>,
    teacher_probs: &Array2<F>,
    weights: &Array1<F>,
    student_temp: F,
    normalize: bool,
) -> Result<F> {
    if student_logits.dim() != teacher_probs.dim() {
        return Err(Error::Data(format!(
            "distillation shapes disagree: student {:?}, teacher {:?}",
            student_logits.dim(),
            teacher_probs.dim()
        )));
    }
    if weights.len() != student_logits.nrows() {
        return Err(Error::Data(format!(
            "distillation weight count {} does not match {} rows",
            weights.len(),
            student_logits.nrows()
        )));
    }
    check_prob_rows(teacher_probs, Some(weights))?;
    let student = sharpen(student_logits, student_temp)?;
    let eps = F::from_f64(EPS_LOG);
    let mut loss = F::zero();
    let mut total_w = F::zero();
    for i in 0..student.nrows() {
        let w = weights[i];
        if w == F::zero() {
            continue;
        }
        total_w += w;
        let mut acc = F::zero();
        for j in 0..student.ncols() {
            acc = acc - teacher_probs[(i, j)] * student[(i, j)].maximum(eps).ln();
        }
        loss = loss + w * acc;
    }
    if normalize {
        loss = loss / total_w.maximum(F::one());
    }
    Ok(loss)
}

/// Cross-view class-token distillation: each view's teacher distribution
/// teaches the *other* view's student, summed over both directions and the
/// batch, `Σ_i [CE(t2_i, s1_i) + CE(t1_i, s2_i)]`, divided by the image
/// count when `normalize` is set.
pub fn global_loss<F: Scalar>(
    student_cls: [&Array2<F>; 2],
    teacher_cls_probs: [&Array2<F>; 2],
    student_temp: F,
    normalize: bool,
) -> Result<F> {
    let n = student_cls[0].nrows();
    for x in student_cls.iter().chain(teacher_cls_probs.iter()) {
        if x.nrows() != n || x.ncols() != student_cls[0].ncols() {
            return Err(Error::Data("cross-view class tokens have mismatched shapes".into()));
        }
    }
    let ones = Array1::from_elem(n, F::one());
    // Teacher of view 2 → student of view 1, and the reverse.
    let a = local_loss(student_cls[0], teacher_cls_probs[1], &ones, student_temp, false)?;
    let b = local_loss(student_cls[1], teacher_cls_probs[0], &ones, student_temp, false)?;
    let mut loss = a + b;
    if normalize {
        loss = loss / F::from_f64(n as f64);
    }
    Ok(loss)
}

/// The three loss terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle<F> {
    pub recon: F,
    pub local: F,
    pub global_: F,
    pub total: F,
}

/// Combine the terms: `total = α₁·recon + α₂·local + α₃·global`.
pub fn combine<F: Scalar>(recon: F, local: F, global_: F, alphas: (F, F, F)) -> LossBundle<F> {
    LossBundle { recon, local, global_, total: alphas.0 * recon + alphas.1 * local + alphas.2 * global_ }
}

// ── Schedules ────────────────────────────────────────────────────────────

/// The sharpening temperatures in force at a given epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
}

/// Student temperature is fixed; teacher temperature ramps linearly from
/// its start to its end value across the configured warmup epochs and then
/// holds.
pub fn temperatures(cfg: &RunConfig, epoch: u64) -> Temperatures {
    let t = if cfg.temp.warmup_epochs == 0 {
        1.0
    } else {
        epoch as f64 / cfg.temp.warmup_epochs as f64
    };
    Temperatures {
        student: cfg.temp.student,
        teacher: autograd::linear_between(cfg.temp.teacher_start, cfg.temp.teacher_end, t),
    }
}
