//! Decoupled-weight-decay adaptive moment optimizer.

use ndarray::Array2;

use crate::scalar::Scalar;

/// AdamW over an ordered list of parameter tensors.
///
/// Moment buffers are keyed by position, so callers must pass parameters in
/// a stable order on every step. Two deliberate behaviors:
///
/// * A tensor whose gradient is absent **or identically zero** is skipped
///   entirely for that step — no moment update and no weight decay — so an
///   all-zero objective leaves parameters bit-identical.
/// * Weight decay applies only where the caller's `decay` flag is set
///   (weight matrices; not biases, gains, or embeddings).
pub struct AdamW<F: Scalar> {
    beta1: F,
    beta2: F,
    eps: F,
    weight_decay: F,
    t: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(eps),
            weight_decay: F::from_f64(weight_decay),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]`/`lrs[i]`/`decay[i]` pair with
    /// `params[i]`; a `None` gradient skips the tensor.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<F>],
        grads: &[Option<&Array2<F>>],
        lrs: &[f64],
        decay: &[bool],
    ) {
        assert_eq!(params.len(), grads.len(), "params vs grads length");
        assert_eq!(params.len(), lrs.len(), "params vs lrs length");
        assert_eq!(params.len(), decay.len(), "params vs decay length");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        assert_eq!(params.len(), self.m.len(), "optimizer tensor count changed");

        self.t += 1;
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = F::one() - F::from_f64(beta1.to_f64().powi(self.t as i32));
        let bc2 = F::one() - F::from_f64(beta2.to_f64().powi(self.t as i32));
        let (one_m_b1, one_m_b2) = (F::one() - beta1, F::one() - beta2);

        for i in 0..params.len() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(g.dim(), params[i].dim(), "gradient shape for tensor {}", i);
            if g.iter().all(|&v| v == F::zero()) {
                continue;
            }
            let lr = F::from_f64(lrs[i]);
            let apply_decay = decay[i];
            let p = &mut *params[i];
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &gv| {
                    *m = beta1 * *m + one_m_b1 * gv;
                    *v = beta2 * *v + one_m_b2 * gv * gv;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    let mut upd = mhat / (vhat.sqrt() + eps);
                    if apply_decay {
                        upd = upd + wd * *p;
                    }
                    *p = *p - lr * upd;
                });
        }
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (u64, &[Array2<F>], &[Array2<F>]) {
        (self.t, &self.m, &self.v)
    }

    /// Restore a checkpointed state.
    pub fn restore(&mut self, t: u64, m: Vec<Array2<F>>, v: Vec<Array2<F>>) {
        assert_eq!(m.len(), v.len(), "moment buffer counts differ");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
