//! Parameter initialization helpers.

use ndarray::Array2;
use rand_core::RngCore;

use crate::scalar::Scalar;

/// Box–Muller standard-normal sampler over any `RngCore`. Uses `libm` for
/// the transcendentals so the draw sequence is identical across platforms.
pub struct NormalSampler {
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new() -> Self {
        NormalSampler { spare: None }
    }

    fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
        // 53 random bits → uniform in [0, 1).
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample<R: RngCore>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // Guard u1 away from zero so ln() stays finite.
        let u1 = (1.0 - Self::uniform01(rng)).max(f64::MIN_POSITIVE);
        let u2 = Self::uniform01(rng);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

impl Default for NormalSampler {
    fn default() -> Self {
        Self::new()
    }
}

/// Truncated-normal initialization: standard normal draws rejected outside
/// ±2, then scaled by `std`.
pub fn trunc_normal<F: Scalar, R: RngCore>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<F> {
    let mut sampler = NormalSampler::new();
    let mut out = Array2::zeros(shape);
    for v in out.iter_mut() {
        let z = loop {
            let z = sampler.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = F::from_f64(z * std);
    }
    out
}
