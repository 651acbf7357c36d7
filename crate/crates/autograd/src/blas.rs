//! BLAS kernel selection.
//!
//! OpenBLAS picks its compute kernels at load time by matching the CPU model
//! string. Virtual machines frequently mask that string (reporting a bare
//! "Intel(R) Xeon(R) Processor"), in which case OpenBLAS silently falls back
//! to a generic pre-AVX kernel that is ~5x slower than what the hardware can
//! do. `OPENBLAS_CORETYPE` overrides the detection, and it is honored only if
//! it is set before the library initializes — so every matrix multiply in
//! this crate calls [`ensure_blas_kernel`] first.

use std::sync::Once;

static KERNEL_INIT: Once = Once::new();

/// Pick the OpenBLAS kernel family from CPUID feature flags instead of the
/// (possibly masked) CPU model string, then force library initialization so
/// the choice is locked in. Idempotent and cheap after the first call; a
/// user-provided `OPENBLAS_CORETYPE` always wins.
pub fn ensure_blas_kernel() {
    KERNEL_INIT.call_once(|| {
        #[cfg(target_arch = "x86_64")]
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            let core = if std::arch::is_x86_feature_detected!("avx512f") {
                Some("SKYLAKEX")
            } else if std::arch::is_x86_feature_detected!("avx2") {
                Some("HASWELL")
            } else {
                None
            };
            if let Some(core) = core {
                std::env::set_var("OPENBLAS_CORETYPE", core);
            }
        }
        // Trigger OpenBLAS initialization inside the guarded section so the
        // environment cannot change underneath it later.
        let a = ndarray::Array2::<f32>::zeros((1, 1));
        let b = ndarray::Array2::<f32>::zeros((1, 1));
        let mut c = ndarray::Array2::<f32>::zeros((1, 1));
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    });
}
