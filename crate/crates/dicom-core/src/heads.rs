//! The two heads attached to the backbone during pre-training: a pixel
//! decoder that recovers patches from token embeddings, and a projection
//! head mapping every token to prototype logits.
//!
//! Both share the same trunk shape — three fully connected layers with GeLU
//! between them, widths d → hidden → hidden → bottleneck. The decoder adds
//! a per-token linear recovery map bottleneck → p² whose outputs are
//! re-assembled on the patch grid (a stride-p transposed convolution over
//! the token grid, written out explicitly). The projection head ℓ2-
//! normalizes the bottleneck and multiplies by a prototype matrix whose
//! columns are kept at unit norm, so every logit is a cosine in [−1, 1].
//! The decoder exists only during pre-training; downstream code never
//! constructs one.

use autograd::{trunc_normal, Scalar, Tape, Var};
use ndarray::Array2;
use rand_core::RngCore;

use crate::error::{Error, Result};

/// ℓ2-normalization guard for near-zero bottleneck rows.
pub const NORM_EPS: f64 = 1e-12;

// ── Shared trunk ─────────────────────────────────────────────────────────

/// Three fully connected layers, GeLU after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk<F> {
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub w2: Array2<F>,
    pub b2: Array2<F>,
    pub w3: Array2<F>,
    pub b3: Array2<F>,
}

impl<F: Scalar> Trunk<F> {
    fn init(d: usize, hidden: usize, bottleneck: usize, rng: &mut impl RngCore) -> Self {
        Trunk {
            w1: trunc_normal((d, hidden), 0.02, rng),
            b1: Array2::zeros((1, hidden)),
            w2: trunc_normal((hidden, hidden), 0.02, rng),
            b2: Array2::zeros((1, hidden)),
            w3: trunc_normal((hidden, bottleneck), 0.02, rng),
            b3: Array2::zeros((1, bottleneck)),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>, bool)>) {
        out.extend([
            (format!("{prefix}.fc1.w"), &self.w1, true),
            (format!("{prefix}.fc1.b"), &self.b1, false),
            (format!("{prefix}.fc2.w"), &self.w2, true),
            (format!("{prefix}.fc2.b"), &self.b2, false),
            (format!("{prefix}.fc3.w"), &self.w3, true),
            (format!("{prefix}.fc3.b"), &self.b3, false),
        ]);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>, bool)>) {
        out.extend([
            (format!("{prefix}.fc1.w"), &mut self.w1, true),
            (format!("{prefix}.fc1.b"), &mut self.b1, false),
            (format!("{prefix}.fc2.w"), &mut self.w2, true),
            (format!("{prefix}.fc2.b"), &mut self.b2, false),
            (format!("{prefix}.fc3.w"), &mut self.w3, true),
            (format!("{prefix}.fc3.b"), &mut self.b3, false),
        ]);
    }

    fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundTrunk {
        let mut put = |t: &Array2<F>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BoundTrunk {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w3: put(&self.w3),
            b3: put(&self.b3),
        }
    }
}

pub struct BoundTrunk {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl BoundTrunk {
    fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

fn trunk_forward<F: Scalar>(tape: &mut Tape<F>, t: &BoundTrunk, x: Var) -> Var {
    let h1 = tape.linear(x, t.w1, Some(t.b1));
    let a1 = tape.gelu(h1);
    let h2 = tape.linear(a1, t.w2, Some(t.b2));
    let a2 = tape.gelu(h2);
    tape.linear(a2, t.w3, Some(t.b3))
}

// ── Decoder ──────────────────────────────────────────────────────────────

/// Pixel-recovery decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<F> {
    pub trunk: Trunk<F>,
    pub recover_w: Array2<F>,
    pub recover_b: Array2<F>,
    pub patch_size: usize,
}

impl<F: Scalar> DecoderParams<F> {
    pub fn init(d: usize, hidden: usize, bottleneck: usize, patch_size: usize, rng: &mut impl RngCore) -> Self {
        DecoderParams {
            trunk: Trunk::init(d, hidden, bottleneck, rng),
            recover_w: trunc_normal((bottleneck, patch_size * patch_size), 0.02, rng),
            recover_b: Array2::zeros((1, patch_size * patch_size)),
            patch_size,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = Vec::new();
        self.trunk.named(prefix, &mut out);
        out.push((format!("{prefix}.recover.w"), &self.recover_w, true));
        out.push((format!("{prefix}.recover.b"), &self.recover_b, false));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>, bool)> {
        let mut out = Vec::new();
        self.trunk.named_mut(prefix, &mut out);
        out.push((format!("{prefix}.recover.w"), &mut self.recover_w, true));
        out.push((format!("{prefix}.recover.b"), &mut self.recover_b, false));
        out
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundDecoder {
        let trunk = self.trunk.bind(tape, trainable);
        let mut put = |t: &Array2<F>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BoundDecoder {
            trunk,
            recover_w: put(&self.recover_w),
            recover_b: put(&self.recover_b),
            patch_size: self.patch_size,
        }
    }
}

pub struct BoundDecoder {
    pub trunk: BoundTrunk,
    pub recover_w: Var,
    pub recover_b: Var,
    pub patch_size: usize,
}

impl BoundDecoder {
    /// Tape handles in [`DecoderParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.trunk.vars();
        out.push(self.recover_w);
        out.push(self.recover_b);
        out
    }
}

/// Map token embeddings `(rows, d)` to flattened pixel patches `(rows, p²)`.
pub fn decode_patches<F: Scalar>(tape: &mut Tape<F>, dec: &BoundDecoder, tokens: Var) -> Var {
    let bottleneck = trunk_forward(tape, &dec.trunk, tokens);
    tape.linear(bottleneck, dec.recover_w, Some(dec.recover_b))
}

/// Decode selected token rows and place the recovered patches at their
/// grid positions on zero canvases: `places[r] = (image, patch_index)` for
/// row `r` of `token_rows`. Output is `(images, H·W)`.
pub fn reconstruct_at<F: Scalar>(
    tape: &mut Tape<F>,
    dec: &BoundDecoder,
    token_rows: Var,
    places: Vec<(usize, usize)>,
    images: usize,
    grid: (usize, usize),
) -> Var {
    let patches = decode_patches(tape, dec, token_rows);
    tape.assemble_patches(patches, places, images, grid.0, grid.1, dec.patch_size)
}

/// Full-image reconstruction from an encoded sequence `(images·(n+1), d)`:
/// the class token is dropped, every data token is decoded, and the patch
/// grid is reassembled into `(images, H·W)`.
pub fn reconstruct<F: Scalar>(
    tape: &mut Tape<F>,
    dec: &BoundDecoder,
    encoded: Var,
    images: usize,
    grid: (usize, usize),
) -> Result<Var> {
    let n = grid.0 * grid.1;
    let seq = n + 1;
    if tape.value(encoded).nrows() != images * seq {
        return Err(Error::Data(format!(
            "encoded sequence has {} rows, expected {} images x {} tokens",
            tape.value(encoded).nrows(),
            images,
            seq
        )));
    }
    let mut rows = Vec::with_capacity(images * n);
    let mut places = Vec::with_capacity(images * n);
    for i in 0..images {
        for t in 0..n {
            rows.push(i * seq + 1 + t);
            places.push((i, t));
        }
    }
    let data_tokens = tape.select_rows(encoded, rows);
    Ok(reconstruct_at(tape, dec, data_tokens, places, images, grid))
}

// ── Projection head ──────────────────────────────────────────────────────

/// Projection head parameters: trunk plus a prototype matrix
/// `(bottleneck, K)` whose columns are kept at unit ℓ2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<F> {
    pub trunk: Trunk<F>,
    pub proto: Array2<F>,
}

impl<F: Scalar> ProjectionParams<F> {
    pub fn init(d: usize, hidden: usize, bottleneck: usize, k: usize, rng: &mut impl RngCore) -> Self {
        let mut head = ProjectionParams {
            trunk: Trunk::init(d, hidden, bottleneck, rng),
            proto: trunc_normal((bottleneck, k), 0.02, rng),
        };
        head.renorm_prototypes();
        head
    }

    pub fn k(&self) -> usize {
        self.proto.ncols()
    }

    /// Restore every prototype column to unit ℓ2 norm. Called after every
    /// parameter update (optimizer step or EMA blend); zero columns are left
    /// untouched.
    pub fn renorm_prototypes(&mut self) {
        for mut col in self.proto.columns_mut() {
            let mut sq = F::zero();
            for &v in col.iter() {
                sq = sq + v * v;
            }
            let n = sq.sqrt();
            if n > F::zero() {
                for v in col.iter_mut() {
                    *v = *v / n;
                }
            }
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = Vec::new();
        self.trunk.named(prefix, &mut out);
        // The prototype matrix is renormalized after every update, which
        // cancels any uniform shrink — decay would be a no-op, so none.
        out.push((format!("{prefix}.proto"), &self.proto, false));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>, bool)> {
        let mut out = Vec::new();
        self.trunk.named_mut(prefix, &mut out);
        out.push((format!("{prefix}.proto"), &mut self.proto, false));
        out
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundProjection {
        let trunk = self.trunk.bind(tape, trainable);
        let proto = if trainable { tape.leaf(self.proto.clone()) } else { tape.constant(self.proto.clone()) };
        BoundProjection { trunk, proto }
    }
}

pub struct BoundProjection {
    pub trunk: BoundTrunk,
    pub proto: Var,
}

impl BoundProjection {
    /// Tape handles in [`ProjectionParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.trunk.vars();
        out.push(self.proto);
        out
    }
}

/// Map token embeddings `(rows, d)` to prototype logits `(rows, K)`: trunk,
/// ℓ2 row normalization, then the unit-column prototype matrix. Every row —
/// class token or data token — passes through the same parameters, and
/// |logit| ≤ 1 by Cauchy–Schwarz.
pub fn project<F: Scalar>(tape: &mut Tape<F>, head: &BoundProjection, tokens: Var) -> Var {
    let bottleneck = trunk_forward(tape, &head.trunk, tokens);
    let unit = tape.l2_norm_rows(bottleneck, F::from_f64(NORM_EPS));
    tape.matmul(unit, head.proto)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn toy_decoder(seed: u64) -> DecoderParams<f64> {
        let mut rng = stream(seed, "heads-test", &[0]);
        DecoderParams::init(16, 24, 12, 4, &mut rng)
    }

    fn toy_projection(seed: u64) -> ProjectionParams<f64> {
        let mut rng = stream(seed, "heads-test", &[1]);
        ProjectionParams::init(16, 24, 12, 32, &mut rng)
    }

    fn random_tokens(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, "heads-test-tokens", &[rows as u64]);
        Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zeroed_recovery_layer_reconstructs_a_zero_image() {
        let mut dec = toy_decoder(1);
        dec.recover_w.fill(0.0);
        dec.recover_b.fill(0.0);
        let tokens = random_tokens(2 * 5, 16, 1); // 2 images, 2×2 grid + cls
        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let img = reconstruct(&mut tape, &bound, t, 2, (2, 2)).unwrap();
        assert_eq!(tape.value(img).dim(), (2, 64));
        assert!(tape.value(img).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_token_rows_decode_identically() {
        let dec = toy_decoder(2);
        let mut tokens = random_tokens(4, 16, 2);
        let first = tokens.row(0).to_owned();
        tokens.row_mut(3).assign(&first);
        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let patches = decode_patches(&mut tape, &bound, t);
        assert_eq!(tape.value(patches).row(0), tape.value(patches).row(3));
        assert!(tape.value(patches).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reconstruction_keeps_the_input_image_shape() {
        let dec = toy_decoder(3);
        let tokens = random_tokens(3 * 5, 16, 3);
        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let img = reconstruct(&mut tape, &bound, t, 3, (2, 2)).unwrap();
        // 2×2 grid of 4×4 patches → 8×8 images.
        assert_eq!(tape.value(img).dim(), (3, 64));
        assert!(reconstruct(&mut tape, &bound, t, 2, (2, 2)).is_err());
    }

    #[test]
    fn masked_only_reconstruction_matches_the_full_one_on_masked_patches() {
        let dec = toy_decoder(4);
        let tokens = random_tokens(5, 16, 4); // 1 image, 2×2 grid + cls
        let mut tape = Tape::new();
        let bound = dec.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let full = reconstruct(&mut tape, &bound, t, 1, (2, 2)).unwrap();

        // Decode only tokens 1 and 2 (grid cells 1 and 2).
        let picked = tape.select_rows(t, vec![2, 3]);
        let partial = reconstruct_at(&mut tape, &bound, picked, vec![(0, 1), (0, 2)], 1, (2, 2));
        let fv = tape.value(full).clone();
        let pv = tape.value(partial).clone();
        // Patch 1 occupies rows 0..4, cols 4..8 of the 8×8 image.
        for a in 0..4 {
            for b in 0..4 {
                let idx = a * 8 + 4 + b;
                assert!((fv[(0, idx)] - pv[(0, idx)]).abs() < 1e-15);
                // Patch 0 region is zero in the partial image.
                let idx0 = a * 8 + b;
                assert_eq!(pv[(0, idx0)], 0.0);
            }
        }
    }

    #[test]
    fn projection_rows_are_bounded_by_one() {
        let head = toy_projection(5);
        let tokens = random_tokens(40, 16, 5).mapv(|v| v * 7.0);
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let logits = project(&mut tape, &bound, t);
        assert_eq!(tape.value(logits).dim(), (40, 32));
        for &v in tape.value(logits).iter() {
            assert!(v.abs() <= 1.0 + 1e-12, "logit {v} exceeds the cosine bound");
        }
    }

    #[test]
    fn prototype_columns_are_unit_after_renorm() {
        let mut head = toy_projection(6);
        // Knock the columns off unit norm, then restore.
        head.proto.mapv_inplace(|v| v * 3.7);
        head.renorm_prototypes();
        for col in head.proto.columns() {
            let n: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_the_bottleneck_does_not_move_the_logits() {
        // The ℓ2 normalization erases positive scale before the prototypes.
        let head = toy_projection(7);
        let mut tape = Tape::<f64>::new();
        let bottleneck = random_tokens(3, 12, 7);
        let scaled = bottleneck.mapv(|v| v * 3.0);
        let a = tape.constant(bottleneck);
        let b = tape.constant(scaled);
        let proto = tape.constant(head.proto.clone());
        let na = tape.l2_norm_rows(a, NORM_EPS);
        let nb = tape.l2_norm_rows(b, NORM_EPS);
        let la = tape.matmul(na, proto);
        let lb = tape.matmul(nb, proto);
        let diff = tape.value(la) - tape.value(lb);
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shared_head_swaps_rows_with_the_inputs() {
        let head = toy_projection(8);
        let tokens = random_tokens(5, 16, 8);
        let mut swapped = tokens.clone();
        let r0 = tokens.row(0).to_owned();
        let r3 = tokens.row(3).to_owned();
        swapped.row_mut(0).assign(&r3);
        swapped.row_mut(3).assign(&r0);

        let run = |input: Array2<f64>| {
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape, false);
            let t = tape.constant(input);
            let l = project(&mut tape, &bound, t);
            tape.value(l).clone()
        };
        let a = run(tokens);
        let b = run(swapped);
        assert_eq!(a.row(0), b.row(3));
        assert_eq!(a.row(3), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn registries_cover_every_tensor_once() {
        let dec = toy_decoder(9);
        let names: Vec<String> = dec.named("dec").iter().map(|(n, _, _)| n.clone()).collect();
        assert_eq!(names.len(), 8);
        let head = toy_projection(9);
        let pnames: Vec<String> = head.named("proj").iter().map(|(n, _, _)| n.clone()).collect();
        assert_eq!(pnames.len(), 7);
        assert!(pnames.contains(&"proj.proto".to_string()));
        let unique: std::collections::BTreeSet<_> = pnames.iter().collect();
        assert_eq!(unique.len(), pnames.len());
    }
}
