//! The recording tape: eager forward ops plus reverse-mode backward.
//!
//! Shape conventions used throughout:
//! * token sequences: `(images * seq, d)`, image-major rows;
//! * feature maps: `(images, channels * height * width)`, channel-major rows;
//! * row vectors (biases, single tokens): `(1, d)`;
//! * scalars (losses): `(1, 1)`.
//!
//! Ops that need geometry beyond the 2-D shape (attention, convolutions,
//! patch assembly) take it as explicit arguments and validate it eagerly.
//! Shape mismatches are programmer errors and panic with a description.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis};

use crate::blas::ensure_blas_kernel;
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Matrix product into a fresh array.
fn mm<F: Scalar>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    ensure_blas_kernel();
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), a, b, F::zero(), &mut c);
    c
}

/// `c += a · b`.
fn mm_acc<F: Scalar>(c: &mut Array2<F>, a: &ArrayView2<F>, b: &ArrayView2<F>) {
    ensure_blas_kernel();
    general_mat_mul(F::one(), a, b, F::one(), c);
}

/// Column sums as a `(1, cols)` row.
fn col_sum<F: Scalar>(x: &ArrayView2<F>) -> Array2<F> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Numerically stable softmax over each row, in place.
fn softmax_rows_inplace<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let mut max = row[0];
        for &v in row.iter() {
            max = max.maximum(v);
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Geometry of a batch of feature maps stored as `(images, c*h*w)` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeom {
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapGeom {
    pub fn new(images: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { images, channels, height, width }
    }
    fn pixels(&self) -> usize {
        self.height * self.width
    }
    fn row_len(&self) -> usize {
        self.channels * self.pixels()
    }
}

enum Op<F: Scalar> {
    Input,
    Matmul {
        a: Var,
        b: Var,
    },
    AddBiasRow {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    AddConst {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Array1<F>,
    },
    L2NormRows {
        x: Var,
        eps: F,
        norms: Array1<F>,
    },
    SoftmaxRows {
        x: Var,
    },
    Mha {
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bq: Var,
        bk: Var,
        bv: Var,
        bo: Var,
        images: usize,
        seq: usize,
        heads: usize,
        q: Array2<F>,
        k: Array2<F>,
        v: Array2<F>,
        concat: Array2<F>,
        probs: Vec<Array2<F>>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectCol {
        x: Var,
        col: usize,
    },
    BroadcastRow {
        x: Var,
    },
    AssembleTokens {
        cls: Var,
        patches: Var,
        tokens: usize,
    },
    AddPos {
        x: Var,
        pos: Var,
        images: usize,
    },
    TokensToGrid {
        x: Var,
        images: usize,
        grid_h: usize,
        grid_w: usize,
    },
    GridToRows {
        x: Var,
        channels: usize,
    },
    AssemblePatches {
        x: Var,
        places: Vec<(usize, usize)>,
        grid_w: usize,
        patch: usize,
    },
    CeVsConstProbs {
        logits: Var,
        probs: Array2<F>,
        row_weights: Array1<F>,
        inv_temp: F,
        eps: F,
        scale: F,
        q: Array2<F>,
    },
    MaskedL1 {
        pred: Var,
        target: Array2<F>,
        mask: Array2<F>,
        scale: F,
    },
    CeLabels {
        logits: Var,
        labels: Vec<usize>,
        scale: F,
        eps: F,
        probs: Array2<F>,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: MapGeom,
        cout: usize,
        ksize: usize,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Var,
        geom: MapGeom,
        cout: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: MapGeom,
        xhat: Array2<F>,
        inv_std: Array2<F>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
}

struct Slot<F: Scalar> {
    value: Array2<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<F: Scalar> {
    slots: Vec<Slot<F>>,
    grads: Vec<Option<Array2<F>>>,
    ran_backward: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, value: Array2<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.slots.push(Slot { value, requires_grad, op });
        self.grads.push(None);
        Var(self.slots.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    /// Register a tensor that does not need a gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, false, Op::Input)
    }

    /// Register a trainable tensor; its gradient is available after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, true, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.slots[v.0].value
    }

    /// Scalar value of a `(1,1)` tensor.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar tensor");
        val[(0, 0)]
    }

    /// Gradient accumulated for `v`, if any part of the loss depended on it.
    pub fn grad(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, an) = self.value(a).dim();
        let (bm, bn) = self.value(b).dim();
        assert_eq!(an, bm, "matmul {}x{} by {}x{}", am, an, bm, bn);
        let value = mm(&self.value(a).view(), &self.value(b).view());
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Matmul { a, b })
    }

    /// `x + b` where `b` is a `(1, d)` row broadcast over the rows of `x`.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let d = self.value(x).ncols();
        assert_eq!(self.value(b).dim(), (1, d), "bias row shape");
        let value = self.value(x) + &self.value(b).row(0);
        let rg = self.requires(x) || self.requires(b);
        self.push(value, rg, Op::AddBiasRow { x, b })
    }

    /// `x·w + b`; `b` optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias_row(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let value = self.value(a) + self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let value = self.value(a) - self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        let value = self.value(a) * self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Mul { a, b })
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div shapes");
        let value = self.value(a) / self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        let rg = self.requires(x);
        self.push(value, rg, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        let rg = self.requires(x);
        self.push(value, rg, Op::AddConst { x })
    }

    /// Exact GeLU: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = F::from_f64(0.5);
        let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value(x).mapv(|v| half * v * (F::one() + (v * inv_sqrt2).erf()));
        let rg = self.requires(x);
        self.push(value, rg, Op::Gelu { x })
    }

    /// Row-wise layer normalization with affine parameters.
    /// `gamma`, `beta` are `(1, d)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (rows, d) = self.value(x).dim();
        assert_eq!(self.value(gamma).dim(), (1, d), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, d), "layer_norm beta shape");
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut xhat = self.value(x).clone();
        let mut inv_std = Array1::zeros(rows);
        for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mut mean = F::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for v in row.iter_mut() {
                *v = *v - mean;
                var = var + *v * *v;
            }
            var = var * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = xhat.clone();
        for mut row in value.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(value, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Normalize each row to unit Euclidean norm: `x / max(‖x‖₂, eps)`.
    pub fn l2_norm_rows(&mut self, x: Var, eps: F) -> Var {
        let rows = self.value(x).nrows();
        let mut norms = Array1::zeros(rows);
        let mut value = self.value(x).clone();
        for (r, mut row) in value.rows_mut().into_iter().enumerate() {
            let mut sq = F::zero();
            for &v in row.iter() {
                sq = sq + v * v;
            }
            let n = sq.sqrt();
            norms[r] = n;
            let inv = F::one() / n.maximum(eps);
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::L2NormRows { x, eps, norms })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        softmax_rows_inplace(&mut value);
        let rg = self.requires(x);
        self.push(value, rg, Op::SoftmaxRows { x })
    }

    /// Multi-head self-attention over `images` sequences of length `seq`.
    /// `x` is `(images*seq, d)`; the four projections are `(d, d)` with
    /// `(1, d)` biases. Rows of the output align with rows of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn mha(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bq: Var,
        bk: Var,
        bv: Var,
        bo: Var,
        images: usize,
        seq: usize,
        heads: usize,
    ) -> Var {
        let (rows, d) = self.value(x).dim();
        assert_eq!(rows, images * seq, "mha rows vs geometry");
        assert_eq!(d % heads, 0, "mha embed dim {} not divisible by heads {}", d, heads);
        for w in [wq, wk, wv, wo] {
            assert_eq!(self.value(w).dim(), (d, d), "mha weight shape");
        }
        for b in [bq, bk, bv, bo] {
            assert_eq!(self.value(b).dim(), (1, d), "mha bias shape");
        }
        let dh = d / heads;
        let att_scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let xv = self.value(x).view();
        let mut q = mm(&xv, &self.value(wq).view());
        q += &self.value(bq).row(0);
        let mut k = mm(&xv, &self.value(wk).view());
        k += &self.value(bk).row(0);
        let mut v = mm(&xv, &self.value(wv).view());
        v += &self.value(bv).row(0);

        let mut concat: Array2<F> = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(images * heads);
        for i in 0..images {
            let rr = i * seq..(i + 1) * seq;
            for h in 0..heads {
                let cc = h * dh..(h + 1) * dh;
                let qh = q.slice(ndarray::s![rr.clone(), cc.clone()]);
                let kh = k.slice(ndarray::s![rr.clone(), cc.clone()]);
                let vh = v.slice(ndarray::s![rr.clone(), cc.clone()]);
                let mut scores = mm(&qh, &kh.t());
                scores.mapv_inplace(|s| s * att_scale);
                softmax_rows_inplace(&mut scores);
                let oh = mm(&scores.view(), &vh);
                concat.slice_mut(ndarray::s![rr.clone(), cc]).assign(&oh);
                probs.push(scores);
            }
        }
        let mut value = mm(&concat.view(), &self.value(wo).view());
        value += &self.value(bo).row(0);

        let rg = [x, wq, wk, wv, wo, bq, bk, bv, bo].iter().any(|&p| self.requires(p));
        self.push(
            value,
            rg,
            Op::Mha { x, wq, wk, wv, wo, bq, bk, bv, bo, images, seq, heads, q, k, v, concat, probs },
        )
    }

    /// Gather rows by index (duplicates allowed). Gradient scatter-adds.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let (n, d) = self.value(x).dim();
        let mut value = Array2::zeros((rows.len(), d));
        for (out_r, &src) in rows.iter().enumerate() {
            assert!(src < n, "select_rows index {} out of {} rows", src, n);
            value.row_mut(out_r).assign(&self.value(x).row(src));
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::SelectRows { x, rows })
    }

    /// Extract one column as an `(rows, 1)` tensor.
    pub fn select_col(&mut self, x: Var, col: usize) -> Var {
        let (n, d) = self.value(x).dim();
        assert!(col < d, "select_col {} out of {} cols", col, d);
        let value = self
            .value(x)
            .column(col)
            .to_owned()
            .insert_axis(Axis(1));
        assert_eq!(value.dim(), (n, 1));
        let rg = self.requires(x);
        self.push(value, rg, Op::SelectCol { x, col })
    }

    /// Repeat a `(1, d)` row `n` times into an `(n, d)` tensor.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Var {
        let d = self.value(x).ncols();
        assert_eq!(self.value(x).nrows(), 1, "broadcast_row expects a (1,d) input");
        let mut value = Array2::zeros((n, d));
        for mut row in value.rows_mut() {
            row.assign(&self.value(x).row(0));
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::BroadcastRow { x })
    }

    /// Interleave per-image class tokens with per-image patch tokens:
    /// `cls` is `(images, d)`, `patches` is `(images*tokens, d)`; the result
    /// is `(images*(tokens+1), d)` with each image's class token first.
    pub fn assemble_tokens(&mut self, cls: Var, patches: Var, tokens: usize) -> Var {
        let (images, d) = self.value(cls).dim();
        assert_eq!(self.value(patches).dim(), (images * tokens, d), "assemble_tokens shapes");
        let seq = tokens + 1;
        let mut value = Array2::zeros((images * seq, d));
        for i in 0..images {
            value.row_mut(i * seq).assign(&self.value(cls).row(i));
            for t in 0..tokens {
                value.row_mut(i * seq + 1 + t).assign(&self.value(patches).row(i * tokens + t));
            }
        }
        let rg = self.requires(cls) || self.requires(patches);
        self.push(value, rg, Op::AssembleTokens { cls, patches, tokens })
    }

    /// Add a `(seq, d)` positional table to every image's block of rows.
    pub fn add_pos(&mut self, x: Var, pos: Var, images: usize) -> Var {
        let (rows, d) = self.value(x).dim();
        let (seq, pd) = self.value(pos).dim();
        assert_eq!(rows, images * seq, "add_pos rows vs geometry");
        assert_eq!(pd, d, "add_pos embed dim");
        let mut value = self.value(x).clone();
        for i in 0..images {
            let mut block = value.slice_mut(ndarray::s![i * seq..(i + 1) * seq, ..]);
            block += &self.value(pos).view();
        }
        let rg = self.requires(x) || self.requires(pos);
        self.push(value, rg, Op::AddPos { x, pos, images })
    }

    /// Reshape data tokens (class token dropped) into channel-major feature
    /// maps: `(images*(grid_h*grid_w+1), d)` → `(images, d*grid_h*grid_w)`.
    /// Token `t` sits at grid position `(t / grid_w, t % grid_w)`.
    pub fn tokens_to_grid(&mut self, x: Var, images: usize, grid_h: usize, grid_w: usize) -> Var {
        let (rows, d) = self.value(x).dim();
        let n = grid_h * grid_w;
        let seq = n + 1;
        assert_eq!(rows, images * seq, "tokens_to_grid rows vs geometry");
        let mut value = Array2::zeros((images, d * n));
        for i in 0..images {
            for t in 0..n {
                let src = self.value(x).row(i * seq + 1 + t);
                for j in 0..d {
                    value[(i, j * n + t)] = src[j];
                }
            }
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::TokensToGrid { x, images, grid_h, grid_w })
    }

    /// Permute channel-major feature maps into pixel-major rows:
    /// `(images, channels*px)` → `(images*px, channels)`, so row `i*px + t`
    /// holds pixel `t` of image `i` across channels. Pairs with per-row
    /// losses (cross-entropy, soft overlap scores) over dense predictions.
    pub fn grid_to_rows(&mut self, x: Var, channels: usize) -> Var {
        let (images, cols) = self.value(x).dim();
        assert_eq!(cols % channels, 0, "grid_to_rows columns vs channels");
        let px = cols / channels;
        let mut value = Array2::zeros((images * px, channels));
        for i in 0..images {
            let src = self.value(x).row(i);
            for t in 0..px {
                for j in 0..channels {
                    value[(i * px + t, j)] = src[j * px + t];
                }
            }
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::GridToRows { x, channels })
    }

    /// Place per-token pixel blocks onto zero canvases. `x` is
    /// `(len(places), patch²)`; `places[r] = (image, patch_index)` says where
    /// row `r` lands (row-major patch order). Each destination may appear at
    /// most once; untouched patches stay zero. Output is `(images, H*W)` with
    /// `H = grid_h*patch`, `W = grid_w*patch`.
    pub fn assemble_patches(
        &mut self,
        x: Var,
        places: Vec<(usize, usize)>,
        images: usize,
        grid_h: usize,
        grid_w: usize,
        patch: usize,
    ) -> Var {
        let (rows, pp) = self.value(x).dim();
        assert_eq!(rows, places.len(), "assemble_patches rows vs places");
        assert_eq!(pp, patch * patch, "assemble_patches patch area");
        let n = grid_h * grid_w;
        let w_img = grid_w * patch;
        let mut seen = vec![false; images * n];
        let mut value = Array2::zeros((images, grid_h * patch * w_img));
        for (r, &(img, pidx)) in places.iter().enumerate() {
            assert!(img < images && pidx < n, "assemble_patches place out of range");
            assert!(!seen[img * n + pidx], "assemble_patches duplicate destination");
            seen[img * n + pidx] = true;
            let (pr, pc) = (pidx / grid_w, pidx % grid_w);
            let src = self.value(x).row(r);
            for a in 0..patch {
                for b in 0..patch {
                    value[(img, (pr * patch + a) * w_img + pc * patch + b)] = src[a * patch + b];
                }
            }
        }
        let rg = self.requires(x);
        self.push(value, rg, Op::AssemblePatches { x, places, grid_w, patch })
    }

    /// Cross-entropy of temperature-sharpened student rows against constant
    /// target distributions:
    /// `scale · Σ_r w_r · Σ_j −p[r,j] · ln(max(softmax(logits[r]·inv_temp)[j], eps))`.
    pub fn ce_vs_const_probs(
        &mut self,
        logits: Var,
        probs: Array2<F>,
        row_weights: Array1<F>,
        inv_temp: F,
        eps: F,
        scale: F,
    ) -> Var {
        let (rows, k) = self.value(logits).dim();
        assert_eq!(probs.dim(), (rows, k), "ce_vs_const_probs target shape");
        assert_eq!(row_weights.len(), rows, "ce_vs_const_probs weights length");
        let mut q = self.value(logits).mapv(|z| z * inv_temp);
        softmax_rows_inplace(&mut q);
        let mut loss = F::zero();
        for r in 0..rows {
            if row_weights[r] == F::zero() {
                continue;
            }
            let mut acc = F::zero();
            for j in 0..k {
                acc = acc - probs[(r, j)] * q[(r, j)].maximum(eps).ln();
            }
            loss = loss + row_weights[r] * acc;
        }
        loss = loss * scale;
        let value = Array2::from_elem((1, 1), loss);
        let rg = self.requires(logits);
        self.push(value, rg, Op::CeVsConstProbs { logits, probs, row_weights, inv_temp, eps, scale, q })
    }

    /// Weighted L1 against a constant target:
    /// `scale · Σ mask∘|pred − target|`.
    pub fn masked_l1(&mut self, pred: Var, target: Array2<F>, mask: Array2<F>, scale: F) -> Var {
        assert_eq!(self.value(pred).dim(), target.dim(), "masked_l1 target shape");
        assert_eq!(target.dim(), mask.dim(), "masked_l1 mask shape");
        let mut loss = F::zero();
        for ((p, t), m) in self.value(pred).iter().zip(target.iter()).zip(mask.iter()) {
            loss = loss + *m * (*p - *t).abs();
        }
        loss = loss * scale;
        let value = Array2::from_elem((1, 1), loss);
        let rg = self.requires(pred);
        self.push(value, rg, Op::MaskedL1 { pred, target, mask, scale })
    }

    /// Cross-entropy of row softmax against integer labels, with the log
    /// floored at `eps`: `scale · Σ_r −ln(max(softmax(logits[r])[labels[r]], eps))`.
    pub fn ce_labels(&mut self, logits: Var, labels: Vec<usize>, scale: F, eps: F) -> Var {
        let (rows, k) = self.value(logits).dim();
        assert_eq!(labels.len(), rows, "ce_labels labels length");
        let mut probs = self.value(logits).clone();
        softmax_rows_inplace(&mut probs);
        let mut loss = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < k, "ce_labels label {} out of {} classes", y, k);
            loss = loss - probs[(r, y)].maximum(eps).ln();
        }
        loss = loss * scale;
        let value = Array2::from_elem((1, 1), loss);
        let rg = self.requires(logits);
        self.push(value, rg, Op::CeLabels { logits, labels, scale, eps, probs })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = F::zero();
        for &v in self.value(x).iter() {
            s = s + v;
        }
        let rg = self.requires(x);
        self.push(Array2::from_elem((1, 1), s), rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let mut s = F::zero();
        for &v in self.value(x).iter() {
            s = s + v;
        }
        s = s / F::from_f64(len as f64);
        let rg = self.requires(x);
        self.push(Array2::from_elem((1, 1), s), rg, Op::MeanAll { x })
    }

    /// Same-size 2-D convolution (kernel 1 or 3, stride 1, zero padding
    /// `ksize/2`). `x` is a channel-major feature map batch, `w` is
    /// `(ksize²·c_in, c_out)` with kernel-major rows, `b` is `(1, c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: MapGeom, cout: usize, ksize: usize) -> Var {
        assert!(ksize == 1 || ksize == 3, "conv2d supports kernel 1 or 3");
        assert_eq!(self.value(x).dim(), (geom.images, geom.row_len()), "conv2d input vs geometry");
        assert_eq!(self.value(w).dim(), (ksize * ksize * geom.channels, cout), "conv2d weight shape");
        assert_eq!(self.value(b).dim(), (1, cout), "conv2d bias shape");
        let cols = im2col(self.value(x), geom, ksize);
        let mut y = mm(&cols.view(), &self.value(w).view());
        y += &self.value(b).row(0);
        // (images*pixels, cout) → channel-major rows.
        let px = geom.pixels();
        let mut value = Array2::zeros((geom.images, cout * px));
        for i in 0..geom.images {
            for p in 0..px {
                let src = y.row(i * px + p);
                for co in 0..cout {
                    value[(i, co * px + p)] = src[co];
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, rg, Op::Conv2d { x, w, b, geom, cout, ksize })
    }

    /// 2× upsampling transposed convolution, kernel 2, stride 2. `w` is
    /// `(c_in, c_out·4)` where the last axis is `(c_out, ky, kx)`-major;
    /// `b` is `(1, c_out)`. Output geometry doubles height and width.
    pub fn conv_t2x2(&mut self, x: Var, w: Var, b: Var, geom: MapGeom, cout: usize) -> Var {
        assert_eq!(self.value(x).dim(), (geom.images, geom.row_len()), "conv_t2x2 input vs geometry");
        assert_eq!(self.value(w).dim(), (geom.channels, cout * 4), "conv_t2x2 weight shape");
        assert_eq!(self.value(b).dim(), (1, cout), "conv_t2x2 bias shape");
        let px = geom.pixels();
        // Pixel-major gather of the input.
        let mut xp = Array2::zeros((geom.images * px, geom.channels));
        for i in 0..geom.images {
            for p in 0..px {
                for c in 0..geom.channels {
                    xp[(i * px + p, c)] = self.value(x)[(i, c * px + p)];
                }
            }
        }
        let y = mm(&xp.view(), &self.value(w).view());
        let (oh, ow) = (geom.height * 2, geom.width * 2);
        let mut value = Array2::zeros((geom.images, cout * oh * ow));
        let bias = self.value(b).row(0).to_owned();
        for i in 0..geom.images {
            for co in 0..cout {
                let base = co * oh * ow;
                for p in 0..oh * ow {
                    value[(i, base + p)] = bias[co];
                }
            }
            for r in 0..geom.height {
                for c in 0..geom.width {
                    let src = y.row(i * px + r * geom.width + c);
                    for co in 0..cout {
                        for a in 0..2 {
                            for bb in 0..2 {
                                let dst = co * oh * ow + (2 * r + a) * ow + 2 * c + bb;
                                value[(i, dst)] = value[(i, dst)] + src[co * 4 + a * 2 + bb];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, rg, Op::ConvT2x2 { x, w, b, geom, cout })
    }

    /// Instance normalization: each (image, channel) plane is normalized over
    /// its pixels, then scaled/shifted by per-channel `gamma`/`beta` `(1, c)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, geom: MapGeom, eps: F) -> Var {
        assert_eq!(self.value(x).dim(), (geom.images, geom.row_len()), "instance_norm input vs geometry");
        assert_eq!(self.value(gamma).dim(), (1, geom.channels), "instance_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, geom.channels), "instance_norm beta shape");
        let px = geom.pixels();
        let inv_px = F::one() / F::from_f64(px as f64);
        let mut xhat = self.value(x).clone();
        let mut inv_std = Array2::zeros((geom.images, geom.channels));
        for i in 0..geom.images {
            for c in 0..geom.channels {
                let mut mean = F::zero();
                for p in 0..px {
                    mean = mean + xhat[(i, c * px + p)];
                }
                mean = mean * inv_px;
                let mut var = F::zero();
                for p in 0..px {
                    let v = xhat[(i, c * px + p)] - mean;
                    xhat[(i, c * px + p)] = v;
                    var = var + v * v;
                }
                var = var * inv_px;
                let inv = F::one() / (var + eps).sqrt();
                inv_std[(i, c)] = inv;
                for p in 0..px {
                    xhat[(i, c * px + p)] = xhat[(i, c * px + p)] * inv;
                }
            }
        }
        let g = self.value(gamma).row(0).to_owned();
        let bta = self.value(beta).row(0).to_owned();
        let mut value = xhat.clone();
        for i in 0..geom.images {
            for c in 0..geom.channels {
                for p in 0..px {
                    value[(i, c * px + p)] = value[(i, c * px + p)] * g[c] + bta[c];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(value, rg, Op::InstanceNorm { x, gamma, beta, geom, xhat, inv_std })
    }

    /// Concatenate along columns; for channel-major feature maps of equal
    /// geometry this is channel concatenation.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!(ra, rb, "concat_cols row counts");
        let mut value = Array2::zeros((ra, ca + cb));
        value.slice_mut(ndarray::s![.., ..ca]).assign(self.value(a));
        value.slice_mut(ndarray::s![.., ca..]).assign(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::ConcatCols { a, b })
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulate gradients of a `(1,1)` loss into every contributing leaf.
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.ran_backward, "backward() already ran on this tape");
        self.ran_backward = true;
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar loss");
        if !self.requires(loss) {
            return;
        }
        let mut grads = std::mem::take(&mut self.grads);
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash leaf gradients so callers can read them.
            if matches!(self.slots[id].op, Op::Input) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        self.grads = grads;
    }

    fn acc_grad(&self, grads: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        match &self.slots[id].op {
            Op::Input => unreachable!("handled in backward()"),
            Op::Matmul { a, b } => {
                if self.requires(*a) {
                    let da = mm(&g.view(), &self.value(*b).t());
                    self.acc_grad(grads, *a, da);
                }
                if self.requires(*b) {
                    let db = mm(&self.value(*a).t(), &g.view());
                    self.acc_grad(grads, *b, db);
                }
            }
            Op::AddBiasRow { x, b } => {
                if self.requires(*x) {
                    self.acc_grad(grads, *x, g.clone());
                }
                if self.requires(*b) {
                    self.acc_grad(grads, *b, col_sum(&g.view()));
                }
            }
            Op::Add { a, b } => {
                self.acc_grad(grads, *a, g.clone());
                self.acc_grad(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc_grad(grads, *a, g.clone());
                self.acc_grad(grads, *b, g.mapv(|v| F::zero() - v));
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    self.acc_grad(grads, *a, g * self.value(*b));
                }
                if self.requires(*b) {
                    self.acc_grad(grads, *b, g * self.value(*a));
                }
            }
            Op::Div { a, b } => {
                if self.requires(*a) {
                    self.acc_grad(grads, *a, g / self.value(*b));
                }
                if self.requires(*b) {
                    let bv = self.value(*b);
                    let mut db = g * self.value(*a);
                    db.zip_mut_with(bv, |d, &bb| *d = F::zero() - *d / (bb * bb));
                    self.acc_grad(grads, *b, db);
                }
            }
            Op::Scale { x, c } => {
                self.acc_grad(grads, *x, g.mapv(|v| v * *c));
            }
            Op::AddConst { x } => {
                self.acc_grad(grads, *x, g.clone());
            }
            Op::Gelu { x } => {
                let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = F::from_f64(0.5);
                let mut dx = self.value(*x).clone();
                dx.mapv_inplace(|v| {
                    let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                    let pdf = (F::zero() - half * v * v).exp() * inv_sqrt2pi;
                    cdf + v * pdf
                });
                dx *= g;
                self.acc_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = xhat.ncols();
                let inv_d = F::one() / F::from_f64(d as f64);
                if self.requires(*gamma) {
                    self.acc_grad(grads, *gamma, col_sum(&(g * xhat).view()));
                }
                if self.requires(*beta) {
                    self.acc_grad(grads, *beta, col_sum(&g.view()));
                }
                if self.requires(*x) {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let mut dx = Array2::zeros(g.dim());
                    for (r, grow) in g.rows().into_iter().enumerate() {
                        let xh = xhat.row(r);
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        }
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        let inv = inv_std[r];
                        let mut drow = dx.row_mut(r);
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            drow[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.acc_grad(grads, *x, dx);
                }
            }
            Op::L2NormRows { x, eps, norms } => {
                if !self.requires(*x) {
                    return;
                }
                let y = &self.slots[id].value;
                let mut dx = Array2::zeros(g.dim());
                for (r, grow) in g.rows().into_iter().enumerate() {
                    let n = norms[r];
                    let mut drow = dx.row_mut(r);
                    if n > *eps {
                        let yr = y.row(r);
                        let mut dot = F::zero();
                        for j in 0..grow.len() {
                            dot = dot + grow[j] * yr[j];
                        }
                        let inv = F::one() / n;
                        for j in 0..grow.len() {
                            drow[j] = (grow[j] - yr[j] * dot) * inv;
                        }
                    } else {
                        let inv = F::one() / *eps;
                        for j in 0..grow.len() {
                            drow[j] = grow[j] * inv;
                        }
                    }
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::SoftmaxRows { x } => {
                if !self.requires(*x) {
                    return;
                }
                let p = &self.slots[id].value;
                let mut dx = Array2::zeros(g.dim());
                for (r, grow) in g.rows().into_iter().enumerate() {
                    let pr = p.row(r);
                    let mut dot = F::zero();
                    for j in 0..grow.len() {
                        dot = dot + grow[j] * pr[j];
                    }
                    let mut drow = dx.row_mut(r);
                    for j in 0..grow.len() {
                        drow[j] = pr[j] * (grow[j] - dot);
                    }
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::Mha {
                x,
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
                images,
                seq,
                heads,
                q,
                k,
                v,
                concat,
                probs,
            } => {
                let d = q.ncols();
                let dh = d / heads;
                let att_scale = F::from_f64(1.0 / (dh as f64).sqrt());

                if self.requires(*wo) {
                    self.acc_grad(grads, *wo, mm(&concat.t(), &g.view()));
                }
                if self.requires(*bo) {
                    self.acc_grad(grads, *bo, col_sum(&g.view()));
                }
                let dconcat = mm(&g.view(), &self.value(*wo).t());

                let mut dq: Array2<F> = Array2::zeros(q.dim());
                let mut dk: Array2<F> = Array2::zeros(k.dim());
                let mut dv: Array2<F> = Array2::zeros(v.dim());
                for i in 0..*images {
                    let rr = i * seq..(i + 1) * seq;
                    for h in 0..*heads {
                        let cc = h * dh..(h + 1) * dh;
                        let p = &probs[i * heads + h];
                        let doh = dconcat.slice(ndarray::s![rr.clone(), cc.clone()]);
                        let qh = q.slice(ndarray::s![rr.clone(), cc.clone()]);
                        let kh = k.slice(ndarray::s![rr.clone(), cc.clone()]);
                        let vh = v.slice(ndarray::s![rr.clone(), cc.clone()]);

                        let dp = mm(&doh, &vh.t());
                        let mut dvh = dv.slice_mut(ndarray::s![rr.clone(), cc.clone()]);
                        general_mat_mul(F::one(), &p.t(), &doh, F::one(), &mut dvh);

                        // Softmax backward on the scores.
                        let mut ds = Array2::zeros(dp.dim());
                        for r in 0..ds.nrows() {
                            let mut dot = F::zero();
                            for j in 0..ds.ncols() {
                                dot = dot + dp[(r, j)] * p[(r, j)];
                            }
                            for j in 0..ds.ncols() {
                                ds[(r, j)] = p[(r, j)] * (dp[(r, j)] - dot) * att_scale;
                            }
                        }
                        let mut dqh = dq.slice_mut(ndarray::s![rr.clone(), cc.clone()]);
                        general_mat_mul(F::one(), &ds.view(), &kh, F::one(), &mut dqh);
                        let mut dkh = dk.slice_mut(ndarray::s![rr.clone(), cc.clone()]);
                        general_mat_mul(F::one(), &ds.t(), &qh, F::one(), &mut dkh);
                    }
                }

                let xv = self.value(*x);
                if self.requires(*wq) {
                    self.acc_grad(grads, *wq, mm(&xv.t(), &dq.view()));
                }
                if self.requires(*wk) {
                    self.acc_grad(grads, *wk, mm(&xv.t(), &dk.view()));
                }
                if self.requires(*wv) {
                    self.acc_grad(grads, *wv, mm(&xv.t(), &dv.view()));
                }
                if self.requires(*bq) {
                    self.acc_grad(grads, *bq, col_sum(&dq.view()));
                }
                if self.requires(*bk) {
                    self.acc_grad(grads, *bk, col_sum(&dk.view()));
                }
                if self.requires(*bv) {
                    self.acc_grad(grads, *bv, col_sum(&dv.view()));
                }
                if self.requires(*x) {
                    let mut dx = mm(&dq.view(), &self.value(*wq).t());
                    mm_acc(&mut dx, &dk.view(), &self.value(*wk).t());
                    mm_acc(&mut dx, &dv.view(), &self.value(*wv).t());
                    self.acc_grad(grads, *x, dx);
                }
            }
            Op::SelectRows { x, rows } => {
                if !self.requires(*x) {
                    return;
                }
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (out_r, &src) in rows.iter().enumerate() {
                    let mut drow = dx.row_mut(src);
                    drow += &g.row(out_r);
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::SelectCol { x, col } => {
                if !self.requires(*x) {
                    return;
                }
                let mut dx = Array2::zeros(self.value(*x).dim());
                for r in 0..g.nrows() {
                    dx[(r, *col)] = g[(r, 0)];
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::BroadcastRow { x } => {
                self.acc_grad(grads, *x, col_sum(&g.view()));
            }
            Op::AssembleTokens { cls, patches, tokens } => {
                let seq = tokens + 1;
                let images = g.nrows() / seq;
                let d = g.ncols();
                if self.requires(*cls) {
                    let mut dcls = Array2::zeros((images, d));
                    for i in 0..images {
                        dcls.row_mut(i).assign(&g.row(i * seq));
                    }
                    self.acc_grad(grads, *cls, dcls);
                }
                if self.requires(*patches) {
                    let mut dp = Array2::zeros((images * tokens, d));
                    for i in 0..images {
                        for t in 0..*tokens {
                            dp.row_mut(i * tokens + t).assign(&g.row(i * seq + 1 + t));
                        }
                    }
                    self.acc_grad(grads, *patches, dp);
                }
            }
            Op::AddPos { x, pos, images } => {
                if self.requires(*x) {
                    self.acc_grad(grads, *x, g.clone());
                }
                if self.requires(*pos) {
                    let seq = self.value(*pos).nrows();
                    let d = self.value(*pos).ncols();
                    let mut dpos = Array2::zeros((seq, d));
                    for i in 0..*images {
                        dpos += &g.slice(ndarray::s![i * seq..(i + 1) * seq, ..]);
                    }
                    self.acc_grad(grads, *pos, dpos);
                }
            }
            Op::TokensToGrid { x, images, grid_h, grid_w } => {
                if !self.requires(*x) {
                    return;
                }
                let n = grid_h * grid_w;
                let seq = n + 1;
                let d = self.value(*x).ncols();
                let mut dx = Array2::zeros(self.value(*x).dim());
                for i in 0..*images {
                    for t in 0..n {
                        let mut drow = dx.row_mut(i * seq + 1 + t);
                        for j in 0..d {
                            drow[j] = g[(i, j * n + t)];
                        }
                    }
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::GridToRows { x, channels } => {
                if !self.requires(*x) {
                    return;
                }
                let (images, cols) = self.value(*x).dim();
                let px = cols / channels;
                let mut dx = Array2::zeros((images, cols));
                for i in 0..images {
                    for t in 0..px {
                        for j in 0..*channels {
                            dx[(i, j * px + t)] = g[(i * px + t, j)];
                        }
                    }
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::AssemblePatches { x, places, grid_w, patch, .. } => {
                if !self.requires(*x) {
                    return;
                }
                let p = *patch;
                let w_img = grid_w * p;
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (r, &(img, pidx)) in places.iter().enumerate() {
                    let (pr, pc) = (pidx / grid_w, pidx % grid_w);
                    let mut drow = dx.row_mut(r);
                    for a in 0..p {
                        for b in 0..p {
                            drow[a * p + b] = g[(img, (pr * p + a) * w_img + pc * p + b)];
                        }
                    }
                }
                self.acc_grad(grads, *x, dx);
            }
            Op::CeVsConstProbs { logits, probs, row_weights, inv_temp, eps, scale, q } => {
                if !self.requires(*logits) {
                    return;
                }
                let gs = g[(0, 0)] * *scale;
                let (rows, kdim) = q.dim();
                let mut dl = Array2::zeros((rows, kdim));
                for r in 0..rows {
                    let w = row_weights[r];
                    if w == F::zero() {
                        continue;
                    }
                    let mut psum = F::zero();
                    for j in 0..kdim {
                        if q[(r, j)] > *eps {
                            psum = psum + probs[(r, j)];
                        }
                    }
                    let c = gs * w * *inv_temp;
                    for j in 0..kdim {
                        let ind = if q[(r, j)] > *eps { F::one() } else { F::zero() };
                        dl[(r, j)] = c * (q[(r, j)] * psum - probs[(r, j)] * ind);
                    }
                }
                self.acc_grad(grads, *logits, dl);
            }
            Op::MaskedL1 { pred, target, mask, scale } => {
                if !self.requires(*pred) {
                    return;
                }
                let gs = g[(0, 0)] * *scale;
                let pv = self.value(*pred);
                let mut dp = Array2::zeros(pv.dim());
                ndarray::Zip::from(&mut dp).and(pv).and(target).and(mask).for_each(
                    |d, &p, &t, &m| {
                        *d = gs * m * (p - t).signum0();
                    },
                );
                self.acc_grad(grads, *pred, dp);
            }
            Op::CeLabels { logits, labels, scale, eps, probs } => {
                if !self.requires(*logits) {
                    return;
                }
                let gs = g[(0, 0)] * *scale;
                let mut dl = probs.mapv(|p| p * gs);
                for (r, &y) in labels.iter().enumerate() {
                    if probs[(r, y)] > *eps {
                        dl[(r, y)] = dl[(r, y)] - gs;
                    } else {
                        // The floored log is locally constant in this row.
                        for j in 0..dl.ncols() {
                            dl[(r, j)] = F::zero();
                        }
                    }
                }
                self.acc_grad(grads, *logits, dl);
            }
            Op::SumAll { x } => {
                let gv = g[(0, 0)];
                self.acc_grad(grads, *x, Array2::from_elem(self.value(*x).dim(), gv));
            }
            Op::MeanAll { x } => {
                let len = self.value(*x).len();
                let gv = g[(0, 0)] / F::from_f64(len as f64);
                self.acc_grad(grads, *x, Array2::from_elem(self.value(*x).dim(), gv));
            }
            Op::Conv2d { x, w, b, geom, cout, ksize } => {
                let px = geom.pixels();
                // Gather dY to (images*pixels, cout).
                let mut dy = Array2::zeros((geom.images * px, *cout));
                for i in 0..geom.images {
                    for p in 0..px {
                        for co in 0..*cout {
                            dy[(i * px + p, co)] = g[(i, co * px + p)];
                        }
                    }
                }
                if self.requires(*b) {
                    self.acc_grad(grads, *b, col_sum(&dy.view()));
                }
                if self.requires(*w) {
                    let cols = im2col(self.value(*x), *geom, *ksize);
                    self.acc_grad(grads, *w, mm(&cols.t(), &dy.view()));
                }
                if self.requires(*x) {
                    let dcols = mm(&dy.view(), &self.value(*w).t());
                    self.acc_grad(grads, *x, col2im(&dcols, *geom, *ksize));
                }
            }
            Op::ConvT2x2 { x, w, b, geom, cout } => {
                let px = geom.pixels();
                let (oh, ow) = (geom.height * 2, geom.width * 2);
                // Gather dY' (images*pixels, cout*4) from the output gradient.
                let mut dy = Array2::zeros((geom.images * px, cout * 4));
                let mut db = Array2::zeros((1, *cout));
                for i in 0..geom.images {
                    for co in 0..*cout {
                        let base = co * oh * ow;
                        for p in 0..oh * ow {
                            db[(0, co)] = db[(0, co)] + g[(i, base + p)];
                        }
                    }
                    for r in 0..geom.height {
                        for c in 0..geom.width {
                            let row = i * px + r * geom.width + c;
                            for co in 0..*cout {
                                for a in 0..2 {
                                    for bb in 0..2 {
                                        let srcpx = co * oh * ow + (2 * r + a) * ow + 2 * c + bb;
                                        dy[(row, co * 4 + a * 2 + bb)] = g[(i, srcpx)];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.requires(*b) {
                    self.acc_grad(grads, *b, db);
                }
                if self.requires(*w) || self.requires(*x) {
                    // Pixel-major input gather (same as forward).
                    let mut xp = Array2::zeros((geom.images * px, geom.channels));
                    for i in 0..geom.images {
                        for p in 0..px {
                            for c in 0..geom.channels {
                                xp[(i * px + p, c)] = self.value(*x)[(i, c * px + p)];
                            }
                        }
                    }
                    if self.requires(*w) {
                        self.acc_grad(grads, *w, mm(&xp.t(), &dy.view()));
                    }
                    if self.requires(*x) {
                        let dxp = mm(&dy.view(), &self.value(*w).t());
                        let mut dx = Array2::zeros(self.value(*x).dim());
                        for i in 0..geom.images {
                            for p in 0..px {
                                for c in 0..geom.channels {
                                    dx[(i, c * px + p)] = dxp[(i * px + p, c)];
                                }
                            }
                        }
                        self.acc_grad(grads, *x, dx);
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, geom, xhat, inv_std } => {
                let px = geom.pixels();
                let inv_px = F::one() / F::from_f64(px as f64);
                if self.requires(*gamma) || self.requires(*beta) {
                    let mut dg = Array2::zeros((1, geom.channels));
                    let mut db = Array2::zeros((1, geom.channels));
                    for i in 0..geom.images {
                        for c in 0..geom.channels {
                            for p in 0..px {
                                let gv = g[(i, c * px + p)];
                                dg[(0, c)] = dg[(0, c)] + gv * xhat[(i, c * px + p)];
                                db[(0, c)] = db[(0, c)] + gv;
                            }
                        }
                    }
                    if self.requires(*gamma) {
                        self.acc_grad(grads, *gamma, dg);
                    }
                    if self.requires(*beta) {
                        self.acc_grad(grads, *beta, db);
                    }
                }
                if self.requires(*x) {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let mut dx = Array2::zeros(g.dim());
                    for i in 0..geom.images {
                        for c in 0..geom.channels {
                            let mut mean_dxh = F::zero();
                            let mut mean_dxh_xh = F::zero();
                            for p in 0..px {
                                let dxh = g[(i, c * px + p)] * gam[c];
                                mean_dxh = mean_dxh + dxh;
                                mean_dxh_xh = mean_dxh_xh + dxh * xhat[(i, c * px + p)];
                            }
                            mean_dxh = mean_dxh * inv_px;
                            mean_dxh_xh = mean_dxh_xh * inv_px;
                            let inv = inv_std[(i, c)];
                            for p in 0..px {
                                let dxh = g[(i, c * px + p)] * gam[c];
                                dx[(i, c * px + p)] =
                                    inv * (dxh - mean_dxh - xhat[(i, c * px + p)] * mean_dxh_xh);
                            }
                        }
                    }
                    self.acc_grad(grads, *x, dx);
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).ncols();
                if self.requires(*a) {
                    self.acc_grad(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if self.requires(*b) {
                    self.acc_grad(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
            }
        }
    }
}

/// im2col for same-size convolution with zero padding `ksize/2`:
/// `(images, c*h*w)` → `(images*h*w, ksize²*c)`, kernel-major columns.
fn im2col<F: Scalar>(x: &Array2<F>, geom: MapGeom, ksize: usize) -> Array2<F> {
    let pad = ksize / 2;
    let px = geom.pixels();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let mut cols = Array2::zeros((geom.images * px, ksize * ksize * geom.channels));
    for i in 0..geom.images {
        for r in 0..geom.height {
            for c in 0..geom.width {
                let out_row = i * px + r * geom.width + c;
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        let sr = r as isize + ky as isize - pad as isize;
                        let sc = c as isize + kx as isize - pad as isize;
                        if sr < 0 || sr >= h || sc < 0 || sc >= w {
                            continue;
                        }
                        let src_px = (sr * w + sc) as usize;
                        let kbase = (ky * ksize + kx) * geom.channels;
                        for ci in 0..geom.channels {
                            cols[(out_row, kbase + ci)] = x[(i, ci * px + src_px)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the image.
fn col2im<F: Scalar>(dcols: &Array2<F>, geom: MapGeom, ksize: usize) -> Array2<F> {
    let pad = ksize / 2;
    let px = geom.pixels();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let mut dx = Array2::zeros((geom.images, geom.row_len()));
    for i in 0..geom.images {
        for r in 0..geom.height {
            for c in 0..geom.width {
                let in_row = i * px + r * geom.width + c;
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        let sr = r as isize + ky as isize - pad as isize;
                        let sc = c as isize + kx as isize - pad as isize;
                        if sr < 0 || sr >= h || sc < 0 || sc >= w {
                            continue;
                        }
                        let src_px = (sr * w + sc) as usize;
                        let kbase = (ky * ksize + kx) * geom.channels;
                        for ci in 0..geom.channels {
                            dx[(i, ci * px + src_px)] =
                                dx[(i, ci * px + src_px)] + dcols[(in_row, kbase + ci)];
                        }
                    }
                }
            }
        }
    }
    dx
}
