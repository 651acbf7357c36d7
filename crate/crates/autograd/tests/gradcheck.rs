//! Central-difference verification of every differentiable op.
//!
//! Each check builds the same graph twice: once to read the tape's gradients,
//! then per coordinate with a ±h perturbation to form a second-order finite
//! difference. Everything runs in `f64`, where the difference quotient is
//! trustworthy to far tighter tolerances than the `f32` training path needs.

use autograd::{MapGeom, Tape, Var};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn randu(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values with |v| ∈ [lo, lo+1], for denominators and similar places
/// that must stay away from zero.
fn randu_away(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.random_range(lo..lo + 1.0)
    })
}

fn eval(inputs: &[Array2<f64>], build: &Build) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let loss = build(&mut t, &vars);
    t.scalar(loss)
}

/// Compare tape gradients against central differences on every coordinate
/// (strided down to at most 40 per tensor). Pass criterion is the usual
/// mixed bound `|ad − fd| ≤ atol + rtol·max(|ad|, |fd|)`.
fn fd_check(name: &str, inputs: &[Array2<f64>], build: &Build) {
    let (atol, rtol) = (1e-6, 1e-5);
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let loss = build(&mut t, &vars);
    t.backward(loss);
    let grads: Vec<Array2<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| t.grad(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim())))
        .collect();

    for (pi, x) in inputs.iter().enumerate() {
        let len = x.len();
        let step = len.div_ceil(40).max(1);
        let mut coord = 0;
        while coord < len {
            let (r, c) = (coord / x.ncols(), coord % x.ncols());
            let h = 1e-5 * (1.0 + x[(r, c)].abs());
            let mut plus = inputs.to_vec();
            plus[pi][(r, c)] += h;
            let mut minus = inputs.to_vec();
            minus[pi][(r, c)] -= h;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let ad = grads[pi][(r, c)];
            let err = (ad - fd).abs();
            assert!(
                err <= atol + rtol * ad.abs().max(fd.abs()),
                "{name}: input {pi} coord ({r},{c}): ad={ad:.12e} fd={fd:.12e} err={err:.3e}"
            );
            coord += step;
        }
    }
}

#[test]
fn grad_matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = randu(&mut rng, (3, 4));
    let b = randu(&mut rng, (4, 5));
    let bias = randu(&mut rng, (1, 5));
    let w = randu(&mut rng, (3, 5));
    fd_check("matmul+bias", &[a, b, bias], &move |t, vs| {
        let y = t.linear(vs[0], vs[1], Some(vs[2]));
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_elementwise_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randu(&mut rng, (3, 4));
    let b = randu_away(&mut rng, (3, 4), 0.5);
    let w = randu(&mut rng, (3, 4));
    fd_check("add/sub/mul/div/scale/add_const", &[a, b], &move |t, vs| {
        let s = t.add(vs[0], vs[1]);
        let d = t.sub(s, vs[0]);
        let m = t.mul(d, vs[0]);
        let q = t.div(m, vs[1]);
        let sc = t.scale(q, 0.7);
        let ac = t.add_const(sc, 0.3);
        let wv = t.constant(w.clone());
        let p = t.mul(ac, wv);
        t.sum_all(p)
    });
}

#[test]
fn grad_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randu(&mut rng, (3, 5)) * 2.0;
    let w = randu(&mut rng, (3, 5));
    fd_check("gelu", &[x], &move |t, vs| {
        let y = t.gelu(vs[0]);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randu(&mut rng, (5, 8));
    let gamma = randu_away(&mut rng, (1, 8), 0.5);
    let beta = randu(&mut rng, (1, 8));
    let w = randu(&mut rng, (5, 8));
    fd_check("layer_norm", &[x, gamma, beta], &move |t, vs| {
        let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-6);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_l2_norm_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randu_away(&mut rng, (4, 6), 0.3);
    let w = randu(&mut rng, (4, 6));
    fd_check("l2_norm_rows", &[x], &move |t, vs| {
        let y = t.l2_norm_rows(vs[0], 1e-12);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_softmax_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randu(&mut rng, (4, 5)) * 2.0;
    let w = randu(&mut rng, (4, 5));
    fd_check("softmax_rows", &[x], &move |t, vs| {
        let y = t.softmax_rows(vs[0]);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_mha_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (images, seq, d, heads) = (2usize, 4usize, 6usize, 2usize);
    let x = randu(&mut rng, (images * seq, d));
    let mats: Vec<Array2<f64>> = (0..4).map(|_| randu(&mut rng, (d, d)) * 0.5).collect();
    let biases: Vec<Array2<f64>> = (0..4).map(|_| randu(&mut rng, (1, d)) * 0.2).collect();
    let w = randu(&mut rng, (images * seq, d));
    let mut inputs = vec![x];
    inputs.extend(mats);
    inputs.extend(biases);
    fd_check("mha", &inputs, &move |t, vs| {
        let y = t.mha(
            vs[0], vs[1], vs[2], vs[3], vs[4], vs[5], vs[6], vs[7], vs[8], images, seq, heads,
        );
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_row_and_column_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randu(&mut rng, (6, 4));
    let w = randu(&mut rng, (4, 4));
    let wc = randu(&mut rng, (5, 1));
    // Duplicate index exercises the scatter-add in the backward pass.
    fd_check("select_rows", &[x.clone()], &move |t, vs| {
        let y = t.select_rows(vs[0], vec![0, 2, 2, 5]);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
    let x5 = randu(&mut rng, (5, 4));
    fd_check("select_col", &[x5], &move |t, vs| {
        let y = t.select_col(vs[0], 2);
        let wv = t.constant(wc.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_broadcast_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = randu(&mut rng, (1, 5));
    let w = randu(&mut rng, (4, 5));
    fd_check("broadcast_row", &[x], &move |t, vs| {
        let y = t.broadcast_row(vs[0], 4);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_token_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (images, n, d) = (2usize, 4usize, 3usize);
    let cls = randu(&mut rng, (images, d));
    let patches = randu(&mut rng, (images * n, d));
    let pos = randu(&mut rng, (n + 1, d));
    let w = randu(&mut rng, (images, d * n));
    fd_check("assemble_tokens+add_pos+tokens_to_grid", &[cls, patches, pos], &move |t, vs| {
        let tokens = t.assemble_tokens(vs[0], vs[1], n);
        let shifted = t.add_pos(tokens, vs[2], images);
        let grid = t.tokens_to_grid(shifted, images, 2, 2);
        let wv = t.constant(w.clone());
        let m = t.mul(grid, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_grid_to_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (images, channels, px) = (2usize, 3usize, 6usize);
    let x = randu(&mut rng, (images, channels * px));
    let w = randu(&mut rng, (images * px, channels));
    fd_check("grid_to_rows", &[x], &move |t, vs| {
        let rows = t.grid_to_rows(vs[0], channels);
        let wv = t.constant(w.clone());
        let m = t.mul(rows, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_assemble_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = randu(&mut rng, (3, 4));
    let w = randu(&mut rng, (2, 16));
    fd_check("assemble_patches", &[x], &move |t, vs| {
        let y = t.assemble_patches(vs[0], vec![(0, 0), (0, 3), (1, 2)], 2, 2, 2, 2);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_ce_vs_const_probs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = randu(&mut rng, (4, 6));
    let mut probs = randu(&mut rng, (4, 6)).mapv(f64::abs);
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let weights = Array1::from(vec![1.0, 0.0, 0.5, 2.0]);
    fd_check("ce_vs_const_probs", &[logits], &move |t, vs| {
        t.ce_vs_const_probs(vs[0], probs.clone(), weights.clone(), 2.0, 1e-8, 0.37)
    });
}

#[test]
fn grad_masked_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let pred = randu(&mut rng, (4, 5));
    // Targets offset well away from the |·| kink so the difference quotient
    // stays on one side.
    let offs = randu_away(&mut rng, (4, 5), 0.2);
    let target = &pred + &offs;
    let mask = Array2::from_shape_fn((4, 5), |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    fd_check("masked_l1", &[pred], &move |t, vs| {
        t.masked_l1(vs[0], target.clone(), mask.clone(), 0.61)
    });
}

#[test]
fn grad_ce_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let logits = randu(&mut rng, (5, 4)) * 2.0;
    fd_check("ce_labels", &[logits], &move |t, vs| {
        t.ce_labels(vs[0], vec![0, 3, 1, 2, 2], 0.71, 1e-12)
    });
}

#[test]
fn grad_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = randu(&mut rng, (3, 4));
    fd_check("mean_all", &[x.clone()], &|t, vs| t.mean_all(vs[0]));
    fd_check("sum_all", &[x], &|t, vs| {
        let y = t.gelu(vs[0]);
        t.sum_all(y)
    });
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for &k in &[1usize, 3] {
        let geom = MapGeom::new(2, 3, 4, 5);
        let cout = 2;
        let x = randu(&mut rng, (2, 3 * 20));
        let w = randu(&mut rng, (k * k * 3, cout)) * 0.5;
        let b = randu(&mut rng, (1, cout));
        let wl = randu(&mut rng, (2, cout * 20));
        fd_check(&format!("conv2d k={k}"), &[x, w, b], &move |t, vs| {
            let y = t.conv2d(vs[0], vs[1], vs[2], geom, cout, k);
            let wv = t.constant(wl.clone());
            let m = t.mul(y, wv);
            t.sum_all(m)
        });
    }
}

#[test]
fn grad_conv_t2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let geom = MapGeom::new(2, 3, 2, 3);
    let cout = 2;
    let x = randu(&mut rng, (2, 3 * 6));
    let w = randu(&mut rng, (3, cout * 4)) * 0.5;
    let b = randu(&mut rng, (1, cout));
    let wl = randu(&mut rng, (2, cout * 24));
    fd_check("conv_t2x2", &[x, w, b], &move |t, vs| {
        let y = t.conv_t2x2(vs[0], vs[1], vs[2], geom, cout);
        let wv = t.constant(wl.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let geom = MapGeom::new(2, 3, 3, 4);
    let x = randu(&mut rng, (2, 3 * 12));
    let gamma = randu_away(&mut rng, (1, 3), 0.5);
    let beta = randu(&mut rng, (1, 3));
    let w = randu(&mut rng, (2, 3 * 12));
    fd_check("instance_norm", &[x, gamma, beta], &move |t, vs| {
        let y = t.instance_norm(vs[0], vs[1], vs[2], geom, 1e-6);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

#[test]
fn grad_concat_cols() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let a = randu(&mut rng, (3, 2));
    let b = randu(&mut rng, (3, 4));
    let w = randu(&mut rng, (3, 6));
    fd_check("concat_cols", &[a, b], &move |t, vs| {
        let y = t.concat_cols(vs[0], vs[1]);
        let wv = t.constant(w.clone());
        let m = t.mul(y, wv);
        t.sum_all(m)
    });
}

/// One transformer block end to end: residual forks make the gradient
/// accumulate along two paths, which is exactly what single-op checks miss.
#[test]
fn grad_transformer_block_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (images, seq, d, hidden, heads) = (2usize, 3usize, 4usize, 6usize, 2usize);
    let x = randu(&mut rng, (images * seq, d));
    let ln1_g = randu_away(&mut rng, (1, d), 0.5);
    let ln1_b = randu(&mut rng, (1, d));
    let attn: Vec<Array2<f64>> = (0..4).map(|_| randu(&mut rng, (d, d)) * 0.5).collect();
    let attn_b: Vec<Array2<f64>> = (0..4).map(|_| randu(&mut rng, (1, d)) * 0.2).collect();
    let ln2_g = randu_away(&mut rng, (1, d), 0.5);
    let ln2_b = randu(&mut rng, (1, d));
    let w1 = randu(&mut rng, (d, hidden)) * 0.5;
    let b1 = randu(&mut rng, (1, hidden)) * 0.2;
    let w2 = randu(&mut rng, (hidden, d)) * 0.5;
    let b2 = randu(&mut rng, (1, d)) * 0.2;
    let w = randu(&mut rng, (1, d));

    let mut inputs = vec![x, ln1_g, ln1_b];
    inputs.extend(attn);
    inputs.extend(attn_b);
    inputs.extend([ln2_g, ln2_b, w1, b1, w2, b2]);
    fd_check("transformer block", &inputs, &move |t, vs| {
        let normed = t.layer_norm(vs[0], vs[1], vs[2], 1e-6);
        let att = t.mha(
            normed, vs[3], vs[4], vs[5], vs[6], vs[7], vs[8], vs[9], vs[10], images, seq, heads,
        );
        let res1 = t.add(vs[0], att);
        let normed2 = t.layer_norm(res1, vs[11], vs[12], 1e-6);
        let hidden = t.linear(normed2, vs[13], Some(vs[14]));
        let act = t.gelu(hidden);
        let out = t.linear(act, vs[15], Some(vs[16]));
        let res2 = t.add(res1, out);
        let first = t.select_rows(res2, vec![0]);
        let wv = t.constant(w.clone());
        let m = t.mul(first, wv);
        t.sum_all(m)
    });
}
