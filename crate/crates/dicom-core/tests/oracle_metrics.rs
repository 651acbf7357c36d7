//! Every metric kernel checked against an independent brute-force
//! implementation on hundreds of randomized small instances. The oracles
//! here trade all efficiency for obviousness: exhaustive pair loops,
//! threshold rescans, quadratic distance tables.

use ndarray::Array2;
use rand::Rng;

use dicom_core::metrics;
use dicom_core::rng::stream;

const TOL: f64 = 1e-10;

/// Random binary instance with ties encouraged: scores on a coarse grid
/// half the time, continuous otherwise; both classes always present.
fn binary_instance(seed: u64, case: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = stream(seed, "oracle.binary", &[case]);
    let n = rng.random_range(2..=12);
    let coarse = rng.random_range(0..2) == 0;
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                rng.random_range(0..5) as f64 / 4.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 0).collect();
    labels[0] = true;
    labels[n - 1] = false;
    (scores, labels)
}

// ── Ranking ──────────────────────────────────────────────────────────────

/// Mann–Whitney by exhaustive pairs: P(random positive outscores a random
/// negative), ties ½.
fn auc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision by threshold rescans: at every unique score t
/// (descending), recount tp/fp over the whole set with `s ≥ t`.
fn aupr_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (&s, &y) in scores.iter().zip(positive) {
            if s >= t {
                if y {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / pos;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

#[test]
fn auc_matches_exhaustive_pair_counting() {
    for case in 0..150 {
        let (scores, labels) = binary_instance(101, case);
        let got = metrics::auc(&scores, &labels).unwrap();
        let want = auc_oracle(&scores, &labels);
        assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
    }
}

#[test]
fn aupr_matches_threshold_rescans() {
    for case in 0..150 {
        let (scores, labels) = binary_instance(202, case);
        let got = metrics::aupr(&scores, &labels).unwrap();
        let want = aupr_oracle(&scores, &labels);
        assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
    }
}

#[test]
fn macro_averages_match_per_class_oracles() {
    for case in 0..100 {
        let mut rng = stream(303, "oracle.macro", &[case]);
        let n = rng.random_range(3..=12);
        let classes = rng.random_range(2..=4);
        let scores = Array2::from_shape_fn((n, classes), |_| rng.random_range(0.0..1.0));
        let mut labels: Vec<i64> = (0..n).map(|_| rng.random_range(0..classes) as i64).collect();
        labels[0] = 0;
        labels[1] = 1;

        let mut auc_sum = 0.0;
        let mut aupr_sum = 0.0;
        let mut used = 0.0;
        for c in 0..classes {
            let positive: Vec<bool> = labels.iter().map(|&l| l == c as i64).collect();
            let n_pos = positive.iter().filter(|&&p| p).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let col: Vec<f64> = scores.column(c).to_vec();
            auc_sum += auc_oracle(&col, &positive);
            aupr_sum += aupr_oracle(&col, &positive);
            used += 1.0;
        }
        let got_auc = metrics::macro_auc(&scores, &labels).unwrap();
        let got_aupr = metrics::macro_aupr(&scores, &labels).unwrap();
        assert!((got_auc - auc_sum / used).abs() < TOL, "case {case}");
        assert!((got_aupr - aupr_sum / used).abs() < TOL, "case {case}");
    }
}

// ── Partitions ───────────────────────────────────────────────────────────

#[test]
fn rand_index_matches_exhaustive_pairs() {
    for case in 0..150 {
        let mut rng = stream(404, "oracle.rand", &[case]);
        let n = rng.random_range(2..=12);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let clusters: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();

        let mut agree = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += 1.0;
                let together_a = labels[i] == labels[j];
                let together_b = clusters[i] == clusters[j];
                if together_a == together_b {
                    agree += 1.0;
                }
            }
        }
        let got = metrics::rand_index(&labels, &clusters).unwrap();
        assert!((got - agree / total).abs() < TOL, "case {case}: {got} vs {}", agree / total);
    }
}

/// Naive silhouette: per-point means over explicit distance loops;
/// singleton clusters score 0; 0/0 scores 0.
fn silhouette_oracle(points: &Array2<f64>, clusters: &[usize]) -> f64 {
    let n = points.nrows();
    let k = clusters.iter().map(|&c| c + 1).max().unwrap();
    let d = |i: usize, j: usize| {
        points
            .row(i)
            .iter()
            .zip(points.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = clusters[i];
        let own_size = clusters.iter().filter(|&&c| c == own).count();
        if own_size == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && clusters[j] == own {
                a += d(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for other in 0..k {
            if other == own {
                continue;
            }
            let size = clusters.iter().filter(|&&c| c == other).count();
            if size == 0 {
                continue;
            }
            let mut mean = 0.0;
            for j in 0..n {
                if clusters[j] == other {
                    mean += d(i, j);
                }
            }
            b = b.min(mean / size as f64);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[test]
fn silhouette_matches_naive_distance_loops() {
    for case in 0..150 {
        let mut rng = stream(505, "oracle.sil", &[case]);
        let n = rng.random_range(3..=12);
        let dims = rng.random_range(1..=4);
        let points = Array2::from_shape_fn((n, dims), |_| rng.random_range(-2.0..2.0));
        let mut clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        clusters[0] = 0;
        clusters[1] = 1;

        let got = metrics::silhouette(&points, &clusters).unwrap();
        let want = silhouette_oracle(&points, &clusters);
        assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
    }
}

// ── Convergence speed ────────────────────────────────────────────────────

/// Quadratic running max recomputed from scratch at every index, then a
/// literal trapezoid sum.
fn soc_oracle(curve: &[f64]) -> f64 {
    let runmax: Vec<f64> = (0..curve.len())
        .map(|e| curve[..=e].iter().cloned().fold(f64::MIN, f64::max))
        .collect();
    if runmax.len() == 1 {
        return runmax[0];
    }
    let mut area = 0.0;
    for i in 1..runmax.len() {
        area += (runmax[i - 1] + runmax[i]) / 2.0;
    }
    area / (runmax.len() - 1) as f64
}

#[test]
fn soc_matches_the_from_scratch_trapezoid() {
    for case in 0..150 {
        let mut rng = stream(606, "oracle.soc", &[case]);
        let n = rng.random_range(1..=20);
        let curve: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let got = metrics::soc(&curve).unwrap();
        let want = soc_oracle(&curve);
        assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
    }
}

// ── Overlap and boundary distance ────────────────────────────────────────

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0..2))
}

#[test]
fn dice_matches_direct_counting() {
    for case in 0..150 {
        let mut rng = stream(707, "oracle.dice", &[case]);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let pred = random_mask(&mut rng, h, w);
        let truth = random_mask(&mut rng, h, w);

        let (mut na, mut nb, mut inter) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if pred[(r, c)] == 1 {
                    na += 1.0;
                }
                if truth[(r, c)] == 1 {
                    nb += 1.0;
                }
                if pred[(r, c)] == 1 && truth[(r, c)] == 1 {
                    inter += 1.0;
                }
            }
        }
        let want = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        let got = metrics::dice(&pred, &truth, 1).unwrap();
        assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
    }
}

/// Boundary cells by definition (class cell with a non-class or off-image
/// 4-neighbor), all-pairs nearest distances, nearest-rank percentile.
fn hd95_oracle(pred: &Array2<u8>, truth: &Array2<u8>, cls: u8) -> Option<f64> {
    let cells = |m: &Array2<u8>| -> Vec<(f64, f64)> {
        let (h, w) = m.dim();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if m[(r, c)] != cls {
                    continue;
                }
                let neighbors = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                let interior = neighbors
                    .iter()
                    .all(|&(nr, nc)| nr < h && nc < w && m[(nr, nc)] == cls);
                if !interior {
                    out.push((r as f64, c as f64));
                }
            }
        }
        out
    };
    let a = cells(pred);
    let b = cells(truth);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        let mut mins: Vec<f64> = from
            .iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(tr, tc)| ((r - tr).powi(2) + (c - tc).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        mins.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((0.95 * mins.len() as f64).ceil() as usize).max(1) - 1;
        mins[rank]
    };
    Some(directed(&a, &b).max(directed(&b, &a)))
}

#[test]
fn hd95_matches_all_pairs_distances() {
    let mut defined = 0;
    let mut case = 0u64;
    while defined < 120 {
        let mut rng = stream(808, "oracle.hd", &[case]);
        case += 1;
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let pred = random_mask(&mut rng, h, w);
        let truth = random_mask(&mut rng, h, w);

        match hd95_oracle(&pred, &truth, 1) {
            None => {
                assert!(metrics::hd95(&pred, &truth, 1).is_err(), "case {case} should be undefined");
            }
            Some(want) => {
                defined += 1;
                let got = metrics::hd95(&pred, &truth, 1).unwrap();
                assert!((got - want).abs() < TOL, "case {case}: {got} vs {want}");
            }
        }
    }
}
