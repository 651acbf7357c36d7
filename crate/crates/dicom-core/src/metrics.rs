//! Evaluation metrics: classification (accuracy, AUC, average precision and
//! their one-vs-rest macro forms), segmentation overlap (Dice, 95th-percentile
//! Hausdorff distance), clustering agreement (Rand index, Silhouette), and
//! the speed-of-convergence score over a metric-versus-epoch curve.
//!
//! Undefined cases (single-class label vectors, empty masks, a single
//! cluster) are reported as errors, never silently as zero.

use ndarray::Array2;

use crate::error::{Error, Result};

fn undefined(msg: impl Into<String>) -> Error {
    Error::Metric(msg.into())
}

// ── Classification ───────────────────────────────────────────────────────

/// Fraction of predictions equal to the labels.
pub fn accuracy(preds: &[i64], labels: &[i64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(undefined(format!(
            "accuracy needs equal, non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// C×C confusion counts: `counts[(truth, pred)]`.
pub fn confusion(preds: &[i64], labels: &[i64], classes: usize) -> Result<Array2<u64>> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(undefined("confusion needs equal, non-empty inputs"));
    }
    let mut counts = Array2::zeros((classes, classes));
    for (&p, &l) in preds.iter().zip(labels) {
        if p < 0 || l < 0 || p as usize >= classes || l as usize >= classes {
            return Err(undefined(format!("confusion label/prediction ({l}, {p}) outside {classes} classes")));
        }
        counts[(l as usize, p as usize)] += 1;
    }
    Ok(counts)
}

fn check_binary_inputs(scores: &[f64], positive: &[bool], what: &str) -> Result<(usize, usize)> {
    if scores.len() != positive.len() || scores.is_empty() {
        return Err(undefined(format!(
            "{what} needs equal, non-empty inputs, got {} scores and {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(undefined(format!("{what} scores must be finite")));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(undefined(format!("{what} is undefined for single-class labels")));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting ½.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(scores, positive, "auc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Ascending sweep over tie groups: each positive in a group beats every
    // negative strictly below it and half-ties the negatives in its group.
    let mut u = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        u += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: descending sweep over unique score thresholds (ties
/// grouped), summing precision · recall-increment at each step.
pub fn aupr(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary_inputs(scores, positive, "aupr")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

fn macro_over_classes(
    scores: &Array2<f64>,
    labels: &[i64],
    f: impl Fn(&[f64], &[bool]) -> Result<f64>,
    what: &str,
) -> Result<f64> {
    if scores.nrows() != labels.len() || labels.is_empty() {
        return Err(undefined(format!("{what} needs one score row per label")));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..scores.ncols() {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c as i64).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        // Classes absent from the labels (or covering them all) are skipped:
        // their one-vs-rest problem is undefined.
        if n_pos == 0 || n_pos == labels.len() {
            continue;
        }
        let col: Vec<f64> = scores.column(c).to_vec();
        total += f(&col, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(undefined(format!("{what} is undefined: no class has both positives and negatives")));
    }
    Ok(total / used as f64)
}

/// One-vs-rest macro average of [`auc`] over the classes present.
pub fn macro_auc(scores: &Array2<f64>, labels: &[i64]) -> Result<f64> {
    macro_over_classes(scores, labels, auc, "macro-auc")
}

/// One-vs-rest macro average of [`aupr`] over the classes present.
pub fn macro_aupr(scores: &Array2<f64>, labels: &[i64]) -> Result<f64> {
    macro_over_classes(scores, labels, aupr, "macro-aupr")
}

// ── Segmentation ─────────────────────────────────────────────────────────

/// Dice overlap of one class between two label maps:
/// `2|A∩B| / (|A| + |B|)`, with two empty regions counting as 1.
pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>, cls: u8) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(undefined(format!(
            "dice shapes disagree: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let (ip, it) = (p == cls, t == cls);
        a += ip as u64;
        b += it as u64;
        both += (ip && it) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Pixels of `mask == cls` that touch the class border: at least one
/// 4-neighbor is outside the class or outside the image.
fn boundary(mask: &Array2<u8>, cls: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[(r, c)] != cls {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r == h - 1
                || c == w - 1
                || mask[(r - 1, c)] != cls
                || mask[(r + 1, c)] != cls
                || mask[(r, c - 1)] != cls
                || mask[(r, c + 1)] != cls;
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// 95th percentile (nearest-rank) of the directed boundary distances from
/// `from` to `to`.
fn directed_hd95(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(tr, tc)| {
                    let dr = r as f64 - tr as f64;
                    let dc = c as f64 - tc as f64;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * dists.len() as f64).ceil() as usize).max(1) - 1;
    dists[rank]
}

/// 95th-percentile Hausdorff distance between the class boundaries of two
/// label maps: the larger of the two directed 95th percentiles, in Euclidean
/// pixel units. Undefined (an error) when either map lacks the class.
pub fn hd95(pred: &Array2<u8>, truth: &Array2<u8>, cls: u8) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(undefined(format!(
            "hd95 shapes disagree: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let bp = boundary(pred, cls);
    let bt = boundary(truth, cls);
    if bp.is_empty() || bt.is_empty() {
        return Err(undefined(format!("hd95 is undefined: class {cls} empty in one of the masks")));
    }
    Ok(directed_hd95(&bp, &bt).max(directed_hd95(&bt, &bp)))
}

// ── Clustering ───────────────────────────────────────────────────────────

/// Rand index between two partitions of the same points: the fraction of
/// unordered pairs on which they agree (together in both, or apart in both).
/// Invariant to relabeling either side.
pub fn rand_index<A: PartialEq, B: PartialEq>(labels: &[A], clusters: &[B]) -> Result<f64> {
    if labels.len() != clusters.len() {
        return Err(undefined("rand index needs equal-length partitions"));
    }
    let n = labels.len();
    if n < 2 {
        return Err(undefined(format!("rand index needs at least 2 points, got {n}")));
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_l = labels[i] == labels[j];
            let same_c = clusters[i] == clusters[j];
            agree += (same_l == same_c) as u64;
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

/// Mean silhouette over all points under Euclidean distance:
/// `s_i = (b_i − a_i) / max(a_i, b_i)` with `a` the mean distance to the
/// point's own cluster (excluding itself) and `b` the smallest mean distance
/// to another cluster. Points in singleton clusters score 0, as do points
/// where both means vanish. Needs at least two clusters.
pub fn silhouette(embeddings: &Array2<f64>, clusters: &[usize]) -> Result<f64> {
    let n = embeddings.nrows();
    if clusters.len() != n || n < 2 {
        return Err(undefined("silhouette needs one cluster per embedding row and at least 2 points"));
    }
    let k = clusters.iter().map(|&c| c + 1).max().unwrap_or(0);
    let sizes: Vec<usize> = (0..k).map(|c| clusters.iter().filter(|&&x| x == c).count()).collect();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(undefined("silhouette is undefined for a single cluster"));
    }

    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for (a, b) in embeddings.row(i).iter().zip(embeddings.row(j).iter()) {
            let d = a - b;
            s += d * d;
        }
        s.sqrt()
    };

    let mut total = 0.0;
    for i in 0..n {
        let own = clusters[i];
        if sizes[own] == 1 {
            continue; // s_i = 0
        }
        // Mean distance to every cluster.
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if j != i {
                sums[clusters[j]] += dist(i, j);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && sizes[c] > 0 {
                b = b.min(sums[c] / sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

// ── Speed of convergence ─────────────────────────────────────────────────

/// Area under the running-maximum of a per-epoch metric curve, normalized
/// by the epoch span so the result stays in [0,1]. A single-epoch curve
/// scores its own value.
pub fn soc(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return Err(undefined("speed-of-convergence needs a non-empty curve"));
    }
    if curve.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(undefined("speed-of-convergence curve values must lie in [0,1]"));
    }
    let mut runmax = Vec::with_capacity(curve.len());
    let mut m = f64::MIN;
    for &v in curve {
        m = m.max(v);
        runmax.push(m);
    }
    if runmax.len() == 1 {
        return Ok(runmax[0]);
    }
    let mut area = 0.0;
    for w in runmax.windows(2) {
        area += 0.5 * (w[0] + w[1]);
    }
    Ok(area / (runmax.len() - 1) as f64)
}
