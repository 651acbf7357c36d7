//! Representation quality probes that need no label supervision at all:
//! frozen-encoder embeddings exported to CSV for outside tooling, a small
//! two-way k-means splitter, and agreement scores between the discovered
//! split and the annotation that was never shown to the model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::classify::{extract_embeddings, labeled_indices, EmbeddingSet};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::stream;
use crate::vit::Backbone;
use crate::Split;

/// Convergence threshold on center movement between Lloyd iterations.
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_ITERS: usize = 300;
const KMEANS_RESTARTS: usize = 10;

// ── k-means, k = 2 ───────────────────────────────────────────────────────

fn sq_dist(a: ndarray::ArrayView1<f64>, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn farthest_from(features: &Array2<f64>, center: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, row) in features.rows().into_iter().enumerate() {
        let d = sq_dist(row, center);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn lloyd(features: &Array2<f64>, first: usize) -> (Vec<usize>, f64) {
    let (n, d) = features.dim();
    let mut centers = vec![features.row(first).to_vec(); 2];
    let second = farthest_from(features, &centers[0]);
    centers[1] = features.row(second).to_vec();

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, row) in features.rows().into_iter().enumerate() {
            assign[i] = usize::from(sq_dist(row, &centers[1]) < sq_dist(row, &centers[0]));
        }
        // Rebuild centers; an emptied cluster restarts at the point
        // farthest from the surviving one.
        let mut sums = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for (i, row) in features.rows().into_iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        for c in 0..2 {
            let next: Vec<f64> = if counts[c] == 0 {
                features.row(farthest_from(features, &centers[1 - c])).to_vec()
            } else {
                sums[c].iter().map(|&s| s / counts[c] as f64).collect()
            };
            shift += centers[c].iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            centers[c] = next;
        }
        if shift.sqrt() < KMEANS_TOL {
            break;
        }
    }
    for (i, row) in features.rows().into_iter().enumerate() {
        assign[i] = usize::from(sq_dist(row, &centers[1]) < sq_dist(row, &centers[0]));
    }
    let inertia: f64 = features
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| sq_dist(row, &centers[assign[i]]))
        .sum();
    (assign, inertia)
}

/// Split rows into two clusters. Farthest-point seeding from a random
/// anchor, ten restarts, best inertia wins. The boolean is a degeneracy
/// flag: all rows identical, so the "clustering" is a single blob and
/// agreement scores against it mean nothing.
pub fn cluster2(features: &Array2<f64>, seed: u64) -> (Vec<usize>, bool) {
    let n = features.nrows();
    if n == 0 {
        return (Vec::new(), true);
    }
    let anchor = features.row(0);
    let spread = features
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, anchor.as_slice().expect("contiguous row")))
        .fold(0.0, f64::max);
    if spread < KMEANS_TOL * KMEANS_TOL {
        return (vec![0; n], true);
    }

    let mut rng = stream(seed, "cluster.restart", &[]);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let first = rng.random_range(0..n);
        let (assign, inertia) = lloyd(features, first);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    (assign, false)
}

// ── Reports and export ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub task: String,
    pub config_fingerprint: String,
    pub split: String,
    pub n: usize,
    /// All embeddings identical; scores are withheld rather than faked.
    pub degenerate: bool,
    pub cluster_sizes: Vec<usize>,
    pub rand_index: Option<f64>,
    pub silhouette: Option<f64>,
}

impl ClusterReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Embed a split with the frozen encoder, cluster two ways, and score the
/// split against the held-back labels.
pub fn cluster_split(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
    split: Split,
) -> Result<(EmbeddingSet, ClusterReport)> {
    let indices = labeled_indices(dataset, split);
    if indices.is_empty() {
        return Err(Error::Data(format!("no labeled images in the {split:?} split")));
    }
    let set = extract_embeddings(backbone, dataset, &indices, cfg.data.batch_size)?;
    let features = set.features.mapv(|v| v as f64);
    let (assign, degenerate) = cluster2(&features, cfg.seed);

    let mut sizes = vec![0usize; 2];
    for &a in &assign {
        sizes[a] += 1;
    }
    let (rand_index, silhouette) = if degenerate {
        (None, None)
    } else {
        (
            metrics::rand_index(&set.labels, &assign).ok(),
            metrics::silhouette(&features, &assign).ok(),
        )
    };
    let report = ClusterReport {
        task: "cluster_eval".into(),
        config_fingerprint: cfg.fingerprint(),
        split: format!("{split:?}").to_lowercase(),
        n: set.len(),
        degenerate,
        cluster_sizes: sizes,
        rand_index,
        silhouette,
    };
    Ok((set, report))
}

/// `id,label,e_0..e_{d-1}` — one row per image, full precision.
pub fn write_embedding_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    write!(out, "id,label").expect("vec write");
    for j in 0..set.features.ncols() {
        write!(out, ",e_{j}").expect("vec write");
    }
    writeln!(out).expect("vec write");
    for (i, id) in set.ids.iter().enumerate() {
        write!(out, "{id},{}", set.labels[i]).expect("vec write");
        for v in set.features.row(i) {
            write!(out, ",{v}").expect("vec write");
        }
        writeln!(out).expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_cluster_report(report: &ClusterReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}
