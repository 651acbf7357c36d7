//! Downstream classification on top of a pre-trained encoder: linear
//! probing over frozen class-token embeddings, and full fine-tuning of the
//! encoder with a fresh linear head. Both produce an evaluation report with
//! per-epoch validation metrics (the learning curve other tools integrate)
//! and a final held-out evaluation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use autograd::{warmup_cosine, AdamW, Tape};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::objective::{softmax_rows, EPS_LOG};
use crate::rng::stream;
use crate::vit::{class_rows, encode, Backbone};
use crate::Split;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ── Embeddings ───────────────────────────────────────────────────────────

/// Class-token embeddings for a set of images, with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<i64>,
    /// (N, d) — the final-norm class token per image.
    pub features: Array2<f32>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Run the encoder over `indices` (in order, batched) and keep each image's
/// class token. No gradients are recorded and the encoder is untouched.
pub fn extract_embeddings(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if indices.is_empty() {
        return Err(Error::Data("no images to embed".into()));
    }
    let d = backbone.embed_dim();
    let seq = backbone.n_tokens() + 1;
    let mut features = Array2::zeros((indices.len(), d));
    let mut ids = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut row = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk);
        let mut tape = Tape::<f32>::new();
        let bound = backbone.bind(&mut tape, false);
        let enc = encode(&mut tape, &bound, &batch.images, false)?;
        let cls = tape.select_rows(enc.tokens, class_rows(batch.len(), seq));
        let values = tape.value(cls);
        for i in 0..batch.len() {
            features.row_mut(row).assign(&values.row(i));
            row += 1;
        }
        ids.extend(batch.ids);
        labels.extend(batch.labels);
    }
    Ok(EmbeddingSet { ids, labels, features })
}

/// Indices of a split restricted to labeled images.
pub fn labeled_indices(dataset: &Dataset, split: Split) -> Vec<usize> {
    dataset
        .split_indices(split)
        .into_iter()
        .filter(|&i| dataset.entries[i].label >= 0)
        .collect()
}

// ── Reports ──────────────────────────────────────────────────────────────

/// Validation metrics after one training epoch. Ranking metrics are absent
/// (not zero) when the evaluation set lacks a class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: u64,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub accuracy: Option<f64>,
    pub aupr: Option<f64>,
    pub auc: Option<f64>,
}

/// Held-out evaluation at the end of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalEval {
    pub split: String,
    pub accuracy: Option<f64>,
    pub aupr: Option<f64>,
    pub auc: Option<f64>,
    /// confusion[truth][prediction].
    pub confusion: Vec<Vec<u64>>,
}

/// The full record of one downstream run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub config_fingerprint: String,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub per_epoch: Vec<EpochEval>,
    #[serde(rename = "final")]
    pub final_eval: FinalEval,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// The per-epoch learning curve as CSV (absent metrics are empty cells).
    pub fn curve_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,accuracy,aupr,auc\n");
        for e in &self.per_epoch {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                cell(e.accuracy),
                cell(e.aupr),
                cell(e.auc)
            ));
        }
        out
    }
}

// ── Scoring ──────────────────────────────────────────────────────────────

/// Class probabilities and argmax predictions from raw logits.
pub fn score_logits(logits: &Array2<f32>) -> (Array2<f64>, Vec<i64>) {
    let probs = softmax_rows(&logits.mapv(|v| v as f64));
    let preds = probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0usize;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect();
    (probs, preds)
}

#[derive(Debug, Clone, Copy)]
struct Assessment {
    accuracy: Option<f64>,
    aupr: Option<f64>,
    auc: Option<f64>,
}

/// Accuracy plus ranking metrics: the positive-class column for binary
/// problems, one-vs-rest macro averages otherwise. A metric that is
/// undefined on this evaluation set (e.g. a single class present) is
/// reported as absent.
fn assess(probs: &Array2<f64>, preds: &[i64], labels: &[i64], classes: usize) -> Assessment {
    let accuracy = metrics::accuracy(preds, labels).ok();
    let (aupr, auc) = if classes == 2 {
        let scores: Vec<f64> = probs.column(1).to_vec();
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        (metrics::aupr(&scores, &positive).ok(), metrics::auc(&scores, &positive).ok())
    } else {
        (metrics::macro_aupr(probs, labels).ok(), metrics::macro_auc(probs, labels).ok())
    };
    Assessment { accuracy, aupr, auc }
}

// ── Linear head ──────────────────────────────────────────────────────────

/// A single linear layer `(d → classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Array2<f32>,
    pub b: Array2<f32>,
}

impl LinearHead {
    pub fn init(d: usize, classes: usize, seed: u64, label: &str) -> Self {
        let mut rng = stream(seed, label, &[]);
        LinearHead {
            w: autograd::trunc_normal((d, classes), 0.02, &mut rng),
            b: Array2::zeros((1, classes)),
        }
    }

    pub fn logits(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.dot(&self.w);
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b[(0, j)];
            }
        }
        out
    }
}

fn shuffled(n: usize, seed: u64, label: &str, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, label, &[epoch]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn gather_rows(x: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &src) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(src));
    }
    out
}

/// Fit a linear head on fixed embeddings, evaluating on `val` after every
/// epoch. The features never change, so this is the frozen-encoder probe.
pub fn train_linear_head(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(LinearHead, Vec<EpochEval>)> {
    if train.is_empty() {
        return Err(Error::Data("no labeled training embeddings".into()));
    }
    if classes < 2 {
        return Err(Error::Data(format!("classification needs at least 2 classes, got {classes}")));
    }
    let d = train.features.ncols();
    let mut head = LinearHead::init(d, classes, seed, "probe.head");
    let mut opt = AdamW::<f32>::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 0.0);
    let mut curve = Vec::with_capacity(epochs);
    let eps = EPS_LOG as f32;

    for epoch in 0..epochs as u64 {
        let order = shuffled(train.len(), seed, "probe.shuffle", epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let x = gather_rows(&train.features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i] as usize).collect();
            let n = chunk.len();

            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x);
            let wv = tape.leaf(head.w.clone());
            let bv = tape.leaf(head.b.clone());
            let logits = tape.linear(xv, wv, Some(bv));
            let loss = tape.ce_labels(logits, y, 1.0 / n as f32, eps);
            loss_sum += tape.scalar(loss) as f64 * n as f64;
            tape.backward(loss);

            let grads = [tape.grad(wv), tape.grad(bv)];
            let mut params = [&mut head.w, &mut head.b];
            opt.step(&mut params, &grads, &[lr, lr], &[false, false]);
        }
        let train_loss = loss_sum / train.len() as f64;

        let (probs, preds) = score_logits(&head.logits(&val.features));
        let a = assess(&probs, &preds, &val.labels, classes);
        curve.push(EpochEval {
            epoch: epoch + 1,
            train_loss,
            accuracy: a.accuracy,
            aupr: a.aupr,
            auc: a.auc,
        });
    }
    Ok((head, curve))
}

fn final_eval(
    head: &LinearHead,
    set: &EmbeddingSet,
    classes: usize,
    split: &str,
) -> Result<FinalEval> {
    let (probs, preds) = score_logits(&head.logits(&set.features));
    let a = assess(&probs, &preds, &set.labels, classes);
    let confusion = metrics::confusion(&preds, &set.labels, classes)?;
    Ok(FinalEval {
        split: split.into(),
        accuracy: a.accuracy,
        aupr: a.aupr,
        auc: a.auc,
        confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

fn split_embeddings(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
    let batch = cfg.data.batch_size;
    let take = |split: Split| -> Result<EmbeddingSet> {
        let idx = labeled_indices(dataset, split);
        if idx.is_empty() {
            return Err(Error::Data(format!("{} split has no labeled images", split.as_str())));
        }
        extract_embeddings(backbone, dataset, &idx, batch)
    };
    Ok((take(Split::Train)?, take(Split::Val)?, take(Split::Test)?))
}

/// Probe a frozen encoder: extract embeddings once, fit a linear head, and
/// report per-epoch validation metrics plus the held-out test evaluation.
pub fn linear_probe(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<(LinearHead, EvalReport)> {
    let classes = dataset.n_classes();
    let (train, val, test) = split_embeddings(backbone, dataset, cfg)?;
    let (head, per_epoch) = train_linear_head(
        &train,
        &val,
        classes,
        cfg.probe.epochs,
        cfg.probe.lr,
        cfg.data.batch_size,
        cfg.seed,
    )?;
    let report = EvalReport {
        task: "linear_probe".into(),
        config_fingerprint: cfg.fingerprint(),
        classes: dataset.classes.clone(),
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        per_epoch,
        final_eval: final_eval(&head, &test, classes, "test")?,
    };
    Ok((head, report))
}

// ── Fine-tuning ──────────────────────────────────────────────────────────

/// Fine-tune a copy of the encoder together with a fresh linear head:
/// separate learning rates (encoder vs head), cosine-decayed per step, with
/// decoupled weight decay on the weight matrices only.
pub fn fine_tune(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<(Backbone<f32>, LinearHead, EvalReport)> {
    let classes = dataset.n_classes();
    if classes < 2 {
        return Err(Error::Data(format!("classification needs at least 2 classes, got {classes}")));
    }
    let train_idx = labeled_indices(dataset, Split::Train);
    let val_idx = labeled_indices(dataset, Split::Val);
    let test_idx = labeled_indices(dataset, Split::Test);
    for (name, idx) in [("train", &train_idx), ("val", &val_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(Error::Data(format!("{name} split has no labeled images")));
        }
    }

    let mut tuned = backbone.clone();
    let mut head = LinearHead::init(tuned.embed_dim(), classes, cfg.seed, "finetune.head");
    let mut opt = AdamW::<f32>::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS, cfg.optim.weight_decay);

    let batch_size = cfg.data.batch_size.max(1);
    let epochs = cfg.finetune.epochs;
    let batches_per_epoch = train_idx.len().div_ceil(batch_size);
    let total_steps = (epochs * batches_per_epoch).max(1);
    let seq = tuned.n_tokens() + 1;
    let eps = EPS_LOG as f32;

    let mut step = 0usize;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs as u64 {
        let order = shuffled(train_idx.len(), cfg.seed, "finetune.shuffle", epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let indices: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let batch = dataset.batch(&indices);
            let y: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
            let n = batch.len();

            let mut tape = Tape::<f32>::new();
            let bound = tuned.bind(&mut tape, true);
            let wv = tape.leaf(head.w.clone());
            let bv = tape.leaf(head.b.clone());
            let enc = encode(&mut tape, &bound, &batch.images, false)?;
            let cls = tape.select_rows(enc.tokens, class_rows(n, seq));
            let logits = tape.linear(cls, wv, Some(bv));
            let loss = tape.ce_labels(logits, y, 1.0 / n as f32, eps);
            let loss_value = tape.scalar(loss) as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    component: "fine-tune cross-entropy".into(),
                    step: step as u64,
                    value: loss_value,
                });
            }
            loss_sum += loss_value * n as f64;
            tape.backward(loss);

            let mut vars = bound.vars();
            vars.push(wv);
            vars.push(bv);
            let grads: Vec<Option<&Array2<f32>>> = vars.iter().map(|&v| tape.grad(v)).collect();

            let lr_bb = warmup_cosine(step, total_steps, 0, cfg.finetune.lr_backbone);
            let lr_head = warmup_cosine(step, total_steps, 0, cfg.finetune.lr_head);
            let mut registry = tuned.named_mut("backbone");
            let mut lrs = vec![lr_bb; registry.len()];
            let mut decay: Vec<bool> = registry.iter().map(|(_, _, d)| *d).collect();
            lrs.extend([lr_head, lr_head]);
            decay.extend([true, false]);
            let mut params: Vec<&mut Array2<f32>> =
                registry.iter_mut().map(|(_, t, _)| &mut **t).collect();
            params.push(&mut head.w);
            params.push(&mut head.b);
            opt.step(&mut params, &grads, &lrs, &decay);
            step += 1;
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val_set = extract_embeddings(&tuned, dataset, &val_idx, batch_size)?;
        let (probs, preds) = score_logits(&head.logits(&val_set.features));
        let a = assess(&probs, &preds, &val_set.labels, classes);
        curve.push(EpochEval {
            epoch: epoch + 1,
            train_loss,
            accuracy: a.accuracy,
            aupr: a.aupr,
            auc: a.auc,
        });
    }

    let test_set = extract_embeddings(&tuned, dataset, &test_idx, batch_size)?;
    let report = EvalReport {
        task: "fine_tune".into(),
        config_fingerprint: cfg.fingerprint(),
        classes: dataset.classes.clone(),
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        n_test: test_idx.len(),
        per_epoch: curve,
        final_eval: final_eval(&head, &test_set, classes, "test")?,
    };
    Ok((tuned, head, report))
}

/// Write a report and its learning curve next to each other.
pub fn write_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    if let Some(parent) = json_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
    let curve_path = json_path.with_extension("curve.csv");
    std::fs::write(&curve_path, report.curve_csv()).map_err(|e| Error::io(&curve_path, e))?;
    Ok(())
}
