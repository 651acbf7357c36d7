//! Dense segmentation transfer: a U-shaped convolutional decoder over
//! encoder states tapped at four depths, in the UNETR style. Each tap is
//! reshaped from tokens to a feature map; the deepest drives the main
//! upsampling path while the shallower ones (and the raw image, at full
//! resolution) join it as skip connections, each brought to its stage's
//! resolution by its own chain of 2× transposed convolutions. Training
//! optimizes pixel cross-entropy plus soft-Dice with equal weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use autograd::{warmup_cosine, AdamW, MapGeom, Scalar, Tape, Var};
use rand_core::RngCore;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::objective::EPS_LOG;
use crate::rng::stream;
use crate::vit::{encode, Backbone, BoundBackbone};
use crate::Split;

const IN_EPS: f64 = 1e-6;
const DICE_EPS: f64 = 1e-6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ── Decoder parameters ───────────────────────────────────────────────────

/// One convolution (1×1 projection or 2× transposed) followed by instance
/// normalization with per-channel affine.
#[derive(Debug, Clone, PartialEq)]
struct ConvUnit<F> {
    w: Array2<F>,
    b: Array2<F>,
    g: Array2<F>,
    beta: Array2<F>,
}

impl<F: Scalar> ConvUnit<F> {
    fn proj(cin: usize, cout: usize, rng: &mut impl RngCore) -> Self {
        ConvUnit {
            w: autograd::trunc_normal((cin, cout), 0.02, rng),
            b: Array2::zeros((1, cout)),
            g: Array2::ones((1, cout)),
            beta: Array2::zeros((1, cout)),
        }
    }

    fn deconv(cin: usize, cout: usize, rng: &mut impl RngCore) -> Self {
        ConvUnit {
            w: autograd::trunc_normal((cin, cout * 4), 0.02, rng),
            b: Array2::zeros((1, cout)),
            g: Array2::ones((1, cout)),
            beta: Array2::zeros((1, cout)),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<F>, bool)>) {
        out.push((format!("{prefix}.w"), &self.w, true));
        out.push((format!("{prefix}.b"), &self.b, false));
        out.push((format!("{prefix}.norm.g"), &self.g, false));
        out.push((format!("{prefix}.norm.b"), &self.beta, false));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<F>, bool)>) {
        out.push((format!("{prefix}.w"), &mut self.w, true));
        out.push((format!("{prefix}.b"), &mut self.b, false));
        out.push((format!("{prefix}.norm.g"), &mut self.g, false));
        out.push((format!("{prefix}.norm.b"), &mut self.beta, false));
    }

    fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundConvUnit {
        let mut put =
            |t: &Array2<F>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BoundConvUnit { w: put(&self.w), b: put(&self.b), g: put(&self.g), beta: put(&self.beta) }
    }
}

struct BoundConvUnit {
    w: Var,
    b: Var,
    g: Var,
    beta: Var,
}

impl BoundConvUnit {
    fn vars(&self) -> [Var; 4] {
        [self.w, self.b, self.g, self.beta]
    }
}

/// One skip path: a 1×1 projection to the stage's channel width, then as
/// many 2× transposed convolutions as the stage sits above the token grid.
#[derive(Debug, Clone, PartialEq)]
struct SkipChain<F> {
    proj: ConvUnit<F>,
    ups: Vec<ConvUnit<F>>,
}

/// Segmentation decoder parameters. `channels[s]` is the width after
/// upsampling stage `s`; the grid is doubled once per stage, so the encoder
/// patch size must be `2^channels.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoderParams<F> {
    proj: ConvUnit<F>,
    up: Vec<ConvUnit<F>>,
    skips: Vec<SkipChain<F>>,
    raw: ConvUnit<F>,
    fuse: Vec<ConvUnit<F>>,
    out_w: Array2<F>,
    out_b: Array2<F>,
    channels: [usize; 3],
    classes: usize,
}

impl<F: Scalar> SegDecoderParams<F> {
    pub fn init(cfg: &RunConfig, rng: &mut impl RngCore) -> Result<Self> {
        let d = cfg.model.embed_dim;
        let c = cfg.segment.channels;
        let classes = cfg.segment.classes;
        let taps = cfg.seg_taps();
        let mut problems = Vec::new();
        if classes < 2 {
            problems.push(format!("segment.classes must be at least 2, got {classes}"));
        }
        if taps.len() != 4 {
            problems.push(format!("segmentation needs 4 encoder taps, got {}", taps.len()));
        }
        for &t in &taps {
            if t == 0 || t > cfg.model.depth {
                problems.push(format!("tap {t} outside encoder depth {}", cfg.model.depth));
            }
        }
        if cfg.model.patch_size != 1 << c.len() {
            problems.push(format!(
                "three 2x upsampling stages recover patch size {}, config has {}",
                1 << c.len(),
                cfg.model.patch_size
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }

        // Main path: project the deepest tap, then one deconv per stage.
        let proj = ConvUnit::proj(d, c[0], rng);
        let up = vec![
            ConvUnit::deconv(c[0], c[0], rng),
            ConvUnit::deconv(c[0], c[1], rng),
            ConvUnit::deconv(c[1], c[2], rng),
        ];
        // Skips: the tap feeding stage s needs s+1 doublings.
        let mut skips = Vec::with_capacity(3);
        for (s, &ck) in c.iter().enumerate() {
            let mut ups = Vec::with_capacity(s + 1);
            for _ in 0..=s {
                ups.push(ConvUnit::deconv(ck, ck, rng));
            }
            skips.push(SkipChain { proj: ConvUnit::proj(d, ck, rng), ups });
        }
        let raw = ConvUnit::proj(1, c[2], rng);
        let fuse = vec![
            ConvUnit::proj(2 * c[0], c[0], rng),
            ConvUnit::proj(2 * c[1], c[1], rng),
            ConvUnit::proj(3 * c[2], c[2], rng),
        ];
        Ok(SegDecoderParams {
            proj,
            up,
            skips,
            raw,
            fuse,
            out_w: autograd::trunc_normal((c[2], classes), 0.02, rng),
            out_b: Array2::zeros((1, classes)),
            channels: c,
            classes,
        })
    }

    pub fn named(&self) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = Vec::new();
        self.proj.named("seg.proj", &mut out);
        for (i, u) in self.up.iter().enumerate() {
            u.named(&format!("seg.up{i}"), &mut out);
        }
        for (i, sk) in self.skips.iter().enumerate() {
            sk.proj.named(&format!("seg.skip{i}.proj"), &mut out);
            for (j, u) in sk.ups.iter().enumerate() {
                u.named(&format!("seg.skip{i}.up{j}"), &mut out);
            }
        }
        self.raw.named("seg.raw", &mut out);
        for (i, f) in self.fuse.iter().enumerate() {
            f.named(&format!("seg.fuse{i}"), &mut out);
        }
        out.push(("seg.out.w".into(), &self.out_w, true));
        out.push(("seg.out.b".into(), &self.out_b, false));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<F>, bool)> {
        let mut out = Vec::new();
        self.proj.named_mut("seg.proj", &mut out);
        for (i, u) in self.up.iter_mut().enumerate() {
            u.named_mut(&format!("seg.up{i}"), &mut out);
        }
        for (i, sk) in self.skips.iter_mut().enumerate() {
            sk.proj.named_mut(&format!("seg.skip{i}.proj"), &mut out);
            for (j, u) in sk.ups.iter_mut().enumerate() {
                u.named_mut(&format!("seg.skip{i}.up{j}"), &mut out);
            }
        }
        self.raw.named_mut("seg.raw", &mut out);
        for (i, f) in self.fuse.iter_mut().enumerate() {
            f.named_mut(&format!("seg.fuse{i}"), &mut out);
        }
        out.push(("seg.out.w".into(), &mut self.out_w, true));
        out.push(("seg.out.b".into(), &mut self.out_b, false));
        out
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundSegDecoder {
        BoundSegDecoder {
            proj: self.proj.bind(tape, trainable),
            up: self.up.iter().map(|u| u.bind(tape, trainable)).collect(),
            skips: self
                .skips
                .iter()
                .map(|s| BoundSkipChain {
                    proj: s.proj.bind(tape, trainable),
                    ups: s.ups.iter().map(|u| u.bind(tape, trainable)).collect(),
                })
                .collect(),
            raw: self.raw.bind(tape, trainable),
            fuse: self.fuse.iter().map(|f| f.bind(tape, trainable)).collect(),
            out_w: if trainable { tape.leaf(self.out_w.clone()) } else { tape.constant(self.out_w.clone()) },
            out_b: if trainable { tape.leaf(self.out_b.clone()) } else { tape.constant(self.out_b.clone()) },
            channels: self.channels,
            classes: self.classes,
        }
    }
}

struct BoundSkipChain {
    proj: BoundConvUnit,
    ups: Vec<BoundConvUnit>,
}

pub struct BoundSegDecoder {
    proj: BoundConvUnit,
    up: Vec<BoundConvUnit>,
    skips: Vec<BoundSkipChain>,
    raw: BoundConvUnit,
    fuse: Vec<BoundConvUnit>,
    out_w: Var,
    out_b: Var,
    channels: [usize; 3],
    classes: usize,
}

impl BoundSegDecoder {
    /// Tape handles in [`SegDecoderParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(self.proj.vars());
        for u in &self.up {
            out.extend(u.vars());
        }
        for s in &self.skips {
            out.extend(s.proj.vars());
            for u in &s.ups {
                out.extend(u.vars());
            }
        }
        out.extend(self.raw.vars());
        for f in &self.fuse {
            out.extend(f.vars());
        }
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}

// ── Forward pass ─────────────────────────────────────────────────────────

fn unit_1x1<F: Scalar>(tape: &mut Tape<F>, u: &BoundConvUnit, x: Var, geom: MapGeom, cout: usize) -> Var {
    let conv = tape.conv2d(x, u.w, u.b, geom, cout, 1);
    let out_geom = MapGeom::new(geom.images, cout, geom.height, geom.width);
    let normed = tape.instance_norm(conv, u.g, u.beta, out_geom, F::from_f64(IN_EPS));
    tape.gelu(normed)
}

fn unit_up<F: Scalar>(
    tape: &mut Tape<F>,
    u: &BoundConvUnit,
    x: Var,
    geom: MapGeom,
    cout: usize,
) -> (Var, MapGeom) {
    let conv = tape.conv_t2x2(x, u.w, u.b, geom, cout);
    let out_geom = MapGeom::new(geom.images, cout, geom.height * 2, geom.width * 2);
    let normed = tape.instance_norm(conv, u.g, u.beta, out_geom, F::from_f64(IN_EPS));
    (tape.gelu(normed), out_geom)
}

/// Per-pixel class logits for a batch: `(images·H·W, classes)`, pixels in
/// row-major order within each image.
pub fn seg_logit_rows<F: Scalar>(
    tape: &mut Tape<F>,
    encoder: &BoundBackbone,
    decoder: &BoundSegDecoder,
    images: &Array2<F>,
    taps: &[usize],
) -> Result<Var> {
    let n_images = images.nrows();
    let (gh, gw) = encoder.grid;
    let enc = encode(tape, encoder, images, true)?;
    if taps.len() != 4 {
        return Err(Error::Config(vec![format!("segmentation needs 4 encoder taps, got {}", taps.len())]));
    }
    let mut maps = Vec::with_capacity(4);
    for &t in taps {
        if t == 0 || t > enc.layers.len() {
            return Err(Error::Config(vec![format!(
                "tap {t} outside encoder depth {}",
                enc.layers.len()
            )]));
        }
        maps.push(tape.tokens_to_grid(enc.layers[t - 1], n_images, gh, gw));
    }
    let d = tape.value(maps[0]).ncols() / (gh * gw);
    let c = decoder.channels;
    let grid_geom = |ch: usize| MapGeom::new(n_images, ch, gh, gw);

    // Main path from the deepest tap.
    let mut y = unit_1x1(tape, &decoder.proj, maps[3], grid_geom(d), c[0]);
    let mut geom = grid_geom(c[0]);

    for s in 0..3 {
        let cout = c[s];
        let (main, up_geom) = unit_up(tape, &decoder.up[s], y, geom, cout);

        // Skip: taps[2], taps[1], taps[0] for stages 0, 1, 2.
        let chain = &decoder.skips[s];
        let mut skip = unit_1x1(tape, &chain.proj, maps[2 - s], grid_geom(d), cout);
        let mut skip_geom = grid_geom(cout);
        for u in &chain.ups {
            let (sv, sg) = unit_up(tape, u, skip, skip_geom, cout);
            skip = sv;
            skip_geom = sg;
        }
        debug_assert_eq!(skip_geom, up_geom);

        let mut cat = tape.concat_cols(main, skip);
        let mut cat_channels = 2 * cout;
        if s == 2 {
            // Full resolution: the raw image joins as a skip of its own.
            let raw_in = tape.constant(images.clone());
            let raw_geom = MapGeom::new(n_images, 1, up_geom.height, up_geom.width);
            let raw = unit_1x1(tape, &decoder.raw, raw_in, raw_geom, cout);
            cat = tape.concat_cols(cat, raw);
            cat_channels += cout;
        }
        let cat_geom = MapGeom::new(n_images, cat_channels, up_geom.height, up_geom.width);
        y = unit_1x1(tape, &decoder.fuse[s], cat, cat_geom, cout);
        geom = MapGeom::new(n_images, cout, up_geom.height, up_geom.width);
    }

    let logits = tape.conv2d(y, decoder.out_w, decoder.out_b, geom, decoder.classes, 1);
    Ok(tape.grid_to_rows(logits, decoder.classes))
}

/// Pixel cross-entropy plus soft-Dice (both weight 1). `labels` pairs with
/// the logit rows; the soft-Dice term smooths both numerator and
/// denominator so a class absent from prediction and truth scores 1.
pub fn seg_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logit_rows: Var,
    labels: &[usize],
    classes: usize,
) -> Var {
    let rows = tape.value(logit_rows).nrows();
    assert_eq!(rows, labels.len(), "one label per pixel row");
    let ce = tape.ce_labels(
        logit_rows,
        labels.to_vec(),
        F::from_f64(1.0 / rows as f64),
        F::from_f64(EPS_LOG),
    );

    let probs = tape.softmax_rows(logit_rows);
    let mut dice_sum: Option<Var> = None;
    for cls in 0..classes {
        let mut onehot = Array2::zeros((rows, 1));
        let mut truth_count = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y == cls {
                onehot[(r, 0)] = F::one();
                truth_count += 1.0;
            }
        }
        let pc = tape.select_col(probs, cls);
        let yc = tape.constant(onehot);
        let inter = tape.mul(pc, yc);
        let inter_sum = tape.sum_all(inter);
        let num = tape.scale(inter_sum, F::from_f64(2.0));
        let num = tape.add_const(num, F::from_f64(DICE_EPS));
        let psum = tape.sum_all(pc);
        let den = tape.add_const(psum, F::from_f64(truth_count + DICE_EPS));
        let frac = tape.div(num, den);
        dice_sum = Some(match dice_sum {
            None => frac,
            Some(acc) => tape.add(acc, frac),
        });
    }
    let mean = tape.scale(dice_sum.expect("at least one class"), F::from_f64(1.0 / classes as f64));
    let neg = tape.scale(mean, F::from_f64(-1.0));
    let dice_loss = tape.add_const(neg, F::one());
    tape.add(ce, dice_loss)
}

// ── Label maps ───────────────────────────────────────────────────────────

/// Load the 8-bit label map paired with an image, resized (nearest
/// neighbor) to the dataset's working size. Values below the class count
/// are labels as-is; the common binary convention of 255 for foreground
/// maps to class 1 in two-class problems.
pub fn load_label_map(dataset: &Dataset, index: usize, classes: usize) -> Result<Array2<u8>> {
    let path = dataset.mask_path(index);
    let img = image::open(&path)
        .map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?
        .into_luma8();
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let (h, w) = (dataset.height, dataset.width);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let src_r = if h == sh { r } else { (r * sh + sh / 2) / h }.min(sh - 1);
            let src_c = if w == sw { c } else { (c * sw + sw / 2) / w }.min(sw - 1);
            let v = img.get_pixel(src_c as u32, src_r as u32).0[0];
            let label = if (v as usize) < classes {
                v
            } else if v == 255 && classes == 2 {
                1
            } else {
                return Err(Error::Image {
                    path: path.clone(),
                    message: format!("mask value {v} does not fit {classes} classes"),
                });
            };
            out[(r, c)] = label;
        }
    }
    Ok(out)
}

/// Flatten label maps into one row-major pixel vector per batch, matching
/// the logit row order.
fn label_rows(maps: &[Array2<u8>]) -> Vec<usize> {
    let mut out = Vec::with_capacity(maps.iter().map(|m| m.len()).sum());
    for m in maps {
        out.extend(m.iter().map(|&v| v as usize));
    }
    out
}

/// Argmax each pixel row back into per-image label maps.
pub fn rows_to_label_maps<F: Scalar>(
    rows: &Array2<F>,
    n_images: usize,
    h: usize,
    w: usize,
) -> Vec<Array2<u8>> {
    let px = h * w;
    assert_eq!(rows.nrows(), n_images * px, "pixel rows vs geometry");
    let mut out = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut map = Array2::zeros((h, w));
        for p in 0..px {
            let row = rows.row(i * px + p);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            map[(p / w, p % w)] = best as u8;
        }
        out.push(map);
    }
    out
}

// ── Reports ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegEpochEval {
    pub epoch: u64,
    pub train_loss: f64,
    /// Mean over foreground classes of the image-mean Dice on validation.
    pub mean_dice: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegFinalEval {
    pub split: String,
    /// Image-mean Dice per class.
    pub dice: Vec<Option<f64>>,
    /// Image-mean 95th-percentile boundary distance per class, absent when
    /// undefined on every image (a class missing from prediction or truth).
    pub hd95: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegReport {
    pub task: String,
    pub config_fingerprint: String,
    pub classes: usize,
    pub per_epoch: Vec<SegEpochEval>,
    #[serde(rename = "final")]
    pub final_eval: SegFinalEval,
}

impl SegReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

pub fn write_seg_report(report: &SegReport, json_path: &Path) -> Result<()> {
    if let Some(parent) = json_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))
}

// ── Training and evaluation ──────────────────────────────────────────────

fn predict_maps(
    backbone: &Backbone<f32>,
    decoder: &SegDecoderParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
    taps: &[usize],
    batch_size: usize,
) -> Result<Vec<Array2<u8>>> {
    let (h, w) = (dataset.height, dataset.width);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk);
        let mut tape = Tape::<f32>::new();
        let enc = backbone.bind(&mut tape, false);
        let dec = decoder.bind(&mut tape, false);
        let rows = seg_logit_rows(&mut tape, &enc, &dec, &batch.images, taps)?;
        out.extend(rows_to_label_maps(tape.value(rows), chunk.len(), h, w));
    }
    Ok(out)
}

struct SplitScores {
    dice: Vec<Option<f64>>,
    hd95: Vec<Option<f64>>,
}

fn score_split(
    predictions: &[Array2<u8>],
    truths: &[Array2<u8>],
    classes: usize,
) -> Result<SplitScores> {
    let mut dice = Vec::with_capacity(classes);
    let mut hd = Vec::with_capacity(classes);
    for cls in 0..classes as u8 {
        let mut dice_vals = Vec::new();
        let mut hd_vals = Vec::new();
        for (p, t) in predictions.iter().zip(truths) {
            dice_vals.push(metrics::dice(p, t, cls)?);
            if let Ok(v) = metrics::hd95(p, t, cls) {
                hd_vals.push(v);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) }
        };
        dice.push(mean(&dice_vals));
        hd.push(mean(&hd_vals));
    }
    Ok(SplitScores { dice, hd95: hd })
}

fn mean_foreground_dice(scores: &SplitScores) -> Option<f64> {
    let fg: Vec<f64> = scores.dice.iter().skip(1).filter_map(|&d| d).collect();
    if fg.is_empty() {
        None
    } else {
        Some(fg.iter().sum::<f64>() / fg.len() as f64)
    }
}

/// Train the decoder (and fine-tune the encoder at its own learning rate)
/// on the train split's label maps; per-epoch validation Dice, final test
/// Dice and boundary distances.
pub fn train_segmenter(
    backbone: &Backbone<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<(Backbone<f32>, SegDecoderParams<f32>, SegReport)> {
    let classes = cfg.segment.classes;
    let taps = cfg.seg_taps();
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    let test_idx = dataset.split_indices(Split::Test);
    for (name, idx) in [("train", &train_idx), ("val", &val_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
    }

    let mut tuned = backbone.clone();
    let mut decoder =
        SegDecoderParams::<f32>::init(cfg, &mut stream(cfg.seed, "segment.decoder", &[]))?;
    let mut opt = AdamW::<f32>::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS, cfg.optim.weight_decay);

    let load_truths = |indices: &[usize]| -> Result<Vec<Array2<u8>>> {
        indices.iter().map(|&i| load_label_map(dataset, i, classes)).collect()
    };
    let val_truths = load_truths(&val_idx)?;
    let test_truths = load_truths(&test_idx)?;

    let batch_size = cfg.data.batch_size.max(1);
    let epochs = cfg.segment.epochs;
    let batches_per_epoch = train_idx.len().div_ceil(batch_size);
    let total_steps = (epochs * batches_per_epoch).max(1);

    let mut step = 0usize;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs as u64 {
        let order = {
            use rand::Rng;
            let mut order: Vec<usize> = (0..train_idx.len()).collect();
            let mut rng = stream(cfg.seed, "segment.shuffle", &[epoch]);
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            order
        };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let indices: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let batch = dataset.batch(&indices);
            let truths = load_truths(&indices)?;
            let labels = label_rows(&truths);

            let mut tape = Tape::<f32>::new();
            let enc = tuned.bind(&mut tape, true);
            let dec = decoder.bind(&mut tape, true);
            let rows = seg_logit_rows(&mut tape, &enc, &dec, &batch.images, &taps)?;
            let loss = seg_loss(&mut tape, rows, &labels, classes);
            let loss_value = tape.scalar(loss) as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    component: "segmentation loss".into(),
                    step: step as u64,
                    value: loss_value,
                });
            }
            loss_sum += loss_value * indices.len() as f64;
            tape.backward(loss);

            let mut vars = enc.vars();
            vars.extend(dec.vars());
            let grads: Vec<Option<&Array2<f32>>> = vars.iter().map(|&v| tape.grad(v)).collect();

            let lr_bb = warmup_cosine(step, total_steps, 0, cfg.segment.lr_backbone);
            let lr_head = warmup_cosine(step, total_steps, 0, cfg.segment.lr_head);
            let mut enc_reg = tuned.named_mut("backbone");
            let mut dec_reg = decoder.named_mut();
            let mut lrs = vec![lr_bb; enc_reg.len()];
            lrs.extend(vec![lr_head; dec_reg.len()]);
            let mut decay: Vec<bool> = enc_reg.iter().map(|(_, _, d)| *d).collect();
            decay.extend(dec_reg.iter().map(|(_, _, d)| *d));
            let mut params: Vec<&mut Array2<f32>> =
                enc_reg.iter_mut().map(|(_, t, _)| &mut **t).collect();
            params.extend(dec_reg.iter_mut().map(|(_, t, _)| &mut **t));
            opt.step(&mut params, &grads, &lrs, &decay);
            step += 1;
        }

        let predictions = predict_maps(&tuned, &decoder, dataset, &val_idx, &taps, batch_size)?;
        let scores = score_split(&predictions, &val_truths, classes)?;
        curve.push(SegEpochEval {
            epoch: epoch + 1,
            train_loss: loss_sum / train_idx.len() as f64,
            mean_dice: mean_foreground_dice(&scores),
        });
    }

    let predictions = predict_maps(&tuned, &decoder, dataset, &test_idx, &taps, batch_size)?;
    let scores = score_split(&predictions, &test_truths, classes)?;
    let report = SegReport {
        task: "segmentation".into(),
        config_fingerprint: cfg.fingerprint(),
        classes,
        per_epoch: curve,
        final_eval: SegFinalEval { split: "test".into(), dice: scores.dice, hd95: scores.hd95 },
    };
    Ok((tuned, decoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn seg_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::from_json(
            r#"{
                "data": {"image_size": [16, 16], "batch_size": 4},
                "model": {"patch_size": 8, "embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
                "head": {"K": 8, "bottleneck": 8, "hidden": 16},
                "segment": {"epochs": 1, "channels": [8, 8, 4], "classes": 2}
            }"#,
        )
        .unwrap();
        cfg.seed = seed;
        cfg
    }

    fn toy_backbone(cfg: &RunConfig, seed: u64) -> Backbone<f32> {
        Backbone::from_config(cfg, &mut stream(seed, "seg.test.backbone", &[]))
    }

    #[test]
    fn logits_cover_every_pixel_with_class_columns() {
        let cfg = seg_cfg(1);
        let backbone = toy_backbone(&cfg, 1);
        let decoder =
            SegDecoderParams::<f32>::init(&cfg, &mut stream(1, "seg.test.decoder", &[])).unwrap();
        let images = Array2::from_shape_fn((3, 256), |(i, p)| ((i * 7 + p) % 13) as f32 / 13.0);

        let mut tape = Tape::<f32>::new();
        let enc = backbone.bind(&mut tape, false);
        let dec = decoder.bind(&mut tape, false);
        let rows = seg_logit_rows(&mut tape, &enc, &dec, &images, &cfg.seg_taps()).unwrap();
        assert_eq!(tape.value(rows).dim(), (3 * 256, 2));
        let maps = rows_to_label_maps(tape.value(rows), 3, 16, 16);
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].dim(), (16, 16));
    }

    #[test]
    fn batch_permutation_permutes_predictions() {
        let cfg = seg_cfg(2);
        let backbone = toy_backbone(&cfg, 2);
        let decoder =
            SegDecoderParams::<f32>::init(&cfg, &mut stream(2, "seg.test.decoder", &[])).unwrap();
        let images = Array2::from_shape_fn((2, 256), |(i, p)| ((i * 11 + p * 3) % 17) as f32 / 17.0);
        let swapped = {
            let mut s = images.clone();
            let top = images.row(1).to_owned();
            let bottom = images.row(0).to_owned();
            s.row_mut(0).assign(&top);
            s.row_mut(1).assign(&bottom);
            s
        };

        let run = |imgs: &Array2<f32>| {
            let mut tape = Tape::<f32>::new();
            let enc = backbone.bind(&mut tape, false);
            let dec = decoder.bind(&mut tape, false);
            let rows = seg_logit_rows(&mut tape, &enc, &dec, imgs, &cfg.seg_taps()).unwrap();
            tape.value(rows).clone()
        };
        let a = run(&images);
        let b = run(&swapped);
        let px = 256;
        for p in 0..px {
            for c in 0..2 {
                let d0 = (a[(p, c)] - b[(px + p, c)]).abs();
                let d1 = (a[(px + p, c)] - b[(p, c)]).abs();
                assert!(d0 < 1e-4 && d1 < 1e-4, "pixel {p} class {c}: {d0} {d1}");
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = seg_cfg(3);
        let backbone64: Backbone<f64> =
            Backbone::init(cfg.grid(), 8, 16, 2, 2, 2, &mut stream(3, "seg.fd.backbone", &[]));
        let decoder64 =
            SegDecoderParams::<f64>::init(&cfg, &mut stream(3, "seg.fd.decoder", &[])).unwrap();
        let images = Array2::from_shape_fn((1, 256), |(_, p)| ((p * 5) % 23) as f64 / 23.0);
        let labels: Vec<usize> = (0..256).map(|p| usize::from(p % 3 == 0)).collect();
        let taps = cfg.seg_taps();

        let eval = |dec: &SegDecoderParams<f64>, bb: &Backbone<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let enc = bb.bind(&mut tape, false);
            let bound = dec.bind(&mut tape, false);
            let rows = seg_logit_rows(&mut tape, &enc, &bound, &images, &taps).unwrap();
            let loss = seg_loss(&mut tape, rows, &labels, 2);
            tape.scalar(loss)
        };

        let mut tape = Tape::<f64>::new();
        let enc = backbone64.bind(&mut tape, true);
        let bound = decoder64.bind(&mut tape, true);
        let rows = seg_logit_rows(&mut tape, &enc, &bound, &images, &taps).unwrap();
        let loss = seg_loss(&mut tape, rows, &labels, 2);
        tape.backward(loss);

        // Spot-check one coordinate in several parameter groups across the
        // whole decoder and the encoder input projection.
        let dec_vars = bound.vars();
        let dec_named = decoder64.named();
        for &pick in &[0usize, 4, 20, dec_named.len() - 2] {
            let ad = tape
                .grad(dec_vars[pick])
                .map(|g| g[(0, 0)])
                .unwrap_or(0.0);
            let mut plus = decoder64.clone();
            let mut minus = decoder64.clone();
            let h = 1e-5;
            plus.named_mut()[pick].1[(0, 0)] += h;
            minus.named_mut()[pick].1[(0, 0)] -= h;
            let fd = (eval(&plus, &backbone64) - eval(&minus, &backbone64)) / (2.0 * h);
            let err = (ad - fd).abs();
            assert!(
                err <= 1e-6 + 1e-4 * ad.abs().max(fd.abs()),
                "decoder tensor {} ({}): ad={ad:.10e} fd={fd:.10e}",
                pick,
                dec_named[pick].0
            );
        }
        let enc_vars = enc.vars();
        let ad = tape.grad(enc_vars[0]).map(|g| g[(0, 0)]).unwrap_or(0.0);
        let mut plus = backbone64.clone();
        let mut minus = backbone64.clone();
        plus.patch_w[(0, 0)] += 1e-5;
        minus.patch_w[(0, 0)] -= 1e-5;
        let fd = (eval(&decoder64, &plus) - eval(&decoder64, &minus)) / 2e-5;
        assert!((ad - fd).abs() <= 1e-6 + 1e-4 * ad.abs().max(fd.abs()), "encoder: {ad} vs {fd}");
    }

    #[test]
    fn training_runs_and_reports_dice() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 2, 7, (16, 16), 5).unwrap();
        let dataset = Dataset::open(&manifest, (16, 16)).unwrap();
        let cfg = seg_cfg(5);
        let backbone = toy_backbone(&cfg, 5);

        let (tuned, _, report) = train_segmenter(&backbone, &dataset, &cfg).unwrap();
        assert_ne!(tuned, backbone, "training must move the encoder");
        assert_eq!(report.per_epoch.len(), 1);
        assert!(report.per_epoch[0].train_loss.is_finite());
        assert_eq!(report.final_eval.dice.len(), 2);
        for d in report.final_eval.dice.iter().flatten() {
            assert!((0.0..=1.0).contains(d), "dice {d}");
        }
        let json = report.to_json();
        assert!(json.contains("\"final\""));
    }

    #[test]
    fn label_maps_read_binary_masks_and_reject_strays() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 2, 7, (16, 16), 7).unwrap();
        let dataset = Dataset::open(&manifest, (16, 16)).unwrap();

        let map = load_label_map(&dataset, 0, 2).unwrap();
        assert_eq!(map.dim(), (16, 16));
        let distinct: std::collections::BTreeSet<u8> = map.iter().copied().collect();
        assert!(distinct.iter().all(|&v| v <= 1), "{distinct:?}");
        assert!(distinct.contains(&1), "synthetic masks have foreground");

        // Three classes cannot absorb the 255 convention.
        let err = load_label_map(&dataset, 0, 3).unwrap_err();
        assert_eq!(err.code(), "data/image");
    }

    #[test]
    fn decoder_rejects_incompatible_geometry() {
        let mut cfg = seg_cfg(9);
        cfg.model.patch_size = 4;
        cfg.data.image_size = [16, 16];
        let err =
            SegDecoderParams::<f32>::init(&cfg, &mut stream(9, "seg.test.decoder", &[])).unwrap_err();
        assert_eq!(err.code(), "config/invalid");
        assert!(err.to_string().contains("patch size"), "{err}");
    }
}
