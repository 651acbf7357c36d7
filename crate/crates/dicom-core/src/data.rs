//! Image data plumbing: manifest-backed datasets, a synthetic generator,
//! augmentation into paired views, and deterministic (optionally prefetched)
//! batch production.
//!
//! All randomness is drawn from [`crate::rng::stream`] keyed by purpose and
//! (epoch, batch) coordinates, so batch content is a pure function of
//! (manifest, config, seed) — independent of worker count and of where a
//! resumed run picks up.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{AugConfig, RunConfig};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, sample_group_mask, MaskPair};
use crate::rng::stream;

// ── Core types ───────────────────────────────────────────────────────────

/// A batch of grayscale images in [0,1], row-flattened to (N, H·W).
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub images: Array2<f32>,
    pub height: usize,
    pub width: usize,
    /// Class per image; −1 = unlabeled.
    pub labels: Vec<i64>,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two independently augmented versions of the same batch; ids and order
/// are preserved.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view1: ImageBatch,
    pub view2: ImageBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?} (expected train/val/test)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: i64,
    pub split: Split,
}

/// A manifest-backed dataset with every image decoded, resized, and cached
/// in memory (desk scale keeps this cheap).
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    cache: Array2<f32>,
}

impl Dataset {
    /// Load a `id,path,label,split` CSV manifest and all images it
    /// references, resizing to `target` (height, width). A `classes.txt`
    /// next to the manifest supplies class names; otherwise names are
    /// generated from the labels present.
    pub fn open(manifest: &Path, target: (usize, usize)) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_path(manifest)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
        {
            let headers = reader
                .headers()
                .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
            let expect = ["id", "path", "label", "split"];
            let got: Vec<&str> = headers.iter().collect();
            if got != expect {
                return Err(Error::Data(format!(
                    "{}: manifest header must be id,path,label,split, got {}",
                    manifest.display(),
                    got.join(",")
                )));
            }
        }

        let mut entries = Vec::new();
        let mut split_by_id: HashMap<String, Split> = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
            let id = record.get(0).unwrap_or("").to_string();
            let rel = record.get(1).unwrap_or("");
            let label_text = record.get(2).unwrap_or("");
            let label = if label_text.is_empty() {
                -1
            } else {
                label_text.parse::<i64>().map_err(|_| {
                    Error::Data(format!("entry {id}: label {label_text:?} is not an integer"))
                })?
            };
            let split = Split::parse(record.get(3).unwrap_or(""))?;
            if let Some(prev) = split_by_id.insert(id.clone(), split) {
                if prev != split {
                    return Err(Error::Data(format!("id {id} appears in two splits")));
                }
                return Err(Error::Data(format!("duplicate manifest id {id}")));
            }
            entries.push(ManifestEntry { id, path: root.join(rel), label, split });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: manifest lists no images", manifest.display())));
        }

        let classes = match std::fs::read_to_string(root.join("classes.txt")) {
            Ok(text) => text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
            Err(_) => {
                let max_label = entries.iter().map(|e| e.label).max().unwrap_or(-1);
                (0..=max_label.max(-1)).filter(|&l| l >= 0).map(|l| format!("class_{l}")).collect()
            }
        };
        let classes: Vec<String> = classes;
        for e in &entries {
            if e.label >= 0 && e.label as usize >= classes.len() {
                return Err(Error::Data(format!(
                    "entry {}: label {} outside the class table of size {}",
                    e.id,
                    e.label,
                    classes.len()
                )));
            }
        }

        let (h, w) = target;
        let mut cache = Array2::zeros((entries.len(), h * w));
        for (i, e) in entries.iter().enumerate() {
            let img = load_grayscale(&e.path, h, w)?;
            cache.row_mut(i).assign(&ndarray::ArrayView1::from(&img));
        }

        Ok(Dataset { root, entries, classes, height: h, width: w, cache })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Indices of one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Assemble a batch from dataset indices (panics on empty input — a
    /// batch always holds at least one image).
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        assert!(!indices.is_empty(), "batch of zero images");
        let mut images = Array2::zeros((indices.len(), self.height * self.width));
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.row_mut(row).assign(&self.cache.row(i));
            labels.push(self.entries[i].label);
            ids.push(self.entries[i].id.clone());
        }
        ImageBatch { images, height: self.height, width: self.width, labels, ids }
    }

    /// Expected path of the segmentation mask for an entry: `masks/{id}.png`
    /// under the dataset root.
    pub fn mask_path(&self, index: usize) -> PathBuf {
        self.root.join("masks").join(format!("{}.png", self.entries[index].id))
    }
}

/// Decode an 8-bit grayscale PNG/PGM and bilinearly resize to (h, w),
/// rescaled to [0,1].
fn load_grayscale(path: &Path, h: usize, w: usize) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .into_luma8();
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    if sw == 0 || sh == 0 {
        return Err(Error::Image { path: path.to_path_buf(), message: "empty image".into() });
    }
    let src: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(resize_bilinear(&src, sh, sw, h, w))
}

/// Bilinear resize with the half-pixel-center convention and border clamp.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw);
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let mut out = vec![0.0; dh * dw];
    let sy = sh as f32 / dh as f32;
    let sx = sw as f32 / dw as f32;
    for r in 0..dh {
        let y = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        for c in 0..dw {
            let x = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            out[r * dw + c] = sample_bilinear(src, sh, sw, y, x);
        }
    }
    out
}

/// Bilinear sample at (y, x) with border clamp, in a lerp form that keeps
/// constant fields exactly constant.
fn sample_bilinear(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
    let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
    lerp(top, bot, fy)
}

// ── Augmentation ─────────────────────────────────────────────────────────

/// Recorded parameters of one augmentation draw, sufficient to re-apply it
/// exactly. Application order: crop → rotate → intensity jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    /// Source-pixel crop rectangle (y0, x0, height, width); `None` = full
    /// frame.
    pub crop: Option<(f32, f32, f32, f32)>,
    /// Rotation about the image center, radians; 0 = none.
    pub angle: f32,
    /// Contrast factor applied as (v − 0.5)·c + 0.5; 1 = none.
    pub contrast: f32,
    /// Additive brightness shift; 0 = none.
    pub brightness: f32,
}

impl AugParams {
    pub fn identity() -> Self {
        AugParams { crop: None, angle: 0.0, contrast: 1.0, brightness: 0.0 }
    }
}

/// Draw augmentation parameters for one image under a policy.
fn sample_aug(policy: &AugConfig, h: usize, w: usize, rng: &mut ChaCha8Rng) -> AugParams {
    let mut p = AugParams::identity();
    if policy.crop {
        let area: f64 = rng.random_range(policy.crop_scale_min..=1.0);
        let side = area.sqrt() as f32;
        let (ch, cw) = (side * h as f32, side * w as f32);
        let y0 = rng.random_range(0.0..=(h as f32 - ch).max(0.0) as f64) as f32;
        let x0 = rng.random_range(0.0..=(w as f32 - cw).max(0.0) as f64) as f32;
        p.crop = Some((y0, x0, ch, cw));
    }
    if policy.rotate && policy.rotate_degrees > 0.0 {
        let deg = rng.random_range(-policy.rotate_degrees..=policy.rotate_degrees);
        p.angle = (deg.to_radians()) as f32;
    }
    if policy.jitter {
        if policy.contrast > 0.0 {
            p.contrast = rng.random_range(1.0 - policy.contrast..=1.0 + policy.contrast) as f32;
        }
        if policy.brightness > 0.0 {
            p.brightness = rng.random_range(-policy.brightness..=policy.brightness) as f32;
        }
    }
    p
}

/// Apply recorded augmentation parameters to one row-flattened image.
/// Geometry ops resample bilinearly with border clamp; the result is
/// clamped back into [0,1].
pub fn apply_aug(src: &[f32], h: usize, w: usize, p: &AugParams) -> Vec<f32> {
    let mut cur: Vec<f32> = match p.crop {
        None => src.to_vec(),
        Some((y0, x0, ch, cw)) => {
            let mut out = vec![0.0; h * w];
            let sy = ch / h as f32;
            let sx = cw / w as f32;
            for r in 0..h {
                let y = y0 + (r as f32 + 0.5) * sy - 0.5;
                for c in 0..w {
                    let x = x0 + (c as f32 + 0.5) * sx - 0.5;
                    out[r * w + c] = sample_bilinear(src, h, w, y, x);
                }
            }
            out
        }
    };

    if p.angle != 0.0 {
        let (sin, cos) = (libm::sinf(p.angle), libm::cosf(p.angle));
        let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
        let rotated: Vec<f32> = (0..h * w)
            .map(|idx| {
                let (r, c) = ((idx / w) as f32, (idx % w) as f32);
                // Inverse map: output pixel pulls from the source rotated
                // the other way.
                let (dy, dx) = (r - cy, c - cx);
                let y = cy + cos * dy - sin * dx;
                let x = cx + sin * dy + cos * dx;
                sample_bilinear(&cur, h, w, y, x)
            })
            .collect();
        cur = rotated;
    }

    if p.contrast != 1.0 || p.brightness != 0.0 {
        for v in cur.iter_mut() {
            *v = (*v - 0.5) * p.contrast + 0.5 + p.brightness;
        }
    }
    for v in cur.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    cur
}

fn augment_batch(batch: &ImageBatch, policy: &AugConfig, rng: &mut ChaCha8Rng) -> (ImageBatch, Vec<AugParams>) {
    let (h, w) = (batch.height, batch.width);
    let mut images = Array2::zeros((batch.len(), h * w));
    let mut params = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let p = sample_aug(policy, h, w, rng);
        let row: Vec<f32> = batch.images.row(i).to_vec();
        let out = apply_aug(&row, h, w, &p);
        images.row_mut(i).assign(&ndarray::ArrayView1::from(&out[..]));
        params.push(p);
    }
    let out = ImageBatch { images, height: h, width: w, labels: batch.labels.clone(), ids: batch.ids.clone() };
    (out, params)
}

/// Produce two independently augmented views of a batch, along with the
/// recorded parameters of each draw (view1 first).
pub fn two_views(
    batch: &ImageBatch,
    policy: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> (ViewPair, [Vec<AugParams>; 2]) {
    assert!(!batch.is_empty(), "two_views on an empty batch");
    let (view1, p1) = augment_batch(batch, policy, rng);
    let (view2, p2) = augment_batch(batch, policy, rng);
    (ViewPair { view1, view2 }, [p1, p2])
}

// ── Synthetic dataset generator ──────────────────────────────────────────

struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    rot: f32,
}

impl Ellipse {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (s, c) = (libm::sinf(self.rot), libm::cosf(self.rot));
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

/// Render the synthetic corpus: noisy background, two filled ellipses
/// ("lungs"), and a class-dependent artifact (class 0: none; class 1: a
/// bright blob inside an ellipse; class ≥ 2: a per-class sinusoidal texture
/// inside the ellipses). Writes images, matching ellipse masks, a manifest,
/// and a class table; everything is a pure function of the seed.
pub fn generate_synthetic(
    out_dir: &Path,
    classes: usize,
    per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<PathBuf> {
    if classes < 2 {
        return Err(Error::Data(format!("synthetic generator needs >= 2 classes, got {classes}")));
    }
    if per_class < 7 {
        return Err(Error::Data(format!(
            "n_per_class must be >= 7 so every split is non-empty, got {per_class}"
        )));
    }
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::Data(format!("synthetic images must be at least 16x16, got {h}x{w}")));
    }

    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    // Split sizes per class: 70% train, remainder split val/test with the
    // odd leftover alternating by class so totals stay balanced.
    let n_train = per_class * 7 / 10;
    let rem = per_class - n_train;

    let mut manifest = String::from("id,path,label,split\n");
    for cls in 0..classes {
        let n_val = rem / 2 + if rem % 2 == 1 && cls % 2 == 1 { 1 } else { 0 };
        for idx in 0..per_class {
            let mut rng = stream(seed, "synth", &[cls as u64, idx as u64]);
            let id = format!("c{cls}_{idx:04}");
            let (pixels, mask) = render_synthetic_image(h, w, cls, &mut rng);

            let img: image::GrayImage =
                image::ImageBuffer::from_vec(w as u32, h as u32, pixels).expect("buffer size");
            let img_path = img_dir.join(format!("{id}.png"));
            img.save(&img_path)
                .map_err(|e| Error::Image { path: img_path.clone(), message: e.to_string() })?;

            let mask_img: image::GrayImage =
                image::ImageBuffer::from_vec(w as u32, h as u32, mask).expect("buffer size");
            let mask_path = mask_dir.join(format!("{id}.png"));
            mask_img
                .save(&mask_path)
                .map_err(|e| Error::Image { path: mask_path.clone(), message: e.to_string() })?;

            let split = if idx < n_train {
                "train"
            } else if idx < n_train + n_val {
                "val"
            } else {
                "test"
            };
            manifest.push_str(&format!("{id},images/{id}.png,{cls},{split}\n"));
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let classes_text: String = (0..classes).map(|c| format!("class_{c}\n")).collect();
    let classes_path = out_dir.join("classes.txt");
    std::fs::write(&classes_path, classes_text).map_err(|e| Error::io(&classes_path, e))?;
    Ok(manifest_path)
}

fn render_synthetic_image(h: usize, w: usize, cls: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let (hf, wf) = (h as f32, w as f32);
    let jit = |rng: &mut ChaCha8Rng, scale: f32| (rng.random_range(-1.0..1.0) as f32) * scale;

    let ellipses = [
        Ellipse {
            cy: hf * (0.52 + jit(rng, 0.03)),
            cx: wf * (0.32 + jit(rng, 0.03)),
            a: wf * 0.13 * (1.0 + jit(rng, 0.12)),
            b: hf * 0.26 * (1.0 + jit(rng, 0.12)),
            rot: jit(rng, 0.10),
        },
        Ellipse {
            cy: hf * (0.52 + jit(rng, 0.03)),
            cx: wf * (0.68 + jit(rng, 0.03)),
            a: wf * 0.13 * (1.0 + jit(rng, 0.12)),
            b: hf * 0.26 * (1.0 + jit(rng, 0.12)),
            rot: jit(rng, 0.10),
        },
    ];

    // Class-1 blob: a soft bright disk placed inside one of the ellipses.
    let blob = if cls == 1 {
        let e = &ellipses[rng.random_range(0..2usize)];
        let radius = wf.min(hf) * (0.05 + rng.random_range(0.0..0.03) as f32);
        // Rejection-sample a center inside the ellipse, margin-shrunk so the
        // blob stays mostly interior.
        let mut cy = e.cy;
        let mut cx = e.cx;
        for _ in 0..64 {
            let y = e.cy + jit(rng, e.b * 0.6);
            let x = e.cx + jit(rng, e.a * 0.6);
            if e.contains(y, x) {
                cy = y;
                cx = x;
                break;
            }
        }
        Some((cy, cx, radius))
    } else {
        None
    };

    // Class ≥ 2 texture: a fixed grating per class.
    let texture = if cls >= 2 {
        let freq = 4.0 + 2.0 * (cls as f32 - 1.0);
        let theta = 0.7 * cls as f32;
        Some((freq, libm::cosf(theta), libm::sinf(theta)))
    } else {
        None
    };

    let mut noise = autograd::NormalSampler::new();
    let mut pixels = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f32, c as f32);
            let inside = ellipses.iter().any(|e| e.contains(y, x));
            let mut v: f32 = if inside {
                0.24 + noise.sample(rng) as f32 * 0.05
            } else {
                0.46 + noise.sample(rng) as f32 * 0.06
            };
            if inside {
                if let Some((freq, ct, st)) = texture {
                    let phase = 2.0 * std::f32::consts::PI * freq * (ct * x + st * y) / wf;
                    v += 0.07 * libm::sinf(phase);
                }
            }
            if let Some((cy, cx, radius)) = blob {
                let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                let falloff = 1.0 - d2 / (radius * radius);
                if falloff > 0.0 {
                    v += 0.30 * falloff;
                }
            }
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            mask.push(if inside { 255 } else { 0 });
        }
    }
    (pixels, mask)
}

// ── Batch planning and prefetch ──────────────────────────────────────────

/// Shuffled, full-size batches for one epoch (a trailing partial batch is
/// dropped so every step sees the configured batch size).
pub fn epoch_batches(train_indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = train_indices.to_vec();
    let mut rng = stream(seed, "shuffle", &[epoch]);
    // Fisher–Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// One fully prepared pre-training batch: clean views for the teacher and
/// the matching masked views for the student.
pub struct TrainItem {
    pub batch_in_epoch: usize,
    pub views: ViewPair,
    pub masks: [MaskPair; 2],
}

/// Prepare the item for batch `b` of `epoch` — augmentation and mask draws
/// come from per-(epoch, batch) streams, so the result does not depend on
/// which worker computes it.
pub fn make_train_item(
    dataset: &Dataset,
    cfg: &RunConfig,
    epoch: u64,
    b: usize,
    indices: &[usize],
) -> Result<TrainItem> {
    let clean = dataset.batch(indices);
    let mut aug_rng = stream(cfg.seed, "augment", &[epoch, b as u64]);
    let (views, _) = two_views(&clean, &cfg.augment, &mut aug_rng);

    let (gh, gw) = cfg.grid();
    let n = gh * gw;
    let mut mask_rng = stream(cfg.seed, "mask", &[epoch, b as u64]);
    let mut masks = Vec::with_capacity(2);
    for view in [&views.view1, &views.view2] {
        let mut tmask = Array2::zeros((view.len(), n));
        for i in 0..view.len() {
            let m = sample_group_mask((gh, gw), cfg.mask.ratio, cfg.mask.mean_block_side, &mut mask_rng)?;
            for (t, &flag) in m.iter().enumerate() {
                tmask[(i, t)] = flag as f32;
            }
        }
        masks.push(apply_mask(view, &tmask, cfg.model.patch_size)?);
    }
    let [m1, m2]: [MaskPair; 2] = masks.try_into().ok().expect("two views");
    Ok(TrainItem { batch_in_epoch: b, views, masks: [m1, m2] })
}

/// Iterator over one epoch's training items, optionally computed ahead by a
/// pool of prefetch workers. Items arrive in batch order regardless of the
/// worker count.
pub struct TrainEpoch {
    rx: Option<std::sync::mpsc::Receiver<(usize, Result<TrainItem>)>>,
    pending: HashMap<usize, Result<TrainItem>>,
    next: usize,
    total: usize,
    // Synchronous fallback when no workers are configured.
    sync: Option<(Arc<Dataset>, RunConfig, u64, Vec<Vec<usize>>)>,
}

/// Number of prefetch workers from `DICOM_NUM_WORKERS` (0 = synchronous).
pub fn workers_from_env() -> usize {
    std::env::var("DICOM_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

pub fn train_epoch(dataset: Arc<Dataset>, cfg: &RunConfig, epoch: u64, workers: usize) -> TrainEpoch {
    let plan = epoch_batches(&dataset.split_indices(Split::Train), cfg.data.batch_size, cfg.seed, epoch);
    let total = plan.len();
    if workers == 0 || total == 0 {
        return TrainEpoch {
            rx: None,
            pending: HashMap::new(),
            next: 0,
            total,
            sync: Some((dataset, cfg.clone(), epoch, plan)),
        };
    }

    let (tx, rx) = std::sync::mpsc::sync_channel(workers * 2);
    for worker in 0..workers.min(total) {
        let tx = tx.clone();
        let dataset = Arc::clone(&dataset);
        let cfg = cfg.clone();
        let plan = plan.clone();
        std::thread::spawn(move || {
            for b in (worker..plan.len()).step_by(workers) {
                let item = make_train_item(&dataset, &cfg, epoch, b, &plan[b]);
                // Receiver dropped → epoch abandoned; just stop.
                if tx.send((b, item)).is_err() {
                    return;
                }
            }
        });
    }
    TrainEpoch { rx: Some(rx), pending: HashMap::new(), next: 0, total, sync: None }
}

impl Iterator for TrainEpoch {
    type Item = Result<TrainItem>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let b = self.next;
        self.next += 1;

        if let Some((dataset, cfg, epoch, plan)) = &self.sync {
            return Some(make_train_item(dataset, cfg, *epoch, b, &plan[b]));
        }
        // Reorder buffer: accept results until batch b arrives.
        loop {
            if let Some(item) = self.pending.remove(&b) {
                return Some(item);
            }
            match self.rx.as_ref().expect("worker channel").recv() {
                Ok((idx, item)) => {
                    self.pending.insert(idx, item);
                }
                Err(_) => {
                    return Some(Err(Error::Data("prefetch workers exited early".into())));
                }
            }
        }
    }
}
