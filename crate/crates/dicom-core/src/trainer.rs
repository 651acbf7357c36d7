//! Pre-training engine: a gradient-trained student (encoder, pixel decoder,
//! projection head) distilled against an exponential-moving-average teacher
//! (encoder and projection head only — the teacher never reconstructs and is
//! never touched by the optimizer).
//!
//! Each step the teacher encodes the two *clean* augmented views while the
//! student encodes the *corrupted* ones; teacher logits are standardized by
//! running statistics and temperature-sharpened into targets for the
//! student's masked-token and class-token predictions, alongside an ℓ1 pixel
//! penalty on the masked patches. After the optimizer update the teacher is
//! blended toward the student and the running statistics absorb this step's
//! teacher logits.

use ndarray::{Array1, Array2, Axis};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autograd::{cosine_between, warmup_cosine, AdamW, Scalar, Tape, Var};

use crate::checkpoint::{self, Binder, Counters};
use crate::config::RunConfig;
use crate::data::{train_epoch, workers_from_env, Dataset, Split, TrainItem};
use crate::error::{Error, Result};
use crate::heads::{project, reconstruct_at, DecoderParams, ProjectionParams};
use crate::objective::{
    entropy, sharpen, temperatures, CenterStats, Temperatures, EPS_LOG,
};
use crate::rng::stream;
use crate::vit::{class_rows, encode, Backbone};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ── Parameter bundles ────────────────────────────────────────────────────

/// Everything the optimizer trains.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams<F> {
    pub backbone: Backbone<F>,
    pub decoder: DecoderParams<F>,
    pub proj: ProjectionParams<F>,
}

/// The averaged network: encoder and projection head, no decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams<F> {
    pub backbone: Backbone<F>,
    pub proj: ProjectionParams<F>,
}

impl<F: Scalar> StudentParams<F> {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let grid = cfg.grid();
        let m = &cfg.model;
        let mut backbone_rng = stream(seed, "init.backbone", &[]);
        let mut decoder_rng = stream(seed, "init.decoder", &[]);
        let mut proj_rng = stream(seed, "init.projection", &[]);
        Ok(StudentParams {
            backbone: Backbone::init(
                grid,
                m.patch_size,
                m.embed_dim,
                m.depth,
                m.heads,
                m.mlp_ratio,
                &mut backbone_rng,
            ),
            decoder: DecoderParams::init(
                m.embed_dim,
                cfg.head.hidden,
                cfg.head.bottleneck,
                m.patch_size,
                &mut decoder_rng,
            ),
            proj: ProjectionParams::init(
                m.embed_dim,
                cfg.head.hidden,
                cfg.head.bottleneck,
                cfg.head.k,
                &mut proj_rng,
            ),
        })
    }

    /// Ordered registry over all trainable tensors.
    pub fn named(&self) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = self.backbone.named("student");
        out.extend(self.decoder.named("decoder"));
        out.extend(self.proj.named("student_proj"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<F>, bool)> {
        let mut out = self.backbone.named_mut("student");
        out.extend(self.decoder.named_mut("decoder"));
        out.extend(self.proj.named_mut("student_proj"));
        out
    }

    /// The tensors the teacher mirrors (everything but the decoder), in
    /// teacher registry order.
    fn shared(&self) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = self.backbone.named("student");
        out.extend(self.proj.named("student_proj"));
        out
    }
}

impl<F: Scalar> TeacherParams<F> {
    /// The teacher starts as an exact copy of the student.
    pub fn from_student(student: &StudentParams<F>) -> Self {
        TeacherParams { backbone: student.backbone.clone(), proj: student.proj.clone() }
    }

    pub fn named(&self) -> Vec<(String, &Array2<F>, bool)> {
        let mut out = self.backbone.named("teacher");
        out.extend(self.proj.named("teacher_proj"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<F>, bool)> {
        let mut out = self.backbone.named_mut("teacher");
        out.extend(self.proj.named_mut("teacher_proj"));
        out
    }
}

// ── Teacher averaging ────────────────────────────────────────────────────

/// The part of a registry name below the student/teacher prefix.
fn suffix(name: &str) -> &str {
    match name.find('.') {
        Some(i) => &name[i + 1..],
        None => name,
    }
}

/// Blend the teacher toward the student: `φ ← λ·φ + (1−λ)·θ` elementwise.
/// `λ = 1` leaves the teacher bit-identical; `λ = 0` copies the student.
pub fn ema_update<F: Scalar>(
    teacher: &mut TeacherParams<F>,
    student: &StudentParams<F>,
    lambda: f64,
) -> Result<()> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(vec![format!("teacher momentum {lambda} outside [0, 1]")]));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let mut phis = teacher.named_mut();
    let thetas = student.shared();
    if phis.len() != thetas.len() {
        return Err(Error::Data(format!(
            "teacher has {} tensors, student shares {}",
            phis.len(),
            thetas.len()
        )));
    }
    let lam = F::from_f64(lambda);
    let one_m = F::one() - lam;
    for ((pn, phi, _), (tn, theta, _)) in phis.iter_mut().zip(thetas.iter()) {
        if suffix(pn) != suffix(tn) {
            return Err(Error::Data(format!("teacher tensor {pn} paired with student {tn}")));
        }
        if phi.dim() != theta.dim() {
            return Err(Error::Data(format!(
                "{pn}: teacher shape {:?} vs student shape {:?}",
                phi.dim(),
                theta.dim()
            )));
        }
        if lambda == 0.0 {
            phi.assign(theta);
        } else {
            ndarray::Zip::from(&mut **phi).and(*theta).for_each(|p, &t| {
                *p = lam * *p + one_m * t;
            });
        }
    }
    Ok(())
}

// ── The per-step loss graph ──────────────────────────────────────────────

/// Handles into one step's loss graph, plus the teacher-side values the
/// update rules need afterwards.
pub struct LossGraph<F> {
    pub recon: Var,
    pub local: Var,
    pub global_: Var,
    pub total: Var,
    /// Student tape handles in `StudentParams::named` order.
    pub student_vars: Vec<Var>,
    /// Teacher tape handles in `TeacherParams::named` order.
    pub teacher_vars: Vec<Var>,
    /// This step's raw teacher logits (masked tokens then class tokens,
    /// both views), for the running-statistics update.
    pub teacher_logits: Array2<F>,
    /// Entropy of the batch-mean teacher class-token distribution — the
    /// collapse canary.
    pub teacher_entropy: f64,
}

fn to_scalar<F: Scalar>(x: &Array2<f32>) -> Array2<F> {
    x.mapv(|v| F::from_f64(v as f64))
}

/// Masked token sequence rows (`image·seq + 1 + token`) and their patch
/// placements for one corrupted view.
fn masked_rows(token_mask: &Array2<f32>, seq: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
    let (n_images, n_tok) = token_mask.dim();
    let mut rows = Vec::new();
    let mut places = Vec::new();
    for i in 0..n_images {
        for t in 0..n_tok {
            if token_mask[(i, t)] != 0.0 {
                rows.push(i * seq + 1 + t);
                places.push((i, t));
            }
        }
    }
    debug_assert_eq!(rows.len(), places.len());
    let _ = n_images;
    (rows, places)
}

/// Build one training step's forward graph on `tape`.
///
/// The teacher is staged as constants (or inert leaves when
/// `teacher_trainable`, to demonstrate that no gradient path reaches it):
/// its logits leave the tape as plain arrays, are standardized and
/// sharpened outside it, and re-enter only as constant target
/// distributions.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student: &StudentParams<F>,
    teacher: &TeacherParams<F>,
    center: &CenterStats<F>,
    cfg: &RunConfig,
    temps: Temperatures,
    item: &TrainItem,
    student_trainable: bool,
    teacher_trainable: bool,
) -> Result<LossGraph<F>> {
    let grid = cfg.grid();
    let n_tok = grid.0 * grid.1;
    let seq = n_tok + 1;
    let n_images = item.views.view1.len();
    let cls = class_rows(n_images, seq);
    let teacher_temp = F::from_f64(temps.teacher);
    let inv_student_temp = F::from_f64(1.0 / temps.student);
    let eps = F::from_f64(EPS_LOG);

    let clean = [&item.views.view1, &item.views.view2];
    let (rows1, places1) = masked_rows(&item.masks[0].token_mask, seq);
    let (rows2, places2) = masked_rows(&item.masks[1].token_mask, seq);
    let rows = [rows1, rows2];
    let places = [places1, places2];

    // Teacher pass over the clean views.
    let t_bound = teacher.backbone.bind(tape, teacher_trainable);
    let t_proj = teacher.proj.bind(tape, teacher_trainable);
    let mut teacher_vars = t_bound.vars();
    teacher_vars.extend(t_proj.vars());

    let mut raw_local = Vec::with_capacity(2);
    let mut raw_cls = Vec::with_capacity(2);
    for v in 0..2 {
        let imgs = to_scalar::<F>(&clean[v].images);
        let enc = encode(tape, &t_bound, &imgs, false)?;
        let local_tokens = tape.select_rows(enc.tokens, rows[v].clone());
        let local_logits = project(tape, &t_proj, local_tokens);
        raw_local.push(tape.value(local_logits).clone());
        let cls_tokens = tape.select_rows(enc.tokens, cls.clone());
        let cls_logits = project(tape, &t_proj, cls_tokens);
        raw_cls.push(tape.value(cls_logits).clone());
    }

    // Standardize with the *current* statistics, then sharpen.
    let mut local_targets = Vec::with_capacity(2);
    let mut cls_targets = Vec::with_capacity(2);
    for v in 0..2 {
        local_targets.push(sharpen(&center.standardize(&raw_local[v]), teacher_temp)?);
        cls_targets.push(sharpen(&center.standardize(&raw_cls[v]), teacher_temp)?);
    }

    // Collapse canary: entropy of the batch-mean class-token distribution.
    let k = teacher.proj.k();
    let mut mean_cls = Array1::<F>::zeros(k);
    for v in 0..2 {
        for row in cls_targets[v].rows() {
            for (j, &p) in row.iter().enumerate() {
                mean_cls[j] += p;
            }
        }
    }
    let denom = F::from_f64(2.0 * n_images as f64);
    mean_cls.mapv_inplace(|p| p / denom);
    let teacher_entropy = entropy(mean_cls.as_slice().unwrap()).to_f64();

    let teacher_logits = ndarray::concatenate(
        Axis(0),
        &[raw_local[0].view(), raw_local[1].view(), raw_cls[0].view(), raw_cls[1].view()],
    )
    .expect("teacher logit blocks share K");

    // Per-term weights: either the plain sums, or means over masked pixels
    // and tokens and images. Reconstruction always averages its two views.
    let total_masked = rows[0].len() + rows[1].len();
    let (local_scale, global_scale) = if cfg.loss.raw {
        (1.0, 1.0)
    } else {
        (1.0 / (total_masked.max(1)) as f64, 1.0 / n_images as f64)
    };

    // Student pass over the corrupted views.
    let s_bound = student.backbone.bind(tape, student_trainable);
    let s_dec = student.decoder.bind(tape, student_trainable);
    let s_proj = student.proj.bind(tape, student_trainable);
    let mut student_vars = s_bound.vars();
    student_vars.extend(s_dec.vars());
    student_vars.extend(s_proj.vars());

    let mut recon_terms = Vec::with_capacity(2);
    let mut local_terms = Vec::with_capacity(2);
    let mut cls_logits_s = Vec::with_capacity(2);
    for v in 0..2 {
        let imgs = to_scalar::<F>(&item.masks[v].corrupted.images);
        let enc = encode(tape, &s_bound, &imgs, false)?;

        let masked_tokens = tape.select_rows(enc.tokens, rows[v].clone());
        let canvas = reconstruct_at(tape, &s_dec, masked_tokens, places[v].clone(), n_images, grid);
        let target = to_scalar::<F>(&clean[v].images);
        let mask = to_scalar::<F>(&item.masks[v].pixel_mask);
        let pixel_count: f64 = item.masks[v].pixel_mask.iter().map(|&m| m as f64).sum();
        let recon_scale = if cfg.loss.raw { 0.5 } else { 0.5 / pixel_count.max(1.0) };
        recon_terms.push(tape.masked_l1(canvas, target, mask, F::from_f64(recon_scale)));

        let local_logits = project(tape, &s_proj, masked_tokens);
        local_terms.push(tape.ce_vs_const_probs(
            local_logits,
            local_targets[v].clone(),
            Array1::from_elem(rows[v].len(), F::one()),
            inv_student_temp,
            eps,
            F::from_f64(local_scale),
        ));

        let cls_tokens = tape.select_rows(enc.tokens, cls.clone());
        cls_logits_s.push(project(tape, &s_proj, cls_tokens));
    }

    // Cross-view class-token distillation: each teacher view teaches the
    // student's other view, and both directions are summed.
    let g1 = tape.ce_vs_const_probs(
        cls_logits_s[0],
        cls_targets[1].clone(),
        Array1::from_elem(n_images, F::one()),
        inv_student_temp,
        eps,
        F::from_f64(global_scale),
    );
    let g2 = tape.ce_vs_const_probs(
        cls_logits_s[1],
        cls_targets[0].clone(),
        Array1::from_elem(n_images, F::one()),
        inv_student_temp,
        eps,
        F::from_f64(global_scale),
    );

    let recon = tape.add(recon_terms[0], recon_terms[1]);
    let local = tape.add(local_terms[0], local_terms[1]);
    let global_ = tape.add(g1, g2);
    let r = tape.scale(recon, F::from_f64(cfg.loss.alpha1));
    let l = tape.scale(local, F::from_f64(cfg.loss.alpha2));
    let g = tape.scale(global_, F::from_f64(cfg.loss.alpha3));
    let rl = tape.add(r, l);
    let total = tape.add(rl, g);

    Ok(LossGraph {
        recon,
        local,
        global_,
        total,
        student_vars,
        teacher_vars,
        teacher_logits,
        teacher_entropy,
    })
}

// ── Training state ───────────────────────────────────────────────────────

/// What one completed step reported.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// 1-based count of completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    pub recon: f64,
    pub local: f64,
    pub global_: f64,
    pub total: f64,
    pub lr: f64,
    pub ema_weight: f64,
    pub teacher_entropy: f64,
}

/// The complete mutable training position: both networks, the running
/// teacher-logit statistics, the optimizer, and the step/epoch counters.
pub struct TrainState<F: Scalar> {
    pub cfg: RunConfig,
    pub student: StudentParams<F>,
    pub teacher: TeacherParams<F>,
    pub center: CenterStats<F>,
    pub opt: AdamW<F>,
    pub step: u64,
    pub epoch: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let student = StudentParams::init(&cfg, cfg.seed)?;
        let teacher = TeacherParams::from_student(&student);
        let center = CenterStats::new(cfg.head.k, F::from_f64(cfg.center.momentum));
        let opt = AdamW::new(ADAM_BETA1, ADAM_BETA2, ADAM_EPS, cfg.optim.weight_decay);
        Ok(TrainState { cfg, student, teacher, center, opt, step: 0, epoch: 0 })
    }

    /// The schedule position for a given optimizer-step index.
    fn schedule(&self, steps_per_epoch: u64) -> (f64, f64) {
        let spe = steps_per_epoch.max(1);
        let total = (self.cfg.train.epochs as u64 * spe).max(1);
        let warmup = self.cfg.optim.warmup_epochs as u64 * spe;
        let lr = warmup_cosine(self.step as usize, total as usize, warmup as usize, self.cfg.optim.lr);
        let t = if total <= 1 { 1.0 } else { self.step as f64 / (total - 1) as f64 };
        let lambda = cosine_between(self.cfg.ema.start, self.cfg.ema.end, t);
        (lr, lambda)
    }

    /// Run exactly one optimizer step on `item`, then the teacher blend,
    /// the prototype re-normalizations, and the statistics update — in that
    /// order. A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self, item: &TrainItem, steps_per_epoch: u64) -> Result<StepStats> {
        let (lr, lambda) = self.schedule(steps_per_epoch);
        let temps = temperatures(&self.cfg, self.epoch);

        let mut tape = Tape::new();
        let graph = build_loss(
            &mut tape,
            &self.student,
            &self.teacher,
            &self.center,
            &self.cfg,
            temps,
            item,
            true,
            false,
        )?;

        for (component, var) in [
            ("reconstruction", graph.recon),
            ("local distillation", graph.local),
            ("global distillation", graph.global_),
            ("total", graph.total),
        ] {
            let value = tape.scalar(var).to_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: component.into(),
                    step: self.step,
                    value,
                });
            }
        }
        let recon_v = tape.scalar(graph.recon).to_f64();
        let local_v = tape.scalar(graph.local).to_f64();
        let global_v = tape.scalar(graph.global_).to_f64();
        let total_v = tape.scalar(graph.total).to_f64();

        tape.backward(graph.total);

        let grads: Vec<Option<&Array2<F>>> =
            graph.student_vars.iter().map(|&v| tape.grad(v)).collect();
        let any_update = grads
            .iter()
            .any(|g| g.is_some_and(|g| g.iter().any(|&v| v != F::zero())));

        let mut registry = self.student.named_mut();
        let lrs = vec![lr; registry.len()];
        let decay: Vec<bool> = registry.iter().map(|(_, _, d)| *d).collect();
        let mut params: Vec<&mut Array2<F>> =
            registry.iter_mut().map(|(_, t, _)| &mut **t).collect();
        self.opt.step(&mut params, &grads, &lrs, &decay);
        drop(registry);

        // Prototype columns live on the unit sphere: re-project after the
        // optimizer moves the student, and after the blend moves the
        // teacher. An all-zero gradient skips both the update and the
        // re-projection, leaving the student bit-identical.
        if any_update {
            self.student.proj.renorm_prototypes();
        }
        ema_update(&mut self.teacher, &self.student, lambda)?;
        if lambda < 1.0 {
            self.teacher.proj.renorm_prototypes();
        }

        self.center.update(&graph.teacher_logits);
        self.step += 1;

        Ok(StepStats {
            step: self.step,
            epoch: self.epoch,
            recon: recon_v,
            local: local_v,
            global_: global_v,
            total: total_v,
            lr,
            ema_weight: lambda,
            teacher_entropy: graph.teacher_entropy,
        })
    }
}

// ── Checkpointing ────────────────────────────────────────────────────────

fn center_rows<F: Scalar>(v: &Array1<F>) -> Array2<f32> {
    Array2::from_shape_fn((1, v.len()), |(_, j)| v[j].to_f64() as f32)
}

impl TrainState<f32> {
    /// Write the full state — both networks, statistics, optimizer moments,
    /// counters, and the resolved config — to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut owned: Vec<(String, Array2<f32>)> = vec![
            ("center.mean".into(), center_rows(self.center.mean())),
            ("center.std".into(), center_rows(self.center.std())),
        ];
        let (adam_t, m, v) = self.opt.state();
        if !m.is_empty() {
            let names: Vec<String> = self.student.named().into_iter().map(|(n, _, _)| n).collect();
            if names.len() != m.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} tensors, student has {}",
                    m.len(),
                    names.len()
                )));
            }
            for (i, name) in names.iter().enumerate() {
                owned.push((format!("adam.m.{name}"), m[i].clone()));
                owned.push((format!("adam.v.{name}"), v[i].clone()));
            }
        }

        let mut tensors: Vec<(String, &Array2<f32>)> = Vec::new();
        for (n, t, _) in self.student.named() {
            tensors.push((n, t));
        }
        for (n, t, _) in self.teacher.named() {
            tensors.push((n, t));
        }
        for (n, t) in &owned {
            tensors.push((n.clone(), t));
        }

        let counters =
            Counters { step: self.step, epoch: self.epoch, adam_t, seed: self.cfg.seed };
        let config = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        checkpoint::save_checkpoint(dir, counters, config, &tensors)
    }

    /// Restore a state from `dir`. The checkpoint's own config describes the
    /// architecture; when `expected` is given, every architecture field that
    /// disagrees with it is reported before any tensors are touched.
    pub fn load(dir: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load_checkpoint(dir)?;
        let cfg: RunConfig = serde_json::from_value(manifest.config)
            .map_err(|e| Error::Checkpoint(format!("config in {}: {e}", dir.display())))?;
        if let Some(exp) = expected {
            let mismatches = architecture_mismatches(&cfg, exp);
            if !mismatches.is_empty() {
                return Err(Error::Config(mismatches));
            }
        }

        let mut state = TrainState::new(cfg)?;
        let mut binder = Binder::new(tensors);
        binder.assign_registry(state.student.named_mut());
        binder.assign_registry(state.teacher.named_mut());

        let k = state.cfg.head.k;
        let mut mean = Array2::<f32>::zeros((1, k));
        let mut std = Array2::<f32>::zeros((1, k));
        binder.assign("center.mean", &mut mean);
        binder.assign("center.std", &mut std);

        let adam_t = manifest.counters.adam_t;
        if adam_t > 0 {
            let names: Vec<String> =
                state.student.named().into_iter().map(|(n, _, _)| n).collect();
            let shapes: Vec<(usize, usize)> =
                state.student.named().into_iter().map(|(_, t, _)| t.dim()).collect();
            let mut ms = Vec::with_capacity(names.len());
            let mut vs = Vec::with_capacity(names.len());
            for (name, shape) in names.iter().zip(&shapes) {
                let mut m = Array2::<f32>::zeros(*shape);
                let mut v = Array2::<f32>::zeros(*shape);
                binder.assign(&format!("adam.m.{name}"), &mut m);
                binder.assign(&format!("adam.v.{name}"), &mut v);
                ms.push(m);
                vs.push(v);
            }
            binder.finish()?;
            state.opt.restore(adam_t, ms, vs);
        } else {
            binder.finish()?;
        }

        state.center = CenterStats::from_parts(
            mean.row(0).to_owned(),
            std.row(0).to_owned(),
            state.cfg.center.momentum as f32,
        );
        state.step = manifest.counters.step;
        state.epoch = manifest.counters.epoch;
        Ok(state)
    }
}

/// Architecture fields that must agree for a checkpoint's tensors to fit,
/// reported one line per disagreement.
pub fn architecture_mismatches(saved: &RunConfig, expected: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |field: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{field}: checkpoint has {a}, expected {b}"));
        }
    };
    check(
        "data.image_size",
        format!("{:?}", saved.data.image_size),
        format!("{:?}", expected.data.image_size),
    );
    check("model.patch_size", saved.model.patch_size.to_string(), expected.model.patch_size.to_string());
    check("model.embed_dim", saved.model.embed_dim.to_string(), expected.model.embed_dim.to_string());
    check("model.depth", saved.model.depth.to_string(), expected.model.depth.to_string());
    check("model.heads", saved.model.heads.to_string(), expected.model.heads.to_string());
    check("model.mlp_ratio", saved.model.mlp_ratio.to_string(), expected.model.mlp_ratio.to_string());
    check("head.K", saved.head.k.to_string(), expected.head.k.to_string());
    check("head.bottleneck", saved.head.bottleneck.to_string(), expected.head.bottleneck.to_string());
    check("head.hidden", saved.head.hidden.to_string(), expected.head.hidden.to_string());
    out
}

// ── The pre-training loop ────────────────────────────────────────────────

/// Epoch-indexed checkpoint directory name.
fn checkpoint_dir(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{epoch:04}"))
}

pub fn final_checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint-final")
}

/// Pre-train from scratch, writing per-step losses, periodic checkpoints,
/// and a final checkpoint under `out_dir`.
pub fn pretrain(dataset: &Arc<Dataset>, cfg: &RunConfig, out_dir: &Path) -> Result<TrainState<f32>> {
    let state = TrainState::new(cfg.clone())?;
    run_training(state, dataset, out_dir)
}

/// Continue a run from a saved checkpoint (its embedded config is the
/// authority), starting at the epoch after the one it recorded.
pub fn resume_pretrain(
    dataset: &Arc<Dataset>,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<TrainState<f32>> {
    let state = TrainState::load(checkpoint, None)?;
    run_training(state, dataset, out_dir)
}

fn run_training(
    mut state: TrainState<f32>,
    dataset: &Arc<Dataset>,
    out_dir: &Path,
) -> Result<TrainState<f32>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.json");
    std::fs::write(&config_path, state.cfg.to_json()).map_err(|e| Error::io(&config_path, e))?;

    let train_indices = dataset.split_indices(Split::Train);
    let steps_per_epoch = train_indices.len() / state.cfg.data.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "training split has {} images; batch size {} leaves no full batch",
            train_indices.len(),
            state.cfg.data.batch_size
        )));
    }

    let log_path = out_dir.join("losses.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let fresh = log.metadata().map(|m| m.len() == 0).unwrap_or(true);
    if fresh {
        writeln!(log, "step,epoch,L_recons,L_l,L_g,L").map_err(|e| Error::io(&log_path, e))?;
    }

    let workers = workers_from_env();
    let epochs = state.cfg.train.epochs as u64;
    let every = state.cfg.train.checkpoint_every as u64;
    for epoch in state.epoch..epochs {
        for item in train_epoch(dataset.clone(), &state.cfg, epoch, workers) {
            let stats = state.train_step(&item?, steps_per_epoch as u64)?;
            writeln!(
                log,
                "{},{},{},{},{},{}",
                stats.step, stats.epoch, stats.recon, stats.local, stats.global_, stats.total
            )
            .map_err(|e| Error::io(&log_path, e))?;
        }
        state.epoch = epoch + 1;
        if every > 0 && state.epoch % every == 0 && state.epoch < epochs {
            state.save(&checkpoint_dir(out_dir, state.epoch))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&final_checkpoint_dir(out_dir))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_train_item};
    use tempfile::tempdir;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::from_json(
            r#"{
                "data": {"image_size": [16, 16], "batch_size": 2},
                "model": {"patch_size": 4, "embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2},
                "head": {"K": 8, "bottleneck": 8, "hidden": 16},
                "temp": {"warmup_epochs": 2},
                "optim": {"warmup_epochs": 1},
                "train": {"epochs": 2, "checkpoint_every": 1}
            }"#,
        )
        .unwrap();
        cfg.seed = seed;
        cfg
    }

    fn tiny_item(cfg: &RunConfig, dir: &Path) -> (Arc<Dataset>, TrainItem) {
        let manifest = generate_synthetic(dir, 2, 7, (16, 16), cfg.seed).unwrap();
        let dataset =
            Arc::new(Dataset::open(&manifest, (cfg.data.image_size[0], cfg.data.image_size[1])).unwrap());
        let indices = dataset.split_indices(Split::Train);
        let item = make_train_item(&dataset, cfg, 0, 0, &indices[..cfg.data.batch_size]).unwrap();
        (dataset, item)
    }

    #[test]
    fn ema_endpoints_and_blend() {
        let cfg = tiny_cfg(3);
        let student = StudentParams::<f32>::init(&cfg, 3).unwrap();
        let mut teacher = TeacherParams::from_student(&student);
        teacher.backbone.cls.mapv_inplace(|v| v + 1.0);
        let drifted = teacher.backbone.cls.clone();

        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.backbone.cls, drifted, "unit momentum must freeze the teacher");

        ema_update(&mut teacher, &student, 0.5).unwrap();
        for (p, t) in teacher.backbone.cls.iter().zip(student.backbone.cls.iter()) {
            let mid = 0.5 * (t + 1.0) + 0.5 * t;
            assert!((p - mid).abs() < 1e-6, "{p} vs {mid}");
        }

        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.backbone.cls, student.backbone.cls, "zero momentum copies the student");

        let err = ema_update(&mut teacher, &student, 1.5).unwrap_err();
        assert_eq!(err.code(), "config/invalid");
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let cfg = tiny_cfg(5);
        let dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, dir.path());
        let state = TrainState::<f32>::new(cfg.clone()).unwrap();

        let mut tape = Tape::new();
        let graph = build_loss(
            &mut tape,
            &state.student,
            &state.teacher,
            &state.center,
            &cfg,
            temperatures(&cfg, 0),
            &item,
            true,
            true, // teacher as leaves: any gradient path would be recorded
        )
        .unwrap();
        tape.backward(graph.total);
        for &v in &graph.teacher_vars {
            assert!(tape.grad(v).is_none(), "gradient reached a teacher tensor");
        }
        let touched = graph.student_vars.iter().filter(|&&v| tape.grad(v).is_some()).count();
        assert!(touched > 0, "student received no gradient at all");
    }

    #[test]
    fn zero_weights_freeze_the_student_but_not_the_teacher() {
        let mut cfg = tiny_cfg(7);
        cfg.loss.alpha1 = 0.0;
        cfg.loss.alpha2 = 0.0;
        cfg.loss.alpha3 = 0.0;
        let dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, dir.path());
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        // Make the teacher distinguishable so the blend is visible.
        state.teacher.backbone.cls.mapv_inplace(|v| v + 0.25);

        let before_student: Vec<Array2<f32>> =
            state.student.named().into_iter().map(|(_, t, _)| t.clone()).collect();
        let teacher_cls_before = state.teacher.backbone.cls.clone();

        let stats = state.train_step(&item, 4).unwrap();
        assert_eq!(stats.total, 0.0);
        assert_eq!(stats.step, 1);

        for ((_, after, _), before) in state.student.named().into_iter().zip(&before_student) {
            assert_eq!(after, before, "student tensor changed under an all-zero objective");
        }
        assert_ne!(
            state.teacher.backbone.cls, teacher_cls_before,
            "teacher must still blend toward the student"
        );
    }

    #[test]
    fn drift_decays_geometrically_when_the_student_is_frozen() {
        let mut cfg = tiny_cfg(11);
        cfg.loss.alpha1 = 0.0;
        cfg.loss.alpha2 = 0.0;
        cfg.loss.alpha3 = 0.0;
        cfg.ema.start = 0.9;
        cfg.ema.end = 0.9;
        let dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, dir.path());
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        state.teacher.backbone.cls.mapv_inplace(|v| v + 1.0);

        let dist = |state: &TrainState<f32>| -> f64 {
            state
                .teacher
                .backbone
                .cls
                .iter()
                .zip(state.student.backbone.cls.iter())
                .map(|(p, t)| ((p - t) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut d = vec![dist(&state)];
        for _ in 0..3 {
            state.train_step(&item, 4).unwrap();
            d.push(dist(&state));
        }
        for w in d.windows(2) {
            let ratio = w[1] / w[0];
            assert!((ratio - 0.9).abs() < 1e-3, "drift ratio {ratio} is not the momentum");
        }
    }

    #[test]
    fn one_step_reports_finite_losses_and_schedules() {
        let cfg = tiny_cfg(13);
        let dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, dir.path());
        let mut state = TrainState::<f32>::new(cfg.clone()).unwrap();

        let stats = state.train_step(&item, 4).unwrap();
        assert_eq!((stats.step, stats.epoch), (1, 0));
        for v in [stats.recon, stats.local, stats.global_, stats.total] {
            assert!(v.is_finite() && v >= 0.0, "loss {v}");
        }
        // First warmup step: lr = base/warmup_steps; momentum at its start.
        assert!((stats.lr - cfg.optim.lr / 4.0).abs() < 1e-12);
        assert!((stats.ema_weight - cfg.ema.start).abs() < 1e-12);
        assert!(stats.teacher_entropy > 0.0);
        assert_eq!(state.opt.steps(), 1);
    }

    #[test]
    fn non_finite_parameters_abort_with_the_component_named() {
        let cfg = tiny_cfg(17);
        let dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, dir.path());
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        state.student.backbone.patch_w[(0, 0)] = f32::NAN;

        let err = state.train_step(&item, 4).unwrap_err();
        assert_eq!(err.code(), "train/non-finite");
        assert!(err.to_string().contains("reconstruction"), "{err}");
    }

    #[test]
    fn checkpoint_round_trips_the_full_state() {
        let cfg = tiny_cfg(19);
        let data_dir = tempdir().unwrap();
        let (_data, item) = tiny_item(&cfg, data_dir.path());
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        state.train_step(&item, 4).unwrap();
        state.train_step(&item, 4).unwrap();
        state.epoch = 1;

        let ckpt = tempdir().unwrap();
        state.save(ckpt.path()).unwrap();
        let restored = TrainState::<f32>::load(ckpt.path(), None).unwrap();

        assert_eq!((restored.step, restored.epoch), (2, 1));
        assert_eq!(restored.opt.steps(), 2);
        for ((name, a, _), (_, b, _)) in state.student.named().into_iter().zip(restored.student.named()) {
            assert_eq!(a, b, "{name}");
        }
        for ((name, a, _), (_, b, _)) in state.teacher.named().into_iter().zip(restored.teacher.named()) {
            assert_eq!(a, b, "{name}");
        }
        assert_eq!(state.center.mean(), restored.center.mean());
        assert_eq!(state.center.std(), restored.center.std());
        let (t1, m1, v1) = state.opt.state();
        let (t2, m2, v2) = restored.opt.state();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn loading_against_a_different_architecture_lists_every_field() {
        let cfg = tiny_cfg(23);
        let state = TrainState::<f32>::new(cfg.clone()).unwrap();
        let ckpt = tempdir().unwrap();
        state.save(ckpt.path()).unwrap();

        let mut other = cfg;
        other.model.embed_dim = 32;
        other.model.depth = 2;
        let err = match TrainState::<f32>::load(ckpt.path(), Some(&other)) {
            Err(e) => e,
            Ok(_) => panic!("load accepted a mismatched architecture"),
        };
        let text = err.to_string();
        assert!(text.contains("model.embed_dim"), "{text}");
        assert!(text.contains("model.depth"), "{text}");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let cfg = tiny_cfg(29);
        let data_dir = tempdir().unwrap();
        let manifest = generate_synthetic(data_dir.path(), 2, 7, (16, 16), cfg.seed).unwrap();
        let dataset = Arc::new(Dataset::open(&manifest, (16, 16)).unwrap());

        let full_dir = tempdir().unwrap();
        pretrain(&dataset, &cfg, full_dir.path()).unwrap();

        let resumed_dir = tempdir().unwrap();
        resume_pretrain(&dataset, &checkpoint_dir(full_dir.path(), 1), resumed_dir.path()).unwrap();

        let a = std::fs::read(final_checkpoint_dir(full_dir.path()).join("tensors.bin")).unwrap();
        let b = std::fs::read(final_checkpoint_dir(resumed_dir.path()).join("tensors.bin")).unwrap();
        assert_eq!(a, b, "resumed run diverged from the uninterrupted one");
    }
}
