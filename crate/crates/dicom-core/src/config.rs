//! Run configuration: strict nested JSON with defaults for every key.
//!
//! Parsing rejects unknown keys outright, and `validate` reports *every*
//! violated constraint rather than stopping at the first, so a config file
//! can be fixed in one pass. An empty file is the full default
//! configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Compute device hint; only "cpu" is implemented.
    pub device: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub temp: TempConfig,
    pub center: CenterConfig,
    pub ema: EmaConfig,
    pub optim: OptimConfig,
    pub augment: AugConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub segment: SegmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Target size (height, width); every image is resized to this.
    pub image_size: [usize; 2],
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Fraction of tokens zeroed per corrupted view.
    pub ratio: f64,
    /// Mean side length (patches) of the rectangular mask blocks.
    pub mean_block_side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Output dimension of the projection head (number of prototypes).
    #[serde(rename = "K")]
    pub k: usize,
    pub bottleneck: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// When true, losses are the plain sums; otherwise each term is
    /// normalized (masked-pixel count, masked-token count, batch size).
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TempConfig {
    pub student: f64,
    pub teacher_start: f64,
    pub teacher_end: f64,
    /// Epochs over which the teacher temperature ramps start → end.
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterConfig {
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    /// Teacher momentum λ, cosine-ramped start → end over training.
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup, in epochs.
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub crop: bool,
    /// Lower bound of the crop area fraction (upper bound is 1).
    pub crop_scale_min: f64,
    pub rotate: bool,
    /// Rotation drawn uniformly from ± this many degrees.
    pub rotate_degrees: f64,
    pub jitter: bool,
    /// Additive brightness shift drawn from ± this value.
    pub brightness: f64,
    /// Contrast factor drawn from 1 ± this value.
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Checkpoint period in epochs (a final checkpoint is always written).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Decoder channel widths for the three upsampling stages.
    pub channels: [usize; 3],
    pub classes: usize,
    /// 1-indexed encoder blocks tapped for skip connections; `null` selects
    /// blocks at depth fractions ¼, ½, ¾, 1.
    pub skip_blocks: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            device: "cpu".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            temp: TempConfig::default(),
            center: CenterConfig::default(),
            ema: EmaConfig::default(),
            optim: OptimConfig::default(),
            augment: AugConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            segment: SegmentConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { image_size: [64, 64], batch_size: 32 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { patch_size: 8, embed_dim: 192, depth: 6, heads: 3, mlp_ratio: 4 }
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { ratio: 0.70, mean_block_side: 3.0 }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { k: 8192, bottleneck: 256, hidden: 2048 }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha1: 1.0, alpha2: 1.0, alpha3: 1.0, raw: false }
    }
}

impl Default for TempConfig {
    fn default() -> Self {
        TempConfig { student: 0.1, teacher_start: 0.04, teacher_end: 0.07, warmup_epochs: 30 }
    }
}

impl Default for CenterConfig {
    fn default() -> Self {
        CenterConfig { momentum: 0.9 }
    }
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { start: 0.996, end: 1.0 }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 5e-4, weight_decay: 0.04, warmup_epochs: 10 }
    }
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop: true,
            crop_scale_min: 0.6,
            rotate: true,
            rotate_degrees: 10.0,
            jitter: true,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, checkpoint_every: 25 }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 50, lr: 1e-3 }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 20, lr_backbone: 1e-4, lr_head: 1e-3 }
    }
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            epochs: 20,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            channels: [64, 32, 16],
            classes: 2,
            skip_blocks: None,
        }
    }
}

impl RunConfig {
    /// Parse from a JSON file; an empty file yields the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parse from a JSON string; blank input yields the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Hash of the fully resolved configuration, recorded in every report so
    /// results can be traced back to exact settings.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Patch-grid dimensions (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.data.image_size[0] / self.model.patch_size, self.data.image_size[1] / self.model.patch_size)
    }

    /// Number of data tokens n.
    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Encoder blocks (1-indexed) tapped by the segmentation decoder:
    /// configured list, or blocks at depth fractions ¼, ½, ¾, 1.
    pub fn seg_taps(&self) -> Vec<usize> {
        match &self.segment.skip_blocks {
            Some(v) => v.clone(),
            None => (1..=4).map(|i| (self.model.depth * i).div_ceil(4).max(1)).collect(),
        }
    }

    /// Check every constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };

        check(self.device == "cpu", format!("device: only \"cpu\" is supported, got {:?}", self.device));

        let [h, w] = self.data.image_size;
        let p = self.model.patch_size;
        check(p >= 1, "model.patch_size must be >= 1".into());
        check(h >= 1 && w >= 1, format!("data.image_size must be positive, got {h}x{w}"));
        if p >= 1 {
            check(
                h % p == 0 && w % p == 0,
                format!("data.image_size {h}x{w} must be divisible by model.patch_size {p}"),
            );
        }
        check(self.data.batch_size >= 1, "data.batch_size must be >= 1".into());

        let m = &self.model;
        check(m.depth >= 1, "model.depth must be >= 1".into());
        check(m.heads >= 1, "model.heads must be >= 1".into());
        check(m.mlp_ratio >= 1, "model.mlp_ratio must be >= 1".into());
        if m.heads >= 1 {
            check(
                m.embed_dim % m.heads == 0,
                format!("model.embed_dim {} must be divisible by model.heads {}", m.embed_dim, m.heads),
            );
        }

        check(
            (0.0..=1.0).contains(&self.mask.ratio),
            format!("mask.ratio must lie in [0, 1], got {}", self.mask.ratio),
        );
        check(
            self.mask.mean_block_side >= 1.0,
            format!("mask.mean_block_side must be >= 1, got {}", self.mask.mean_block_side),
        );

        check(self.head.k >= 2, format!("head.K must be >= 2, got {}", self.head.k));
        check(self.head.bottleneck >= 1, "head.bottleneck must be >= 1".into());
        check(self.head.hidden >= 1, "head.hidden must be >= 1".into());

        for (name, a) in [
            ("loss.alpha1", self.loss.alpha1),
            ("loss.alpha2", self.loss.alpha2),
            ("loss.alpha3", self.loss.alpha3),
        ] {
            check(a.is_finite() && a >= 0.0, format!("{name} must be finite and >= 0, got {a}"));
        }

        let t = &self.temp;
        check(t.student > 0.0, format!("temp.student must be > 0, got {}", t.student));
        for (name, v) in [("temp.teacher_start", t.teacher_start), ("temp.teacher_end", t.teacher_end)] {
            check(v > 0.0, format!("{name} must be > 0, got {v}"));
            check(
                v < t.student,
                format!("{name} ({v}) must be below temp.student ({}) for sharpening", t.student),
            );
        }

        check(
            (0.0..1.0).contains(&self.center.momentum),
            format!("center.momentum must lie in [0, 1), got {}", self.center.momentum),
        );

        let e = &self.ema;
        check(
            (0.0..=1.0).contains(&e.start) && (0.0..=1.0).contains(&e.end) && e.start <= e.end,
            format!("ema must satisfy 0 <= start <= end <= 1, got start {} end {}", e.start, e.end),
        );

        check(
            self.optim.lr.is_finite() && self.optim.lr > 0.0,
            format!("optim.lr must be > 0, got {}", self.optim.lr),
        );
        check(
            self.optim.weight_decay.is_finite() && self.optim.weight_decay >= 0.0,
            format!("optim.weight_decay must be >= 0, got {}", self.optim.weight_decay),
        );

        let a = &self.augment;
        check(
            a.crop_scale_min > 0.0 && a.crop_scale_min <= 1.0,
            format!("augment.crop_scale_min must lie in (0, 1], got {}", a.crop_scale_min),
        );
        check(
            a.rotate_degrees >= 0.0 && a.rotate_degrees < 90.0,
            format!("augment.rotate_degrees must lie in [0, 90), got {}", a.rotate_degrees),
        );
        check(
            (0.0..=1.0).contains(&a.brightness),
            format!("augment.brightness must lie in [0, 1], got {}", a.brightness),
        );
        check(
            (0.0..1.0).contains(&a.contrast),
            format!("augment.contrast must lie in [0, 1), got {}", a.contrast),
        );

        check(self.train.epochs >= 1, "train.epochs must be >= 1".into());
        check(self.train.checkpoint_every >= 1, "train.checkpoint_every must be >= 1".into());
        check(self.probe.epochs >= 1, "probe.epochs must be >= 1".into());
        check(self.probe.lr > 0.0, format!("probe.lr must be > 0, got {}", self.probe.lr));
        check(self.finetune.epochs >= 1, "finetune.epochs must be >= 1".into());
        check(
            self.finetune.lr_backbone > 0.0 && self.finetune.lr_head > 0.0,
            "finetune learning rates must be > 0".into(),
        );

        let s = &self.segment;
        check(s.epochs >= 1, "segment.epochs must be >= 1".into());
        check(s.lr_backbone > 0.0 && s.lr_head > 0.0, "segment learning rates must be > 0".into());
        check(s.classes >= 2, format!("segment.classes must be >= 2, got {}", s.classes));
        check(s.channels.iter().all(|&c| c >= 1), "segment.channels must all be >= 1".into());
        if let Some(taps) = &s.skip_blocks {
            check(taps.len() == 4, format!("segment.skip_blocks must list exactly 4 blocks, got {}", taps.len()));
            check(
                taps.windows(2).all(|w| w[0] < w[1]),
                "segment.skip_blocks must be strictly increasing".into(),
            );
            check(
                taps.iter().all(|&b| b >= 1 && b <= self.model.depth),
                format!("segment.skip_blocks must lie within 1..={}", self.model.depth),
            );
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
