//! Run configuration: TOML sections of flat `key = value` pairs.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BlockKind, StemKind};
use crate::data::CaptionMode;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::probe::ProbeProtocol;
use crate::tasks::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: String,
    pub probe_manifest: String,
    pub image_side: usize,
    pub caption_mode: CaptionMode,
    pub max_len: usize,
    pub augment: bool,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: String::new(),
            probe_manifest: String::new(),
            image_side: 64,
            caption_mode: CaptionMode::OneRandom,
            max_len: 32,
            augment: true,
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            flip_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub path: String,
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { path: String::new(), vocab_size: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub block: BlockKind,
    pub stem: StemKind,
    pub grid_side: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            widths: vec![32, 64, 128, 256],
            blocks: vec![2, 2, 2, 2],
            block: BlockKind::Basic,
            stem: StemKind::Conv3x3,
            grid_side: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub dropout: f64,
    pub allow_nonstandard: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { hidden: 128, layers: 1, heads: 2, feedforward: 512, dropout: 0.1, allow_nonstandard: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lookahead_alpha: f64,
    pub lookahead_k: usize,
    pub warmup_iters: usize,
    pub total_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_backbone: 0.2,
            lr_head: 1e-3,
            lookahead_alpha: 0.5,
            lookahead_k: 5,
            warmup_iters: 100,
            total_iters: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_period: usize,
    pub out_dir: String,
    pub mask_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Bicap,
            batch_size: 32,
            seed: 0,
            eval_period: 500,
            out_dir: "runs/default".into(),
            mask_rate: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub protocol: ProbeProtocol,
    pub costs: Vec<f64>,
    pub folds: usize,
    pub svm_steps: usize,
    pub softmax_lr: f64,
    pub softmax_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            protocol: ProbeProtocol::Svm,
            costs: vec![0.01, 0.1, 1.0, 10.0],
            folds: 3,
            svm_steps: 300,
            softmax_lr: 0.3,
            softmax_epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneSection,
    pub head: HeadSection,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

/// `(key, description)` for every leaf field, in file order.
pub const FIELD_DOCS: &[(&str, &str)] = &[
    ("data.manifest", "JSONL manifest of {id, image, captions}"),
    ("data.probe_manifest", "JSONL manifest of {id, image, label} for the early-stopping probe; empty disables it"),
    ("data.image_side", "input side S in pixels"),
    ("data.caption_mode", "one-random | all"),
    ("data.max_len", "caption length cap including [SOS]/[EOS]; also the positional capacity"),
    ("data.augment", "random crop, color jitter and flip during training"),
    ("data.crop_scale_min", "smallest crop area fraction"),
    ("data.crop_scale_max", "largest crop area fraction"),
    ("data.brightness", "brightness jitter magnitude"),
    ("data.contrast", "contrast jitter magnitude"),
    ("data.saturation", "saturation jitter magnitude"),
    ("data.hue", "hue jitter magnitude (fraction of a turn)"),
    ("data.flip_prob", "probability of a horizontal flip with left/right swap"),
    ("data.mean", "per-channel RGB mean used for normalization"),
    ("data.std", "per-channel RGB std used for normalization"),
    ("data.workers", "augmentation threads; output does not depend on it"),
    ("tokenizer.path", "vocab file; empty trains one from the caption manifest"),
    ("tokenizer.vocab_size", "target vocabulary size for tokenizer-train"),
    ("backbone.widths", "stage widths"),
    ("backbone.blocks", "residual blocks per stage"),
    ("backbone.block", "basic | bottleneck"),
    ("backbone.stem", "conv3x3 (stride 2) | conv7x7 (stride 2 + max-pool)"),
    ("backbone.grid_side", "feature grid side G"),
    ("head.hidden", "hidden size H"),
    ("head.layers", "transformer layers L per direction"),
    ("head.heads", "attention heads A (must equal H/64 unless allow_nonstandard)"),
    ("head.feedforward", "feedforward width F (must equal 4H unless allow_nonstandard)"),
    ("head.dropout", "dropout probability"),
    ("head.allow_nonstandard", "skip the A = H/64, F = 4H check"),
    ("optim.momentum", "SGD momentum"),
    ("optim.weight_decay", "weight decay on non-norm, non-bias parameters"),
    ("optim.lr_backbone", "peak learning rate of the backbone groups"),
    ("optim.lr_head", "peak learning rate of the head groups"),
    ("optim.lookahead_alpha", "LookAhead interpolation factor; 1 disables the slow weights"),
    ("optim.lookahead_k", "LookAhead sync period"),
    ("optim.warmup_iters", "linear warmup iterations"),
    ("optim.total_iters", "total iterations; cosine decay reaches zero here"),
    ("train.task", "bicap | forward | tokclf | mlm"),
    ("train.batch_size", "images per batch"),
    ("train.seed", "seed of every random stream"),
    ("train.eval_period", "iterations between probe evaluations"),
    ("train.out_dir", "directory for last.ckpt, best.ckpt and train.csv"),
    ("train.mask_rate", "masked-LM selection rate"),
    ("probe.protocol", "svm | softmax"),
    ("probe.costs", "SVM cost values swept by cross-validation"),
    ("probe.folds", "cross-validation folds"),
    ("probe.svm_steps", "gradient steps per SVM fit"),
    ("probe.softmax_lr", "initial rate of the softmax probe (cosine decayed)"),
    ("probe.softmax_epochs", "full-batch epochs of the softmax probe"),
    ("probe.seed", "probe initialization seed"),
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io(path))?;
        Self::from_toml(&text)
    }

    /// Every leaf as `(dotted key, TOML value)`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    /// Applies `section.key=value`, where value is TOML (bare strings allowed).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} needs a section prefix")))?;
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let table = root
            .get_mut(section)
            .and_then(|s| s.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown section {section:?}")))?;
        if !table.contains_key(field) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        table.insert(field.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.backbone.widths.clone(),
            blocks: self.backbone.blocks.clone(),
            block: self.backbone.block,
            stem: self.backbone.stem,
            image_side: self.data.image_side,
            grid_side: self.backbone.grid_side,
        }
    }

    pub fn head_config(&self, vocab: usize) -> HeadConfig {
        HeadConfig {
            hidden: self.head.hidden,
            layers: self.head.layers,
            heads: self.head.heads,
            feedforward: self.head.feedforward,
            vocab,
            max_positions: self.data.max_len,
            dropout: self.head.dropout,
            allow_nonstandard: self.head.allow_nonstandard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.max_len < 2 {
            return bad(format!("data.max_len {} leaves no room for [SOS]/[EOS]", self.data.max_len));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        let o = &self.optim;
        if !(o.warmup_iters < o.total_iters) {
            return bad(format!("optim.warmup_iters {} must be below total_iters {}", o.warmup_iters, o.total_iters));
        }
        if !(0.0..=1.0).contains(&o.lookahead_alpha) || o.lookahead_k == 0 {
            return bad("lookahead alpha must be in [0,1] and k positive".into());
        }
        if !(self.train.mask_rate > 0.0 && self.train.mask_rate < 1.0) {
            return bad(format!("train.mask_rate {} outside (0,1)", self.train.mask_rate));
        }
        if self.train.eval_period == 0 {
            return bad("train.eval_period must be positive".into());
        }
        self.backbone_config().validate()?;
        self.head_config(RESERVED_PLUS_ONE).validate()?;
        Ok(())
    }
}

const RESERVED_PLUS_ONE: usize = crate::tokenizer::RESERVED.len() + 1;
