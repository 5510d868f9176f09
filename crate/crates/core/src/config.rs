//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `arch` selects a
//! preset (`default` or `compact`) that the architecture keys then override;
//! it must come before them. Recognized keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `arch` | architecture preset |
//! | `strategy` | `co_attention_gated`, `co_attention_ungated`, `merged_attention` |
//! | `fused_layers` | fused layers per backbone |
//! | `alpha_init` | initial gate value |
//! | `text.width`, `text.depth`, `text.heads`, `text.max_len` | text backbone |
//! | `image.patch`, `image.window` | patch and window side |
//! | `image.widths`, `image.depths`, `image.heads` | comma lists per stage |
//! | `embed_dim` | dual-encoder embedding width |
//! | `stage` | `coarse` or `fine` |
//! | `task` | `classify`, `retrieval`, `caption`, `grounding` |
//! | `mlm`, `itm`, `itm_hard`, `itc` | coarse objective toggles |
//! | `lr_backbone`, `lr_cross`, `lr_head` | peak learning rates |
//! | `weight_decay`, `warmup_steps`, `grad_clip` | optimizer |
//! | `steps`, `batch_size`, `seed`, `log_every` | loop |
//! | `data.train`, `data.eval` | dataset files (generated when absent) |
//! | `data.seed`, `data.count` | synthetic dataset used when no file is given |
//! | `caption.variant`, `caption.beam`, `caption.max_len` | captioner |
//! | `classifier.hidden` | classifier width |
//! | `eval.rerank_k`, `eval.mlm_probe`, `eval.itc_probe` | evaluation sizes |
//! | `detect.score_thresh`, `detect.nms_iou` | detection post-processing |

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapters::{CaptionVariant, CaptionerConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Strategy};
use crate::optim::GroupRates;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Retrieval,
    Caption,
    Grounding,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Retrieval => "retrieval",
            Task::Caption => "caption",
            Task::Grounding => "grounding",
        }
    }

    /// Pre-training stage a task's initialization must come from.
    pub fn required_stage(&self) -> Stage {
        match self {
            Task::Grounding => Stage::Fine,
            _ => Stage::Coarse,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "retrieval" => Ok(Task::Retrieval),
            "caption" => Ok(Task::Caption),
            "grounding" => Ok(Task::Grounding),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Coarse objective toggles. `itm_hard` enables matching with hard
/// negatives; `itm` alone uses uniformly drawn in-batch negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub mlm: bool,
    pub itm: bool,
    pub itm_hard: bool,
    pub itc: bool,
}

impl Objectives {
    pub fn any(&self) -> bool {
        self.mlm || self.itm || self.itm_hard || self.itc
    }

    pub fn matching(&self) -> bool {
        self.itm || self.itm_hard
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub arch_preset: String,
    pub arch: FusionConfig,
    pub stage: Stage,
    pub task: Option<Task>,
    pub objectives: Objectives,
    pub rates: GroupRates,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: Option<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    pub data_train: Option<PathBuf>,
    pub data_eval: Option<PathBuf>,
    pub data_seed: u64,
    pub data_count: usize,
    pub caption: CaptionerConfig,
    pub classifier_hidden: usize,
    pub rerank_k: usize,
    pub mlm_probe: usize,
    pub itc_probe: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            arch_preset: "default".into(),
            arch: FusionConfig::default(),
            stage: Stage::Coarse,
            task: None,
            objectives: Objectives {
                mlm: true,
                itm: false,
                itm_hard: true,
                itc: true,
            },
            rates: GroupRates {
                backbone: 1e-3,
                cross_modal: 5e-3,
                head: 1e-3,
            },
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip: Some(5.0),
            steps: 2000,
            batch_size: 16,
            seed: 0,
            log_every: 10,
            data_train: None,
            data_eval: None,
            data_seed: 7,
            data_count: 512,
            caption: CaptionerConfig::default(),
            classifier_hidden: 64,
            rerank_k: 10,
            mlm_probe: 64,
            itc_probe: 16,
            score_thresh: 0.05,
            nms_iou: crate::adapters::detection::DEFAULT_NMS_IOU,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let a = &mut self.arch;
        match k {
            "arch" => {
                let mut fresh = match v {
                    "default" => FusionConfig::default(),
                    "compact" => FusionConfig::compact(),
                    _ => return Err(Error::Config(format!("unknown arch preset `{v}`"))),
                };
                fresh.strategy = a.strategy;
                fresh.alpha_init = a.alpha_init;
                *a = fresh;
                self.arch_preset = v.to_string();
            }
            "strategy" => a.strategy = v.parse()?,
            "fused_layers" => a.fused_layers = parse(k, v)?,
            "alpha_init" => a.alpha_init = parse(k, v)?,
            "text.width" => a.text.width = parse(k, v)?,
            "text.depth" => a.text.depth = parse(k, v)?,
            "text.heads" => a.text.heads = parse(k, v)?,
            "text.max_len" => a.text.max_len = parse(k, v)?,
            "image.patch" => a.image.patch = parse(k, v)?,
            "image.window" => a.image.window = parse(k, v)?,
            "image.widths" => a.image.widths = parse_list(k, v)?,
            "image.depths" => a.image.depths = parse_list(k, v)?,
            "image.heads" => a.image.heads = parse_list(k, v)?,
            "embed_dim" => a.embed_dim = parse(k, v)?,
            "stage" => self.stage = v.parse()?,
            "task" => self.task = Some(v.parse()?),
            "mlm" => self.objectives.mlm = parse_bool(k, v)?,
            "itm" => self.objectives.itm = parse_bool(k, v)?,
            "itm_hard" => self.objectives.itm_hard = parse_bool(k, v)?,
            "itc" => self.objectives.itc = parse_bool(k, v)?,
            "lr_backbone" => self.rates.backbone = parse(k, v)?,
            "lr_cross" => self.rates.cross_modal = parse(k, v)?,
            "lr_head" => self.rates.head = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "warmup_steps" => self.warmup_steps = parse(k, v)?,
            "grad_clip" => {
                self.grad_clip = match v {
                    "none" => None,
                    _ => Some(parse(k, v)?),
                }
            }
            "steps" => self.steps = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "log_every" => self.log_every = parse(k, v)?,
            "data.train" => self.data_train = Some(PathBuf::from(v)),
            "data.eval" => self.data_eval = Some(PathBuf::from(v)),
            "data.seed" => self.data_seed = parse(k, v)?,
            "data.count" => self.data_count = parse(k, v)?,
            "caption.variant" => self.caption.variant = v.parse::<CaptionVariant>()?,
            "caption.beam" => self.caption.beam = parse(k, v)?,
            "caption.max_len" => self.caption.max_len = parse(k, v)?,
            "classifier.hidden" => self.classifier_hidden = parse(k, v)?,
            "eval.rerank_k" => self.rerank_k = parse(k, v)?,
            "eval.mlm_probe" => self.mlm_probe = parse(k, v)?,
            "eval.itc_probe" => self.itc_probe = parse(k, v)?,
            "detect.score_thresh" => self.score_thresh = parse(k, v)?,
            "detect.nms_iou" => self.nms_iou = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.stage == Stage::Coarse && self.task.is_none() && !self.objectives.any() {
            return Err(Error::Config("coarse pre-training needs at least one of mlm, itm, itm_hard, itc".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.caption.beam == 0 {
            return Err(Error::Config("caption.beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("detect.nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces the config.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let o = &self.objectives;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("arch", self.arch_preset.clone());
        kv("strategy", a.strategy.to_string());
        kv("fused_layers", a.fused_layers.to_string());
        kv("alpha_init", a.alpha_init.to_string());
        kv("text.width", a.text.width.to_string());
        kv("text.depth", a.text.depth.to_string());
        kv("text.heads", a.text.heads.to_string());
        kv("text.max_len", a.text.max_len.to_string());
        kv("image.patch", a.image.patch.to_string());
        kv("image.window", a.image.window.to_string());
        kv("image.widths", list(&a.image.widths));
        kv("image.depths", list(&a.image.depths));
        kv("image.heads", list(&a.image.heads));
        kv("embed_dim", a.embed_dim.to_string());
        kv("stage", self.stage.as_str().into());
        if let Some(t) = self.task {
            kv("task", t.as_str().into());
        }
        kv("mlm", o.mlm.to_string());
        kv("itm", o.itm.to_string());
        kv("itm_hard", o.itm_hard.to_string());
        kv("itc", o.itc.to_string());
        kv("lr_backbone", self.rates.backbone.to_string());
        kv("lr_cross", self.rates.cross_modal.to_string());
        kv("lr_head", self.rates.head.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("grad_clip", self.grad_clip.map_or("none".into(), |g| g.to_string()));
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("log_every", self.log_every.to_string());
        if let Some(p) = &self.data_train {
            kv("data.train", p.display().to_string());
        }
        if let Some(p) = &self.data_eval {
            kv("data.eval", p.display().to_string());
        }
        kv("data.seed", self.data_seed.to_string());
        kv("data.count", self.data_count.to_string());
        kv("caption.variant", self.caption.variant.to_string());
        kv("caption.beam", self.caption.beam.to_string());
        kv("caption.max_len", self.caption.max_len.to_string());
        kv("classifier.hidden", self.classifier_hidden.to_string());
        kv("eval.rerank_k", self.rerank_k.to_string());
        kv("eval.mlm_probe", self.mlm_probe.to_string());
        kv("eval.itc_probe", self.itc_probe.to_string());
        kv("detect.score_thresh", self.score_thresh.to_string());
        kv("detect.nms_iou", self.nms_iou.to_string());
        s
    }
}

impl From<Strategy> for Config {
    fn from(strategy: Strategy) -> Self {
        let mut c = Config::default();
        c.arch.strategy = strategy;
        c
    }
}
