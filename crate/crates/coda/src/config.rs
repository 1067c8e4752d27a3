//! Experiment configuration: flat `key = value` text with `#` comments and
//! dotted keys. Unknown keys are hard errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::RowMode;
use crate::checkpoint::crc64;
use crate::data::{SynthKind, Tokenizer};
use crate::model::{Architecture, ModelConfig, VariantKind};
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    LmText,
    Copy,
    Reverse,
    Seq2SeqTsv,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lm_text" => Ok(TaskKind::LmText),
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "seq2seq_tsv" => Ok(TaskKind::Seq2SeqTsv),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LmText => "lm_text",
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Seq2SeqTsv => "seq2seq_tsv",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            TaskKind::LmText => Architecture::Lm,
            _ => Architecture::Seq2Seq,
        }
    }

    pub fn synth_kind(self) -> Option<SynthKind> {
        match self {
            TaskKind::Copy => Some(SynthKind::Copy),
            TaskKind::Reverse => Some(SynthKind::Reverse),
            _ => None,
        }
    }

    pub fn file_backed(self) -> bool {
        matches!(self, TaskKind::LmText | TaskKind::Seq2SeqTsv)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub data_path: Option<PathBuf>,
    pub tokenizer: Tokenizer,
    pub variant: VariantKind,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub alpha: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
    /// Reserved switch for a per-head cascade MLP reading; only `false` is
    /// supported.
    pub cascade_per_head: bool,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub mc_samples: usize,
    pub stop_accuracy: Option<f64>,
    pub synth_count: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub seq_len: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub row_mode: RowMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Copy,
            data_path: None,
            tokenizer: Tokenizer::Char,
            variant: VariantKind::Coda,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            alpha: 2,
            dropout: 0.0,
            vocab: 12,
            max_len: 64,
            tie_embeddings: false,
            cascade_per_head: false,
            batch_size: 16,
            max_steps: 3000,
            eval_interval: 100,
            base_lr: 3e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            label_smoothing: 0.0,
            mc_samples: 1,
            stop_accuracy: None,
            synth_count: 512,
            synth_min_len: 3,
            synth_max_len: 10,
            seq_len: 32,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            row_mode: RowMode::Sum,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = TaskKind::parse(value)?,
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.tokenizer" => self.tokenizer = Tokenizer::parse(value)?,
            "model.variant" => self.variant = VariantKind::parse(value)?,
            "model.layers" => self.layers = parse_num(key, value)?,
            "model.heads" => self.heads = parse_num(key, value)?,
            "model.d_model" => self.d_model = parse_num(key, value)?,
            "model.d_ff" => self.d_ff = parse_num(key, value)?,
            "model.alpha" => self.alpha = parse_num(key, value)?,
            "model.dropout" => self.dropout = parse_num(key, value)?,
            "model.vocab" => self.vocab = parse_num(key, value)?,
            "model.max_len" => self.max_len = parse_num(key, value)?,
            "model.tie_embeddings" => self.tie_embeddings = parse_bool(key, value)?,
            "model.cascade_per_head" => {
                self.cascade_per_head = parse_bool(key, value)?;
                if self.cascade_per_head {
                    return Err(Error::Config(
                        "model.cascade_per_head = true is reserved but not implemented".into(),
                    ));
                }
            }
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.max_steps" => self.max_steps = parse_num(key, value)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, value)?,
            "train.base_lr" => self.base_lr = parse_num(key, value)?,
            "train.warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "train.clip_norm" => self.clip_norm = parse_num(key, value)?,
            "train.label_smoothing" => self.label_smoothing = parse_num(key, value)?,
            "train.mc_samples" => self.mc_samples = parse_num(key, value)?,
            "train.stop_accuracy" => self.stop_accuracy = Some(parse_num(key, value)?),
            "synth.count" => self.synth_count = parse_num(key, value)?,
            "synth.min_len" => self.synth_min_len = parse_num(key, value)?,
            "synth.max_len" => self.synth_max_len = parse_num(key, value)?,
            "lm.seq_len" => self.seq_len = parse_num(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num("seeds", s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "analysis.row_mode" => self.row_mode = RowMode::parse(value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.task.file_backed() {
            let path = self.data_path.as_ref().ok_or_else(|| {
                Error::Config(format!("task {} requires data.path", self.task.name()))
            })?;
            if !path.exists() {
                return Err(Error::Config(format!(
                    "data.path {} does not exist",
                    path.display()
                )));
            }
        }
        self.model_config(self.vocab).validate()
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            architecture: self.task.architecture(),
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            alpha: self.alpha,
            dropout: self.dropout,
            vocab,
            max_len: self.max_len,
            seed: self.seeds[0],
            cascade_slope: 0.01,
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            label_smoothing: self.label_smoothing,
            mc_samples: self.mc_samples,
            ..TrainConfig::default()
        }
    }

    /// Canonical rendering: every key in a fixed order, used for the config
    /// hash in analysis reports.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task.name());
        if let Some(p) = &self.data_path {
            let _ = writeln!(s, "data.path = {}", p.display());
        }
        let _ = writeln!(s, "model.variant = {}", self.variant.name());
        let _ = writeln!(s, "model.layers = {}", self.layers);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.d_model = {}", self.d_model);
        let _ = writeln!(s, "model.d_ff = {}", self.d_ff);
        let _ = writeln!(s, "model.alpha = {}", self.alpha);
        let _ = writeln!(s, "model.dropout = {}", self.dropout);
        let _ = writeln!(s, "model.vocab = {}", self.vocab);
        let _ = writeln!(s, "model.max_len = {}", self.max_len);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.max_steps = {}", self.max_steps);
        let _ = writeln!(s, "train.base_lr = {}", self.base_lr);
        let _ = writeln!(s, "train.label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "synth.count = {}", self.synth_count);
        let _ = writeln!(s, "synth.min_len = {}", self.synth_min_len);
        let _ = writeln!(s, "synth.max_len = {}", self.synth_max_len);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        s
    }

    pub fn hash(&self) -> u64 {
        crc64(self.canonical_string().as_bytes())
    }
}
