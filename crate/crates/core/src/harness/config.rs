//! Declarative experiment configuration: JSON or flat `key = value` lines,
//! with dotted keys (`model.lookahead = 2`) and command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::corpus::TaskSpec;
use crate::decoder::DecoderConfig;
use crate::decoding::DecodingConfig;
use crate::encoder::{Architecture, ConvWindow, EncoderConfig};
use crate::model::ModelConfig;
use crate::streaming::{ChunkSpec, LookaheadSpec, PlanKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanName {
    Full,
    Rsa,
    Csa,
    Dcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub plan: PlanName,
    /// Per-layer look-ahead for RSA, total look-ahead for DCN.
    pub lookahead: usize,
    /// CSA chunk size.
    pub chunk: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Decoder look-ahead past each trigger, in encoder frames.
    pub eps_dec: usize,
    pub dropout: f64,
    /// Conformer convolution width; 0 picks the plan's default.
    pub conv_kernel: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Transformer,
            plan: PlanName::Dcn,
            lookahead: 2,
            chunk: 4,
            d_model: 32,
            d_ff: 128,
            heads: 4,
            encoder_blocks: 4,
            decoder_blocks: 2,
            eps_dec: 4,
            dropout: 0.1,
            conv_kernel: 0,
        }
    }
}

impl ModelSpec {
    pub fn plan_kind(&self) -> Result<PlanKind> {
        Ok(match self.plan {
            PlanName::Full => PlanKind::Full,
            PlanName::Rsa => PlanKind::Rsa(LookaheadSpec::new(self.lookahead)),
            PlanName::Dcn => PlanKind::Dcn(LookaheadSpec::new(self.lookahead)),
            PlanName::Csa => PlanKind::Csa(ChunkSpec::new(self.chunk)?),
        })
    }

    pub fn model_config(&self, input_dim: usize, vocab: usize) -> Result<ModelConfig> {
        let plan = self.plan_kind()?;
        let conv_window = match (self.conv_kernel, plan.is_streaming()) {
            (0, _) => ConvWindow::default_for(&plan),
            (k, true) => ConvWindow::Causal(k),
            (k, false) => ConvWindow::Symmetric(k),
        };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                architecture: self.architecture,
                input_dim,
                d_model: self.d_model,
                d_ff: self.d_ff,
                heads: self.heads,
                blocks: self.encoder_blocks,
                plan,
                conv_window,
                dropout: self.dropout,
            },
            decoder: DecoderConfig {
                vocab,
                d_model: self.d_model,
                d_ff: self.d_ff,
                heads: self.heads,
                blocks: self.decoder_blocks,
                eps_dec: self.eps_dec,
                dropout: self.dropout,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// CTC weight; the decoder gets `1 - gamma`.
    pub gamma: f64,
    /// In-place distillation for dual-stream encoders.
    pub kd: bool,
    pub kd_weight: f64,
    pub warmup: u64,
    pub lr_factor: f64,
    pub epochs: usize,
    pub smoothing: f64,
    pub augment: bool,
    pub batch_size: usize,
    /// Triggered-attention fine-tuning epochs after pre-training.
    pub finetune_epochs: usize,
    /// Constant fine-tuning learning rate.
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            kd: true,
            kd_weight: 1.0,
            warmup: 400,
            lr_factor: 1.0,
            epochs: 20,
            smoothing: 0.1,
            augment: false,
            batch_size: 10,
            finetune_epochs: 10,
            finetune_lr: 1e-3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.batch_size == 0 || self.warmup == 0 {
            return Err(Error::Config("batch size and warmup must be positive".into()));
        }
        if !(self.lr_factor >= 0.0) || !(self.kd_weight >= 0.0) || !(self.finetune_lr >= 0.0) {
            return Err(Error::Config("learning rates and KD weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self { train: 500, test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub corpus: CorpusSizes,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub decoding: DecodingConfig,
    /// Input frame shift in milliseconds (encoder frames are 4x longer).
    pub frame_ms: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            corpus: CorpusSizes::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            decoding: DecodingConfig::default(),
            frame_ms: 10.0,
        }
    }
}

impl ExperimentConfig {
    /// Encoder frame shift after the 4x subsampling frontend.
    pub fn encoder_frame_ms(&self) -> f64 {
        4.0 * self.frame_ms
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.model_config(self.task.input_dim, self.task.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.decoding.validate()?;
        self.model_config().map(|_| ())
    }

    /// Parses JSON (when the text starts with `{`) or `key = value` lines.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(text)?;
            return Self::from_value(v);
        }
        let mut cfg = Self::default();
        let lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect::<Vec<_>>();
        cfg.apply(&lines)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; values are read as JSON when possible
    /// and as strings otherwise.
    pub fn apply<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {o:?}")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
            }
            *slot = value;
        }
        *self = Self::from_value(root)?;
        Ok(())
    }
}
