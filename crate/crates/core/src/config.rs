//! Model, training and decoding configuration.
//!
//! Everything serializes to JSON; the same JSON is embedded in checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::AugmentPolicy;
use crate::tokens::TokenInventory;

/// Per-layer self-attention window. `None` on a side means no truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionContext {
    pub left: Option<usize>,
    pub right: Option<usize>,
}

impl AttentionContext {
    pub const UNLIMITED: AttentionContext = AttentionContext {
        left: None,
        right: None,
    };

    pub fn new(left: usize, right: usize) -> Self {
        Self {
            left: Some(left),
            right: Some(right),
        }
    }

    /// Decodes the serialized form where `-1` is unlimited.
    pub fn from_signed(left: i64, right: i64) -> Result<Self> {
        let side = |v: i64| match v {
            -1 => Ok(None),
            v if v >= 0 => Ok(Some(v as usize)),
            v => Err(Error::Config(format!("context value {v} must be >= -1"))),
        };
        Ok(Self {
            left: side(left)?,
            right: side(right)?,
        })
    }

    pub fn to_signed(self) -> (i64, i64) {
        let enc = |v: Option<usize>| v.map_or(-1, |v| v as i64);
        (enc(self.left), enc(self.right))
    }

    pub fn is_finite(&self) -> bool {
        self.left.is_some() && self.right.is_some()
    }

    /// Key range `[lo, hi)` visible to query `t` in a sequence of length `len`.
    pub fn window(&self, t: usize, len: usize) -> (usize, usize) {
        let lo = self.left.map_or(0, |l| t.saturating_sub(l));
        let hi = self.right.map_or(len, |r| (t + r + 1).min(len));
        (lo, hi)
    }
}

impl std::fmt::Display for AttentionContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = |v: Option<usize>| v.map_or("inf".to_string(), |v| v.to_string());
        write!(f, "({}, {})", side(self.left), side(self.right))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggBlockConfig {
    pub out_channels: usize,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub pool_time: usize,
    pub pool_freq: usize,
    pub num_conv_layers: usize,
}

impl VggBlockConfig {
    pub fn new(out_channels: usize, pool_time: usize, pool_freq: usize) -> Self {
        Self {
            out_channels,
            kernel_time: 3,
            kernel_freq: 3,
            pool_time,
            pool_freq,
            num_conv_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub blocks: Vec<VggBlockConfig>,
    pub proj_out: usize,
}

impl FrontendConfig {
    /// Product of time pooling over all blocks.
    pub fn time_reduction(&self) -> usize {
        self.blocks.iter().map(|b| b.pool_time).product()
    }

    /// Frequency bins left after all blocks for `in_dim` input bins.
    pub fn output_freq(&self, in_dim: usize) -> usize {
        self.blocks.iter().fold(in_dim, |f, b| f.div_ceil(b.pool_freq))
    }

    /// Width of the flattened conv output feeding the projection.
    pub fn flat_dim(&self, in_dim: usize) -> usize {
        self.blocks.last().map_or(1, |b| b.out_channels) * self.output_freq(in_dim)
    }

    /// Frames produced for `t` input frames.
    pub fn output_len(&self, t: usize) -> usize {
        self.blocks.iter().fold(t, |t, b| t.div_ceil(b.pool_time))
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.blocks {
            if b.kernel_time == 0 || b.kernel_freq == 0 || b.kernel_freq % 2 == 0 {
                return Err(Error::Config(format!(
                    "kernel {}×{} must be positive with odd frequency extent",
                    b.kernel_time, b.kernel_freq
                )));
            }
            if b.pool_time == 0 || b.pool_freq == 0 || b.num_conv_layers == 0 || b.out_channels == 0 {
                return Err(Error::Config("pooling, channels and layer counts must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Which attention kernel the encoder uses. Both compute the same function;
/// `Dense` materializes the full masked score matrix and serves as a
/// reference, `Windowed` touches only the allowed pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    #[default]
    Windowed,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_in: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// `-1` encodes unlimited.
    pub context_left: i64,
    pub context_right: i64,
    /// Optional per-layer `(left, right)` overriding the shared pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_contexts: Option<Vec<(i64, i64)>>,
    #[serde(default)]
    pub kernel: AttentionKernel,
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_in / self.heads
    }

    pub fn contexts(&self) -> Result<Vec<AttentionContext>> {
        match &self.layer_contexts {
            Some(per) => {
                if per.len() != self.num_layers {
                    return Err(Error::Config(format!(
                        "{} layer contexts for {} layers",
                        per.len(),
                        self.num_layers
                    )));
                }
                per.iter().map(|&(l, r)| AttentionContext::from_signed(l, r)).collect()
            }
            None => {
                let c = AttentionContext::from_signed(self.context_left, self.context_right)?;
                Ok(vec![c; self.num_layers])
            }
        }
    }

    pub fn set_context(&mut self, ctx: AttentionContext) {
        let (l, r) = ctx.to_signed();
        self.context_left = l;
        self.context_right = r;
        self.layer_contexts = None;
    }

    /// Total right context over all layers, `None` if any layer is unlimited.
    pub fn total_lookahead(&self) -> Result<Option<usize>> {
        Ok(self
            .contexts()?
            .iter()
            .map(|c| c.right)
            .try_fold(0usize, |acc, r| r.map(|r| acc + r)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_in % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_in {} not divisible by {} heads",
                self.d_in, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.contexts().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    Lstm {
        embed_dim: usize,
        hidden: usize,
        num_layers: usize,
    },
    /// Causal VGG-Transformer over the label history (no pooling, `R = 0`).
    Transformer {
        embed_dim: usize,
        frontend: FrontendConfig,
        encoder: EncoderConfig,
    },
}

impl PredictorConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            PredictorConfig::Lstm { hidden, .. } => *hidden,
            PredictorConfig::Transformer { encoder, .. } => encoder.d_in,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            PredictorConfig::Lstm { embed_dim, .. } | PredictorConfig::Transformer { embed_dim, .. } => {
                *embed_dim
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinerConfig {
    pub d_joint: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub joiner: JoinerConfig,
    pub tokens: TokenInventory,
}

impl ModelConfig {
    /// Full-size architecture: 2 causal VGG blocks (64 kernels, 3×3), 12
    /// Transformer layers at 512/8/2048, LSTM 2×700 predictor with 128-dim
    /// embeddings, joiner width 640, 256 output symbols.
    pub fn full_scale() -> Self {
        Self {
            feat_dim: 80,
            frontend: FrontendConfig {
                blocks: vec![VggBlockConfig::new(64, 3, 2), VggBlockConfig::new(64, 2, 2)],
                proj_out: 512,
            },
            encoder: EncoderConfig {
                num_layers: 12,
                d_in: 512,
                heads: 8,
                d_ff: 2048,
                dropout: 0.1,
                context_left: 32,
                context_right: 4,
                layer_contexts: None,
                kernel: AttentionKernel::Windowed,
            },
            predictor: PredictorConfig::Lstm {
                embed_dim: 128,
                hidden: 700,
                num_layers: 2,
            },
            joiner: JoinerConfig { d_joint: 640 },
            tokens: TokenInventory::placeholder(256),
        }
    }

    /// The `Transformer 6x` predictor variant of the full-size model.
    pub fn full_scale_transformer_predictor() -> Self {
        let base = Self::full_scale();
        let mut enc = base.encoder.clone();
        enc.num_layers = 6;
        enc.context_left = -1;
        enc.context_right = 0;
        Self {
            predictor: PredictorConfig::Transformer {
                embed_dim: 128,
                frontend: FrontendConfig {
                    blocks: vec![VggBlockConfig::new(64, 1, 1)],
                    proj_out: 512,
                },
                encoder: enc,
            },
            ..base
        }
    }

    /// Laptop-sized model for the synthetic tasks: 4 layers at width 128,
    /// 16 output symbols.
    pub fn desk_scale() -> Self {
        Self {
            feat_dim: 80,
            frontend: FrontendConfig {
                blocks: vec![VggBlockConfig::new(8, 3, 2), VggBlockConfig::new(8, 2, 2)],
                proj_out: 128,
            },
            encoder: EncoderConfig {
                num_layers: 4,
                d_in: 128,
                heads: 4,
                d_ff: 512,
                dropout: 0.1,
                context_left: 32,
                context_right: 4,
                layer_contexts: None,
                kernel: AttentionKernel::Windowed,
            },
            predictor: PredictorConfig::Lstm {
                embed_dim: 32,
                hidden: 128,
                num_layers: 2,
            },
            joiner: JoinerConfig { d_joint: 128 },
            tokens: TokenInventory::tone_digits(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        if self.frontend.proj_out != self.encoder.d_in {
            return Err(Error::Config(format!(
                "frontend projects to {} but encoder expects {}",
                self.frontend.proj_out, self.encoder.d_in
            )));
        }
        if let PredictorConfig::Transformer { frontend, encoder, .. } = &self.predictor {
            frontend.validate()?;
            encoder.validate()?;
            if frontend.time_reduction() != 1 {
                return Err(Error::Config("transformer predictor must not pool over time".into()));
            }
            if encoder.contexts()?.iter().any(|c| c.right != Some(0)) {
                return Err(Error::Config("transformer predictor needs right context 0".into()));
            }
            if frontend.proj_out != encoder.d_in {
                return Err(Error::Config("predictor frontend/encoder width mismatch".into()));
            }
        }
        if self.tokens.len() < 2 {
            return Err(Error::Config("token inventory needs blank plus one symbol".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 200,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            seed: 1,
            optimizer: OptimizerConfig::default(),
            augment: None,
        }
    }
}

/// Synthetic corpus description used when no manifest is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataConfig {
    pub task: crate::features::SynthTask,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_cache: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthDataConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_symbols_per_frame: usize,
    /// Overrides the trained `(left, right)` at decode time (`-1` unlimited).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_override: Option<(i64, i64)>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            max_symbols_per_frame: 10,
            context_override: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk_scale(),
            train: TrainConfig {
                steps: 800,
                optimizer: OptimizerConfig {
                    peak_lr: 2e-3,
                    ..OptimizerConfig::default()
                },
                ..TrainConfig::default()
            },
            data: DataConfig {
                synth: Some(SynthDataConfig {
                    task: crate::features::SynthTask::ToneDigits,
                    train_utterances: 2000,
                    test_utterances: 100,
                    max_tokens: 6,
                    seed: 7,
                }),
                ..DataConfig::default()
            },
            decode: DecodeConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            model: ModelConfig::full_scale(),
            train: TrainConfig {
                optimizer: OptimizerConfig {
                    warmup_steps: 4000,
                    ..OptimizerConfig::default()
                },
                augment: Some(AugmentPolicy::ld()),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            decode: DecodeConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Flags a decode-time context wider than the training context; such
    /// mismatches are allowed for experiments but never silent.
    pub fn context_mismatch_warning(&self) -> Option<String> {
        let (l, r) = self.decode.context_override?;
        let wider = |d: i64, t: i64| t != -1 && (d == -1 || d > t);
        if wider(l, self.model.encoder.context_left) || wider(r, self.model.encoder.context_right) {
            Some(format!(
                "decode context ({l}, {r}) exceeds training context ({}, {})",
                self.model.encoder.context_left, self.model.encoder.context_right
            ))
        } else {
            None
        }
    }
}
