//! Architecture and optimisation settings with the `paper` and `desk` presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub const fn new(filters: usize, kernel: usize) -> Self {
        Self { filters, kernel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticNetConfig {
    /// `len_C`, including the reserved indices.
    pub num_chars: usize,
    pub char_embed_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub max_word_len: usize,
}

impl SemanticNetConfig {
    /// `len_F`: width of the word vector.
    pub fn output_dim(&self) -> usize {
        self.convs.last().map(|c| c.filters).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::invalid("semantic net needs at least one conv layer"));
        }
        if self.num_chars < 5 || self.char_embed_dim == 0 || self.max_word_len == 0 {
            return Err(Error::invalid("semantic net dimensions must be positive"));
        }
        for w in self.convs.windows(2) {
            if w[1].kernel < w[0].kernel || w[1].filters < w[0].filters {
                return Err(Error::invalid(format!(
                    "conv stack must not shrink kernels or filters: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if self.convs.iter().any(|c| c.filters == 0 || c.kernel == 0) {
            return Err(Error::invalid("conv filters and kernel sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSpellConfig {
    pub semanticnet: SemanticNetConfig,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// `len_P`: top words plus `UNK`.
    pub num_classes: usize,
    pub max_sent_len: usize,
    /// λ, weight of the auxiliary loss. Zero disables the auxiliary head's loss.
    pub aux_weight: f64,
    /// Keep the auxiliary loss on while pretraining.
    pub aux_in_pretraining: bool,
}

impl BSpellConfig {
    pub fn validate(&self) -> Result<()> {
        self.semanticnet.validate()?;
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 || self.ffn_dim == 0 || self.max_sent_len == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.num_classes < 1 {
            return Err(Error::invalid("need at least the UNK class"));
        }
        if !(self.aux_weight == 0.0 || (self.aux_weight > 0.0 && self.aux_weight < 1.0)) {
            return Err(Error::invalid(format!(
                "auxiliary weight {} must be in (0,1), or 0 to disable",
                self.aux_weight
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Rescale all gradients when their global L2 norm exceeds the threshold.
    Norm,
    /// Clamp each gradient entry into `[-clip, clip]`.
    Value,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Self::Norm),
            "value" => Ok(Self::Value),
            _ => Err(Error::invalid(format!("unknown clip mode {s:?} (norm|value)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("lr, clip and batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::invalid(format!("unknown preset {s:?} (paper|desk)"))),
        }
    }
}

impl Preset {
    /// Model config for `num_chars` inventory entries and `num_classes` outputs.
    pub fn model(self, num_chars: usize, num_classes: usize) -> BSpellConfig {
        match self {
            Preset::Paper => BSpellConfig {
                semanticnet: SemanticNetConfig {
                    num_chars,
                    char_embed_dim: 40,
                    convs: vec![
                        ConvSpec::new(64, 2),
                        ConvSpec::new(64, 3),
                        ConvSpec::new(128, 3),
                        ConvSpec::new(128, 3),
                        ConvSpec::new(256, 4),
                    ],
                    max_word_len: 24,
                },
                d_model: 768,
                n_layers: 12,
                n_heads: 12,
                ffn_dim: 768,
                dropout: 0.3,
                num_classes,
                max_sent_len: 32,
                aux_weight: 0.3,
                aux_in_pretraining: true,
            },
            Preset::Desk => BSpellConfig {
                semanticnet: SemanticNetConfig {
                    num_chars,
                    char_embed_dim: 16,
                    convs: vec![
                        ConvSpec::new(16, 2),
                        ConvSpec::new(16, 3),
                        ConvSpec::new(32, 3),
                        ConvSpec::new(32, 3),
                        ConvSpec::new(64, 4),
                    ],
                    max_word_len: 16,
                },
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                ffn_dim: 128,
                dropout: 0.3,
                num_classes,
                max_sent_len: 16,
                aux_weight: 0.3,
                aux_in_pretraining: true,
            },
        }
    }

    pub fn optim(self) -> OptimConfig {
        match self {
            Preset::Paper => OptimConfig {
                lr: 0.001,
                clip: 5.0,
                clip_mode: ClipMode::Norm,
                batch_size: 32,
            },
            Preset::Desk => OptimConfig {
                lr: DESK_LR,
                clip: 5.0,
                clip_mode: ClipMode::Norm,
                batch_size: 32,
            },
        }
    }
}

/// Constant SGD step for the scaled-down preset.
pub const DESK_LR: f64 = 0.1;
