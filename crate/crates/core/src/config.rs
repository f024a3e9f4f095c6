use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BlockConfig;

/// Architecture hyper-parameters shared by the recognizer and the language
/// model. `Default` is the desk-scale model; [`ModelConfig::full_scale`] is the
/// full-size recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Acoustic feature dimension `f`.
    pub n_feats: usize,
    pub conv_channels: [usize; 2],
    /// Token-level text encoder blocks (K).
    pub token_blocks: usize,
    /// Utterance-level masked encoder blocks (L).
    pub utterance_blocks: usize,
    /// Speech encoder blocks (I).
    pub speech_blocks: usize,
    /// Decoder blocks (J).
    pub decoder_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ffn: 64,
            dropout: 0.1,
            n_feats: 16,
            conv_channels: [32, 32],
            token_blocks: 1,
            utterance_blocks: 1,
            speech_blocks: 2,
            decoder_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            d_ffn: 2048,
            dropout: 0.1,
            n_feats: 120,
            conv_channels: [32, 32],
            token_blocks: 2,
            utterance_blocks: 2,
            speech_blocks: 8,
            decoder_blocks: 6,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        let counts = [
            ("token_blocks", self.token_blocks),
            ("utterance_blocks", self.utterance_blocks),
            ("speech_blocks", self.speech_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("n_feats", self.n_feats),
            ("conv_channels", self.conv_channels[0].min(self.conv_channels[1])),
        ];
        match counts.iter().find(|(_, n)| *n == 0) {
            Some((name, _)) => Err(Error::invalid(format!("{name} must be at least 1"))),
            None => Ok(()),
        }
    }
}
