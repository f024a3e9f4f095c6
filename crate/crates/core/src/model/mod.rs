//! Recognizer and language model assembled from the encoders and decoder.

pub mod context;
pub mod decoder;
pub mod speech;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use context::{ContextCache, HierarchicalEncoder};
pub use decoder::{log_softmax_rows, shift_right, DecoderState, SourceCache, TextDecoder};
pub use speech::SpeechEncoder;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Init, ParamStore};

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Asr,
    Lm,
}

/// A hierarchical text encoder feeding a decoder, optionally with a speech
/// encoder whose memory the decoder attends to before the context.
#[derive(Clone, Debug)]
pub struct DiscourseModel {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub context: HierarchicalEncoder,
    pub speech: Option<SpeechEncoder>,
    pub decoder: TextDecoder,
}

impl DiscourseModel {
    /// Builds the architecture and registers freshly initialized
    /// parameters in `store` under `context.*`, `speech.*` and `decoder.*`.
    pub fn build(kind: ModelKind, config: &ModelConfig, vocab_size: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let context = HierarchicalEncoder::new(&mut init.sub("context"), config, vocab_size)?;
        let (speech, sources): (_, &[&str]) = match kind {
            ModelKind::Asr => (Some(SpeechEncoder::new(&mut init.sub("speech"), config)?), &["speech", "context"]),
            ModelKind::Lm => (None, &["context"]),
        };
        let decoder = TextDecoder::new(&mut init.sub("decoder"), config, vocab_size, sources)?;
        Ok(Self {
            kind,
            config: config.clone(),
            context,
            speech,
            decoder,
        })
    }

    pub fn new_asr(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::build(ModelKind::Asr, config, vocab_size, &mut store, seed)?;
        Ok((m, store))
    }

    pub fn new_lm(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::build(ModelKind::Lm, config, vocab_size, &mut store, seed)?;
        Ok((m, store))
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }
}
