#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsq_core::training::{PreparedDiscourse, PreparedUtterance};
use dsq_core::vocab::EOS;
use dsq_core::{ModelConfig, Tensor};

/// First id of an ordinary character.
pub const FIRST_CHAR: usize = 4;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_feats: 6,
        conv_channels: [2, 3],
        token_blocks: 1,
        utterance_blocks: 2,
        speech_blocks: 1,
        decoder_blocks: 2,
        ..ModelConfig::default()
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(FIRST_CHAR..vocab)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A lecture of `n` utterances with random text (EOS-terminated) and, when
/// `n_feats` is given, random features of 4 frames per token.
pub fn random_discourse(seed: u64, n: usize, vocab: usize, n_feats: Option<usize>) -> PreparedDiscourse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utterances = (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let mut tokens = random_tokens(&mut rng, len, vocab);
            tokens.push(EOS);
            let features = n_feats.map(|f| random_matrix(&mut rng, 4 * len, f));
            PreparedUtterance { features, tokens }
        })
        .collect();
    PreparedDiscourse {
        id: format!("lecture{seed}"),
        utterances,
    }
}
