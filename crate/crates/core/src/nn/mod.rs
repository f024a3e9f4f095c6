//! Transformer building blocks on top of the autodiff graph.

pub mod attention;
pub mod blocks;
pub mod check;
pub mod conv;
pub mod layers;
pub mod params;
pub mod pooling;
pub mod posenc;

pub use attention::{AttentionMask, KeyValue, MultiHeadAttention};
pub use blocks::{DecoderBlock, EncoderBlock};
pub use check::check_param_grads;
pub use conv::{subsampled_len, ConvPooling};
pub use layers::{BlockConfig, Embedding, FeedForward, LayerNorm, Linear};
pub use params::{Init, ParamId, ParamStore, Session};
pub use pooling::AttentionPooling;
pub use posenc::add_pos_enc;

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    /// Uniform entries in [-1, 1).
    pub fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }
}
