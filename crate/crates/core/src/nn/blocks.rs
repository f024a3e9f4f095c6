use super::attention::{AttentionMask, KeyValue, MultiHeadAttention};
use super::layers::{BlockConfig, FeedForward, LayerNorm};
use super::params::{Init, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Self-attention then feed-forward, each as `LayerNorm(x + Dropout(f(x)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderBlock {
    pub fn new(init: &mut Init<'_>, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut init.sub("attn"), cfg)?,
            attn_norm: LayerNorm::new(&mut init.sub("attn_norm"), cfg.d_model)?,
            ffn: FeedForward::new(&mut init.sub("ffn"), cfg.d_model, cfg.d_ffn)?,
            ffn_norm: LayerNorm::new(&mut init.sub("ffn_norm"), cfg.d_model)?,
        })
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, x: Var<'s>, mask: Option<&AttentionMask>) -> Result<Var<'s>> {
        self.forward_queries(s, x, x, mask)
    }

    /// Causally masked self-attention over all rows.
    pub fn forward_causal<'s>(&self, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        self.forward(s, x, Some(&AttentionMask::causal(x.rows())))
    }

    /// Output rows for `queries` only, attending over `inputs` (which must
    /// contain the queries). With a causal block, the last row alone is
    /// `forward_queries(s, last_row, rows_so_far, None)`.
    pub fn forward_queries<'s>(
        &self,
        s: &'s Session<'_>,
        queries: Var<'s>,
        inputs: Var<'s>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'s>> {
        let a = self.attn.forward(s, queries, inputs, mask)?;
        let h = self.attn_norm.forward(s, queries.add(&s.dropout(a)?)?)?;
        let f = self.ffn.forward(s, h)?;
        self.ffn_norm.forward(s, h.add(&s.dropout(f)?)?)
    }
}

/// Masked self-attention, one source-target attention per memory (in the
/// order given), then feed-forward; every sub-layer post-normalized.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub sources: Vec<(MultiHeadAttention, LayerNorm)>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderBlock {
    /// `source_names` names the memories, e.g. `["speech", "context"]`.
    pub fn new(init: &mut Init<'_>, cfg: &BlockConfig, source_names: &[&str]) -> Result<Self> {
        let sources = source_names
            .iter()
            .map(|name| {
                Ok((
                    MultiHeadAttention::new(&mut init.sub(&format!("{name}_attn")), cfg)?,
                    LayerNorm::new(&mut init.sub(&format!("{name}_norm")), cfg.d_model)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut init.sub("self_attn"), cfg)?,
            self_norm: LayerNorm::new(&mut init.sub("self_norm"), cfg.d_model)?,
            sources,
            ffn: FeedForward::new(&mut init.sub("ffn"), cfg.d_model, cfg.d_ffn)?,
            ffn_norm: LayerNorm::new(&mut init.sub("ffn_norm"), cfg.d_model)?,
        })
    }

    /// Projects every memory once for reuse across positions and steps.
    pub fn project_sources<'s>(&self, s: &'s Session<'_>, memories: &[Var<'s>]) -> Result<Vec<KeyValue<'s>>> {
        if memories.len() != self.sources.len() {
            return Err(Error::invalid(format!(
                "decoder block expects {} memories, got {}",
                self.sources.len(),
                memories.len()
            )));
        }
        self.sources
            .iter()
            .zip(memories)
            .map(|((attn, _), &m)| attn.project_kv(s, m))
            .collect()
    }

    /// All positions at once under a causal mask.
    pub fn forward<'s>(&self, s: &'s Session<'_>, x: Var<'s>, sources: &[KeyValue<'s>]) -> Result<Var<'s>> {
        let own = self.self_attn.project_kv(s, x)?;
        let mask = AttentionMask::causal(x.rows());
        let a = self.self_attn.attend(s, x, own, Some(&mask))?.output;
        self.finish(s, x, a, sources)
    }

    /// One new position. `past` holds the self-attention keys/values of the
    /// earlier positions; the returned pair extends it with this one.
    pub fn step<'s>(
        &self,
        s: &'s Session<'_>,
        x: Var<'s>,
        past: Option<KeyValue<'s>>,
        sources: &[KeyValue<'s>],
    ) -> Result<(Var<'s>, KeyValue<'s>)> {
        if x.rows() != 1 {
            return Err(Error::invalid("decoder step takes a single position"));
        }
        let new = self.self_attn.project_kv(s, x)?;
        let kv = match past {
            None => new,
            Some(p) => KeyValue {
                keys: s.graph().concat_rows(&[p.keys, new.keys])?,
                values: s.graph().concat_rows(&[p.values, new.values])?,
            },
        };
        let a = self.self_attn.attend(s, x, kv, None)?.output;
        Ok((self.finish(s, x, a, sources)?, kv))
    }

    fn finish<'s>(&self, s: &'s Session<'_>, x: Var<'s>, a: Var<'s>, sources: &[KeyValue<'s>]) -> Result<Var<'s>> {
        if sources.len() != self.sources.len() {
            return Err(Error::invalid("wrong number of source memories"));
        }
        let mut h = self.self_norm.forward(s, x.add(&s.dropout(a)?)?)?;
        for ((attn, norm), &kv) in self.sources.iter().zip(sources) {
            let c = attn.attend(s, h, kv, None)?.output;
            h = norm.forward(s, h.add(&s.dropout(c)?)?)?;
        }
        let f = self.ffn.forward(s, h)?;
        self.ffn_norm.forward(s, h.add(&s.dropout(f)?)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Probe;
    use crate::nn::check::check_param_grads;
    use crate::nn::params::ParamStore;
    use crate::nn::testutil::random;
    use crate::tensor::{Precision, Tensor};

    fn cfg() -> BlockConfig {
        BlockConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            dropout: 0.0,
        }
    }

    fn encoder() -> (ParamStore, EncoderBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = EncoderBlock::new(&mut Init::new(&mut store, &mut rng), &cfg()).unwrap();
        (store, b)
    }

    fn decoder(sources: &[&str]) -> (ParamStore, DecoderBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = DecoderBlock::new(&mut Init::new(&mut store, &mut rng), &cfg(), sources).unwrap();
        (store, b)
    }

    #[test]
    fn encoder_preserves_shape() {
        let (store, b) = encoder();
        let s = Session::eval(&store, Precision::Verification);
        let y = b.forward(&s, s.constant(random(&[5, 8], 1)), None).unwrap();
        assert_eq!(y.shape(), vec![5, 8]);
    }

    #[test]
    fn masked_encoder_ignores_later_rows() {
        let (store, b) = encoder();
        let s = Session::eval(&store, Precision::Verification);
        let x = random(&[6, 8], 2);
        let base = b.forward_causal(&s, s.constant(x.clone())).unwrap().value();
        for t in 0..5 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[(t + 1) * 8..] {
                *v += 3.0;
            }
            let out = b.forward_causal(&s, s.constant(y)).unwrap().value();
            assert_eq!(out.slice_rows(0, t + 1), base.slice_rows(0, t + 1));
            assert_ne!(out.row(t + 1), base.row(t + 1));
        }
    }

    #[test]
    fn last_row_query_matches_full_pass() {
        let (store, b) = encoder();
        let s = Session::eval(&store, Precision::Verification);
        let x = s.constant(random(&[4, 8], 3));
        let full = b.forward_causal(&s, x).unwrap().value();
        let last = b.forward_queries(&s, x.row(3).unwrap(), x, None).unwrap().value();
        assert!(last.max_abs_diff(&full.slice_rows(3, 1)) < 1e-12);
    }

    #[test]
    fn decoder_steps_match_full_pass() {
        let (store, b) = decoder(&["speech", "context"]);
        let s = Session::eval(&store, Precision::Verification);
        let x = s.constant(random(&[5, 8], 4));
        let mems = [s.constant(random(&[7, 8], 5)), s.constant(random(&[1, 8], 6))];
        let kv = b.project_sources(&s, &mems).unwrap();
        let full = b.forward(&s, x, &kv).unwrap().value();
        let mut past = None;
        for n in 0..5 {
            let (y, p) = b.step(&s, x.row(n).unwrap(), past, &kv).unwrap();
            past = Some(p);
            assert!(y.value().max_abs_diff(&full.slice_rows(n, 1)) < 1e-10);
        }
    }

    #[test]
    fn decoder_with_sentinel_context_is_well_formed() {
        let (store, b) = decoder(&["speech", "context"]);
        let s = Session::eval(&store, Precision::Verification);
        let mems = [s.constant(random(&[3, 8], 7)), s.constant(random(&[1, 8], 8))];
        let kv = b.project_sources(&s, &mems).unwrap();
        let y = b.forward(&s, s.constant(random(&[4, 8], 9)), &kv).unwrap().value();
        assert_eq!(y.shape(), &[4, 8]);
        assert!(y.all_finite());
    }

    #[test]
    fn decoder_future_tokens_do_not_leak() {
        let (store, b) = decoder(&["context"]);
        let s = Session::eval(&store, Precision::Verification);
        let mem = [s.constant(random(&[2, 8], 10))];
        let kv = b.project_sources(&s, &mem).unwrap();
        let x = random(&[4, 8], 11);
        let base = b.forward(&s, s.constant(x.clone()), &kv).unwrap().value();
        let mut y = x;
        y.data_mut()[3 * 8] -= 2.0;
        let out = b.forward(&s, s.constant(y), &kv).unwrap().value();
        assert_eq!(out.slice_rows(0, 3), base.slice_rows(0, 3));
    }

    #[test]
    fn ffn_is_positionwise_and_zero_weights_give_zero() {
        let (mut store, b) = encoder();
        let s = Session::eval(&store, Precision::Verification);
        let x = random(&[3, 8], 12);
        let y = b.ffn.forward(&s, s.constant(x.clone())).unwrap().value();
        let perm = [2, 0, 1];
        let px = Tensor::stack_rows(&perm.map(|i| x.slice_rows(i, 1))).unwrap();
        let py = b.ffn.forward(&s, s.constant(px)).unwrap().value();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(py.row(k), y.row(i));
        }
        drop(s);
        for lin in [&b.ffn.inner, &b.ffn.outer] {
            let w = store.get(lin.weight).shape().to_vec();
            *store.get_mut(lin.weight) = Tensor::zeros(&w);
        }
        let s = Session::eval(&store, Precision::Verification);
        let z = b.ffn.forward(&s, s.constant(x)).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_block_gradients() {
        let (store, b) = encoder();
        let x = random(&[4, 8], 13);
        let t = random(&[4, 8], 14);
        let r = check_param_grads(
            &store,
            |s| b.forward_causal(s, s.constant(x.clone()))?.mul_const(&t)?.sum(),
            Probe::All,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn decoder_block_gradients() {
        let (store, b) = decoder(&["speech", "context"]);
        let x = random(&[3, 8], 15);
        let (m1, m2) = (random(&[4, 8], 16), random(&[2, 8], 17));
        let t = random(&[3, 8], 18);
        let r = check_param_grads(
            &store,
            |s| {
                let kv = b.project_sources(s, &[s.constant(m1.clone()), s.constant(m2.clone())])?;
                b.forward(s, s.constant(x.clone()), &kv)?.mul_const(&t)?.sum()
            },
            Probe::All,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
