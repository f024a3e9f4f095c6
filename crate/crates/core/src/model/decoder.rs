use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{add_pos_enc, DecoderBlock, Embedding, Init, KeyValue, Linear, ParamStore, Session};
use crate::tensor::{Precision, Tensor};
use crate::vocab::{BOS, EOS};

/// Autoregressive token decoder attending over one or more memories.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub embedding: Embedding,
    pub blocks: Vec<DecoderBlock>,
    pub output: Linear,
    vocab_size: usize,
    n_sources: usize,
}

impl TextDecoder {
    /// `sources` names the memories in attention order.
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig, vocab_size: usize, sources: &[&str]) -> Result<Self> {
        let blocks = (0..cfg.decoder_blocks)
            .map(|j| DecoderBlock::new(&mut init.sub(&format!("block{j}")), &cfg.block(), sources))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding: Embedding::new(&mut init.sub("embedding"), vocab_size, cfg.d_model)?,
            blocks,
            // A small output gain keeps the initial distribution near uniform.
            output: Linear::with_gain(&mut init.sub("output"), cfg.d_model, vocab_size, 0.1, true)?,
            vocab_size,
            n_sources: sources.len(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn check_inputs(&self, inputs: &[usize]) -> Result<()> {
        if inputs.first() != Some(&BOS) {
            return Err(Error::invalid("decoder input must start with BOS"));
        }
        if inputs.contains(&EOS) {
            return Err(Error::invalid("decoder input continues past EOS"));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Next-token logits at every position of `inputs` (BOS-prefixed),
    /// `N×|V|`, computed in one causally masked pass.
    pub fn logits<'s>(&self, s: &'s Session<'_>, inputs: &[usize], memories: &[Var<'s>]) -> Result<Var<'s>> {
        self.check_inputs(inputs)?;
        let mut h = add_pos_enc(s, s.dropout(self.embedding.forward(s, inputs)?)?, 0)?;
        for block in &self.blocks {
            let kv = block.project_sources(s, memories)?;
            h = block.forward(s, h, &kv)?;
        }
        self.output.forward(s, h)
    }

    /// Row-wise log-probabilities of the target tokens (`tokens` ending with
    /// EOS, no BOS) under teacher forcing: `N×|V|`.
    pub fn teacher_forced_log_probs(
        &self,
        params: &ParamStore,
        precision: Precision,
        tokens: &[usize],
        memories: &[Tensor],
    ) -> Result<Tensor> {
        if tokens.last() != Some(&EOS) {
            return Err(Error::invalid("target sequence must end with EOS"));
        }
        let s = Session::eval(params, precision);
        let mems: Vec<Var<'_>> = memories.iter().map(|m| s.constant(m.clone())).collect();
        let inputs = shift_right(tokens);
        Ok(log_softmax_rows(&self.logits(&s, &inputs, &mems)?.value()))
    }

    /// Projects the memories for every block once per utterance.
    pub fn prepare_sources(&self, params: &ParamStore, precision: Precision, memories: &[Tensor]) -> Result<SourceCache> {
        let s = Session::eval(params, precision);
        let mems: Vec<Var<'_>> = memories.iter().map(|m| s.constant(m.clone())).collect();
        let layers = self
            .blocks
            .iter()
            .map(|b| {
                Ok(b.project_sources(&s, &mems)?
                    .into_iter()
                    .map(|kv| (kv.keys.value(), kv.values.value()))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(SourceCache { layers })
    }

    /// Feeds one input token and returns log-probabilities of the next
    /// token with the extended state. Only the new position is computed.
    pub fn step(
        &self,
        params: &ParamStore,
        precision: Precision,
        sources: &SourceCache,
        state: &DecoderState,
        token: usize,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        self.check_inputs(&prefix)?;
        if sources.layers.len() != self.blocks.len() || state.layers.len() != self.blocks.len() {
            return Err(Error::invalid("decoder state built for a different decoder"));
        }
        let s = Session::eval(params, precision);
        let n = state.prefix.len();
        let mut h = add_pos_enc(&s, self.embedding.forward(&s, &[token])?, n)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let past = state.layers[j].as_ref().map(|(k, v)| KeyValue {
                keys: s.constant(k.clone()),
                values: s.constant(v.clone()),
            });
            let kv: Vec<KeyValue<'_>> = sources.layers[j]
                .iter()
                .map(|(k, v)| KeyValue {
                    keys: s.constant(k.clone()),
                    values: s.constant(v.clone()),
                })
                .collect();
            let (out, own) = block.step(&s, h, past, &kv)?;
            layers.push(Some((own.keys.value(), own.values.value())));
            h = out;
        }
        let logits = self.output.forward(&s, h)?.value();
        Ok((log_softmax_rows(&logits).into_vec(), DecoderState { prefix, layers }))
    }

    /// Distribution over the next token given a BOS-prefixed prefix,
    /// computed by stepping through the prefix.
    pub fn next_distribution(
        &self,
        params: &ParamStore,
        precision: Precision,
        sources: &SourceCache,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_inputs(prefix)?;
        let mut state = DecoderState::new(self);
        let mut out = Vec::new();
        for &t in prefix {
            let (lp, next) = self.step(params, precision, sources, &state, t)?;
            out = lp;
            state = next;
        }
        Ok(out.into_iter().map(f64::exp).collect())
    }
}

/// Per-block projected keys/values of each memory.
#[derive(Clone, Debug)]
pub struct SourceCache {
    layers: Vec<Vec<(Tensor, Tensor)>>,
}

/// Inputs fed so far plus each block's self-attention keys/values.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub prefix: Vec<usize>,
    layers: Vec<Option<(Tensor, Tensor)>>,
}

impl DecoderState {
    pub fn new(decoder: &TextDecoder) -> Self {
        Self {
            prefix: Vec::new(),
            layers: vec![None; decoder.blocks.len()],
        }
    }
}

/// `[BOS, t_1, …, t_{N−1}]` for targets `[t_1, …, t_N]`.
pub fn shift_right(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(targets[..targets.len().saturating_sub(1)].iter().copied())
        .collect()
}

pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let v = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(v) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}
