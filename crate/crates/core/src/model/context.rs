use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{add_pos_enc, AttentionPooling, Embedding, EncoderBlock, Init, ParamId, ParamStore, Session};
use crate::tensor::{Precision, Tensor};

/// Two-level text encoder: token blocks pooled to one vector per
/// utterance, then causally masked blocks across utterances.
#[derive(Clone, Debug)]
pub struct HierarchicalEncoder {
    pub embedding: Embedding,
    pub token_blocks: Vec<EncoderBlock>,
    pub pooling: AttentionPooling,
    pub utterance_blocks: Vec<EncoderBlock>,
    /// Stand-in memory for an empty history.
    pub sentinel: ParamId,
    vocab_size: usize,
}

impl HierarchicalEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let block = cfg.block();
        let token_blocks = (0..cfg.token_blocks)
            .map(|k| EncoderBlock::new(&mut init.sub(&format!("token{k}")), &block))
            .collect::<Result<_>>()?;
        let utterance_blocks = (0..cfg.utterance_blocks)
            .map(|l| EncoderBlock::new(&mut init.sub(&format!("utterance{l}")), &block))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding: Embedding::new(&mut init.sub("embedding"), vocab_size, cfg.d_model)?,
            token_blocks,
            pooling: AttentionPooling::new(&mut init.sub("pooling"), cfg.d_model)?,
            utterance_blocks,
            sentinel: init.normal("sentinel", &[1, cfg.d_model], 1.0)?,
            vocab_size,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.utterance_blocks.len()
    }

    /// Utterance vector `S` (1×d) of one token sequence.
    pub fn encode_utterance<'s>(&self, s: &'s Session<'_>, tokens: &[usize]) -> Result<Var<'s>> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty utterance"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let mut h = add_pos_enc(s, s.dropout(self.embedding.forward(s, tokens)?)?, 0)?;
        for block in &self.token_blocks {
            h = block.forward(s, h, None)?;
        }
        self.pooling.forward(s, h)
    }

    /// Runs the masked utterance-level blocks over stacked utterance vectors
    /// (`T×d`, row `j` = utterance `j`), returning `Z^(L)` with the same
    /// shape.
    pub fn contextualize<'s>(&self, s: &'s Session<'_>, vectors: Var<'s>) -> Result<Var<'s>> {
        let mut z = add_pos_enc(s, vectors, 0)?;
        for block in &self.utterance_blocks {
            z = block.forward_causal(s, z)?;
        }
        Ok(z)
    }

    /// `Z^(L)` for a whole discourse (`T×d`).
    pub fn encode_discourse<'s>(&self, s: &'s Session<'_>, texts: &[Vec<usize>]) -> Result<Var<'s>> {
        if texts.is_empty() {
            return Err(Error::invalid("empty discourse"));
        }
        let rows = texts
            .iter()
            .map(|t| self.encode_utterance(s, t))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if rows.len() == 1 { rows[0] } else { s.graph().concat_rows(&rows)? };
        self.contextualize(s, stacked)
    }

    /// Memory seen by utterance `t` (0-based) given the discourse's full
    /// `Z^(L)`: its first `t` rows, or the sentinel when `t == 0`.
    pub fn memory_at<'s>(&self, s: &'s Session<'_>, z: Var<'s>, t: usize) -> Result<Var<'s>> {
        if t == 0 {
            Ok(s.param(self.sentinel))
        } else {
            z.slice_rows(0, t)
        }
    }
}

/// Per-discourse history, stored as plain tensors so that it can outlive
/// the graph that produced it. `levels[0]` holds the position-encoded
/// utterance vectors, `levels[l]` the outputs of utterance block `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    vectors: Vec<Tensor>,
    levels: Vec<Vec<Tensor>>,
}

impl ContextCache {
    pub fn new(encoder: &HierarchicalEncoder) -> Self {
        Self {
            vectors: Vec::new(),
            levels: vec![Vec::new(); encoder.n_layers() + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Utterance vector `S_j`.
    pub fn vector(&self, j: usize) -> &Tensor {
        &self.vectors[j]
    }

    /// `Z^(l)_j`, with `l = 0` the position-encoded input.
    pub fn state(&self, l: usize, j: usize) -> &Tensor {
        &self.levels[l][j]
    }

    /// Encodes `tokens` and appends it as the next utterance.
    pub fn append(
        &mut self,
        encoder: &HierarchicalEncoder,
        params: &ParamStore,
        precision: Precision,
        tokens: &[usize],
    ) -> Result<()> {
        let s = Session::eval(params, precision);
        let v = encoder.encode_utterance(&s, tokens)?.value();
        self.append_vector(encoder, params, precision, v)
    }

    /// Appends an already computed utterance vector. Only the new row is
    /// computed at each level; earlier rows are never touched.
    pub fn append_vector(
        &mut self,
        encoder: &HierarchicalEncoder,
        params: &ParamStore,
        precision: Precision,
        vector: Tensor,
    ) -> Result<()> {
        if self.levels.len() != encoder.n_layers() + 1 {
            return Err(Error::invalid("context cache built for a different encoder"));
        }
        let s = Session::eval(params, precision);
        let t = self.len();
        let mut row = add_pos_enc(&s, s.constant(vector.clone()), t)?;
        let mut new_rows = vec![row.value()];
        for (l, block) in encoder.utterance_blocks.iter().enumerate() {
            let mut inputs = self.levels[l].clone();
            inputs.push(row.value());
            let inputs = s.constant(Tensor::stack_rows(&inputs)?);
            row = block.forward_queries(&s, row, inputs, None)?;
            new_rows.push(row.value());
        }
        self.vectors.push(vector);
        for (level, r) in self.levels.iter_mut().zip(new_rows) {
            level.push(r);
        }
        Ok(())
    }

    /// `Z^(L)` rows of the history so far (`(t−1)×d`), or the sentinel
    /// (`1×d`) when the history is empty.
    pub fn memory(&self, encoder: &HierarchicalEncoder, params: &ParamStore) -> Result<Tensor> {
        match self.levels.last() {
            Some(top) if !top.is_empty() => Tensor::stack_rows(top),
            _ => Ok(params.get(encoder.sentinel).clone()),
        }
    }
}
