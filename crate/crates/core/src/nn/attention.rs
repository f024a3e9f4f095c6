use super::layers::{BlockConfig, Linear};
use super::params::{Init, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Boolean query×key matrix; `true` marks an attendable key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows)
            .flat_map(|q| (0..cols).map(move |k| (q, k)))
            .map(|(q, k)| f(q, k))
            .collect();
        Self { rows, cols, allowed }
    }

    /// Entry (q, k) is attendable iff k ≤ q.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    /// Every query may attend the first `valid` keys only.
    pub fn key_padding(rows: usize, cols: usize, valid: usize) -> Self {
        Self::from_fn(rows, cols, |_, k| k < valid)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Errors on the first query row with no attendable key.
    pub fn validate(&self) -> Result<()> {
        match (0..self.rows).find(|&q| (0..self.cols).all(|k| !self.get(q, k))) {
            Some(q) => Err(Error::EmptyAttentionRow(q)),
            None => Ok(()),
        }
    }
}

/// Projected keys and values of a memory, reusable across queries.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue<'s> {
    pub keys: Var<'s>,
    pub values: Var<'s>,
}

pub struct AttentionOutput<'s> {
    pub output: Var<'s>,
    /// Per-head `Q×S` attention weights (before dropout).
    pub weights: Vec<Var<'s>>,
}

/// Scaled dot-product attention over `n_heads` heads with separate
/// query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    n_heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            query: Linear::new(&mut init.sub("query"), d, d)?,
            key: Linear::new(&mut init.sub("key"), d, d)?,
            value: Linear::new(&mut init.sub("value"), d, d)?,
            output: Linear::new(&mut init.sub("output"), d, d)?,
            n_heads: cfg.n_heads,
            d_model: d,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn project_kv<'s>(&self, s: &'s Session<'_>, memory: Var<'s>) -> Result<KeyValue<'s>> {
        Ok(KeyValue {
            keys: self.key.forward(s, memory)?,
            values: self.value.forward(s, memory)?,
        })
    }

    pub fn attend<'s>(
        &self,
        s: &'s Session<'_>,
        queries: Var<'s>,
        kv: KeyValue<'s>,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionOutput<'s>> {
        let (q_len, s_len) = (queries.rows(), kv.keys.rows());
        if queries.cols() != self.d_model || kv.keys.cols() != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: queries.shape(),
                rhs: kv.keys.shape(),
            });
        }
        if let Some(m) = mask {
            if m.rows() != q_len || m.cols() != s_len {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![m.rows(), m.cols()],
                    rhs: vec![q_len, s_len],
                });
            }
        }
        let q = self.query.forward(s, queries)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = kv.keys.slice_cols(h * dh, dh)?;
            let vh = kv.values.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.t()?)?.scale(scale)?;
            let w = scores.masked_softmax(mask.map(AttentionMask::as_slice))?;
            weights.push(w);
            heads.push(s.dropout(w)?.matmul(&vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            s.graph().concat_cols(&heads)?
        };
        Ok(AttentionOutput {
            output: self.output.forward(s, joined)?,
            weights,
        })
    }

    pub fn forward<'s>(
        &self,
        s: &'s Session<'_>,
        queries: Var<'s>,
        memory: Var<'s>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'s>> {
        let kv = self.project_kv(s, memory)?;
        Ok(self.attend(s, queries, kv, mask)?.output)
    }
}
