use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Shared transformer block hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("d_model must be even for sinusoidal positions"));
        }
        if self.d_ffn == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("d_ffn must be positive and dropout in [0, 1)"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_gain(init, d_in, d_out, 1.0, true)
    }

    pub fn with_gain(init: &mut Init<'_>, d_in: usize, d_out: usize, gain: f64, bias: bool) -> Result<Self> {
        let weight = init.xavier("weight", &[d_in, d_out], d_in, d_out, gain)?;
        let bias = if bias {
            Some(init.zeros("bias", &[1, d_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let y = x.matmul(&s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(&s.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.ones("gain", &[1, d])?,
            bias: init.zeros("bias", &[1, d])?,
        })
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        x.layer_norm(&s.param(self.gain), &s.param(self.bias))
    }
}

/// Token embedding table, `|V|×d`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, vocab: usize, d: usize) -> Result<Self> {
        Ok(Self {
            table: init.normal("table", &[vocab, d], 1.0)?,
        })
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, ids: &[usize]) -> Result<Var<'s>> {
        s.graph().embedding(s.param(self.table), ids)
    }
}

/// Position-wise feed-forward network: Linear → GELU → Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, d_model: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(&mut init.sub("inner"), d_model, d_ffn)?,
            outer: Linear::new(&mut init.sub("outer"), d_ffn, d_model)?,
        })
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let h = self.inner.forward(s, x)?.gelu()?;
        self.outer.forward(s, h)
    }
}
