use super::layers::Linear;
use super::params::{Init, ParamId, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Additive attention pooling: `a = softmax(vᵀ tanh(W·c_n))` over the `N`
/// input rows, output `Σ a_n c_n`.
#[derive(Clone, Debug)]
pub struct AttentionPooling {
    pub proj: Linear,
    pub scorer: ParamId,
}

impl AttentionPooling {
    pub fn new(init: &mut Init<'_>, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_gain(&mut init.sub("proj"), d, d, 1.0, false)?,
            scorer: init.xavier("scorer", &[d, 1], d, 1, 1.0)?,
        })
    }

    /// Pools `N×d` rows into `1×d`; also returns the `1×N` weights.
    pub fn forward_with_weights<'s>(&self, s: &'s Session<'_>, rows: Var<'s>) -> Result<(Var<'s>, Var<'s>)> {
        if rows.rows() == 0 {
            return Err(Error::invalid("attention pooling over an empty sequence"));
        }
        let scores = self
            .proj
            .forward(s, rows)?
            .tanh()?
            .matmul(&s.param(self.scorer))?;
        let weights = scores.t()?.softmax()?;
        Ok((weights.matmul(&rows)?, weights))
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, rows: Var<'s>) -> Result<Var<'s>> {
        Ok(self.forward_with_weights(s, rows)?.0)
    }
}
