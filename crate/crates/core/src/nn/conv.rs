use super::layers::Linear;
use super::params::{Init, ParamId, Session};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

/// Output frame count of the two stride-2 stages: `ceil(ceil(m/2)/2)`.
pub fn subsampled_len(m: usize) -> usize {
    m.div_ceil(2).div_ceil(2)
}

/// Convolutional front end: two stages of (3×3 same conv → ReLU → 2×2 max
/// pool) over the time×frequency plane, then a linear map of every
/// subsampled frame's channel×frequency values to `d`.
#[derive(Clone, Debug)]
pub struct ConvPooling {
    pub stages: [(ParamId, ParamId); 2],
    pub proj: Linear,
    n_feats: usize,
}

impl ConvPooling {
    pub fn new(init: &mut Init<'_>, n_feats: usize, channels: (usize, usize), d: usize) -> Result<Self> {
        if n_feats == 0 || channels.0 == 0 || channels.1 == 0 {
            return Err(Error::invalid("conv front end needs positive sizes"));
        }
        let mut stage = |name: &str, c_in: usize, c_out: usize| -> Result<(ParamId, ParamId)> {
            let mut init = init.sub(name);
            let fan = KERNEL * KERNEL;
            // He-style scaling suits the ReLU that follows.
            let w = init.xavier("weight", &[c_out, c_in, KERNEL, KERNEL], c_in * fan, c_out * fan, 2f64.sqrt())?;
            let b = init.zeros("bias", &[c_out])?;
            Ok((w, b))
        };
        let first = stage("conv1", 1, channels.0)?;
        let second = stage("conv2", channels.0, channels.1)?;
        let f_out = subsampled_len(n_feats);
        Ok(Self {
            stages: [first, second],
            proj: Linear::new(&mut init.sub("proj"), channels.1 * f_out, d)?,
            n_feats,
        })
    }

    pub fn n_feats(&self) -> usize {
        self.n_feats
    }

    /// `M×f` features → `M′×d`.
    pub fn forward<'s>(&self, s: &'s Session<'_>, features: &Tensor) -> Result<Var<'s>> {
        let (out, _) = self.forward_batch(s, &[features])?;
        Ok(out)
    }

    /// Zero-pads the utterances to a common length and encodes them in one
    /// pass. Returns `[B·M′max, d]` (utterance-major) and each utterance's
    /// valid `M′`.
    ///
    /// Time steps past an utterance's end are zeroed after every ReLU, which
    /// reproduces the zero padding seen by an utterance encoded on its own,
    /// so valid rows match unbatched encoding exactly.
    pub fn forward_batch<'s>(&self, s: &'s Session<'_>, batch: &[&Tensor]) -> Result<(Var<'s>, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let f = self.n_feats;
        let mut lens = Vec::with_capacity(batch.len());
        for x in batch {
            if x.rank() != 2 || x.cols() != f {
                return Err(Error::ShapeMismatch {
                    op: "conv front end",
                    lhs: x.shape().to_vec(),
                    rhs: vec![x.rows(), f],
                });
            }
            if x.rows() < 4 {
                return Err(Error::invalid(format!("{} frames; at least 4 required", x.rows())));
            }
            lens.push(x.rows());
        }
        let m_max = *lens.iter().max().expect("nonempty");
        let mut data = vec![0.0; batch.len() * m_max * f];
        for (b, x) in batch.iter().enumerate() {
            data[b * m_max * f..b * m_max * f + x.len()].copy_from_slice(x.data());
        }
        let padded = batch.iter().any(|x| x.rows() != m_max);
        let g = s.graph();
        let mut h = s.constant(Tensor::new(&[batch.len(), 1, m_max, f], data)?);
        for &(w, b) in &self.stages {
            h = g.conv2d(h, s.param(w), s.param(b))?.relu()?;
            if padded {
                h = h.mul_const(&time_mask(&h.shape(), &lens))?;
            }
            h = g.max_pool2d(h)?;
            lens.iter_mut().for_each(|m| *m = m.div_ceil(2));
        }
        let rows = g.channels_to_rows(h)?;
        Ok((self.proj.forward(s, rows)?, lens))
    }
}

/// 1 where the time index is inside the utterance, 0 in its padding.
fn time_mask(shape: &[usize], lens: &[usize]) -> Tensor {
    let (b, c, t, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = vec![0.0; b * c * t * w];
    for (bi, &len) in lens.iter().enumerate() {
        for ci in 0..c {
            let start = (bi * c + ci) * t * w;
            data[start..start + len * w].fill(1.0);
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}
