use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{add_pos_enc, posenc, AttentionMask, ConvPooling, EncoderBlock, Init, Session};
use crate::tensor::Tensor;

/// Convolutional subsampling followed by unmasked encoder blocks.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub conv: ConvPooling,
    pub blocks: Vec<EncoderBlock>,
}

impl SpeechEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let channels = (cfg.conv_channels[0], cfg.conv_channels[1]);
        let conv = ConvPooling::new(&mut init.sub("conv"), cfg.n_feats, channels, cfg.d_model)?;
        let blocks = (0..cfg.speech_blocks)
            .map(|i| EncoderBlock::new(&mut init.sub(&format!("block{i}")), &cfg.block()))
            .collect::<Result<_>>()?;
        Ok(Self { conv, blocks })
    }

    /// `M×f` features → `M′×d` memory.
    pub fn encode<'s>(&self, s: &'s Session<'_>, features: &Tensor) -> Result<Var<'s>> {
        let mut h = add_pos_enc(s, s.dropout(self.conv.forward(s, features)?)?, 0)?;
        for block in &self.blocks {
            h = block.forward(s, h, None)?;
        }
        Ok(h)
    }

    /// Encodes several utterances in one padded pass. Attention is
    /// restricted to keys of the same utterance inside its valid length, so
    /// each returned memory equals [`SpeechEncoder::encode`] of that
    /// utterance alone.
    pub fn encode_batch<'s>(&self, s: &'s Session<'_>, batch: &[&Tensor]) -> Result<Vec<Var<'s>>> {
        let (h, lens) = self.conv.forward_batch(s, batch)?;
        let stride = h.rows() / batch.len();
        let d = h.cols();
        let pe = Tensor::stack_rows(&vec![posenc::table(0, stride, d); batch.len()])?;
        let mut h = s.dropout(h)?.add_const(&pe)?;
        let mask = AttentionMask::from_fn(h.rows(), h.rows(), |q, k| {
            q / stride == k / stride && k % stride < lens[k / stride]
        });
        for block in &self.blocks {
            h = block.forward(s, h, Some(&mask))?;
        }
        lens.iter()
            .enumerate()
            .map(|(b, &len)| h.slice_rows(b * stride, len))
            .collect()
    }
}
