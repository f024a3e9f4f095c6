use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
    pub max_freq_width: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_freq_masks: 2,
            n_time_masks: 2,
            max_freq_width: 20,
            max_time_width: 100,
        }
    }
}

/// Zeroes random frequency bands and time spans of an `M×f` matrix. Widths
/// are uniform in `0..=max` and clipped to the matrix.
pub fn spec_augment(x: &Tensor, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Tensor {
    let (m, f) = (x.rows(), x.cols());
    let mut out = x.clone();
    let data = out.data_mut();
    for _ in 0..cfg.n_freq_masks {
        let w = rng.gen_range(0..=cfg.max_freq_width).min(f);
        let start = rng.gen_range(0..=f - w);
        for r in 0..m {
            data[r * f + start..r * f + start + w].fill(0.0);
        }
    }
    for _ in 0..cfg.n_time_masks {
        let w = rng.gen_range(0..=cfg.max_time_width).min(m);
        let start = rng.gen_range(0..=m - w);
        data[start * f..(start + w) * f].fill(0.0);
    }
    out
}
