//! Finite-difference checks of every trainable block at a given model size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradCheckReport, Probe};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::DiscourseModel;
use crate::nn::{
    check_param_grads, AttentionPooling, ConvPooling, DecoderBlock, EncoderBlock, FeedForward, Init, LayerNorm,
    MultiHeadAttention, ParamStore, Session,
};
use crate::tensor::Tensor;
use crate::training::{onehot, segment_loss, PreparedUtterance};
use crate::vocab::EOS;

/// Central-difference step. Larger steps straddle ReLU and max-pool kinks
/// in the convolutional front end at realistic sizes.
pub const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Runs the suite and returns one named report per check. `per_param`
/// coordinates are sampled from every parameter tensor.
pub fn gradient_suite(cfg: &ModelConfig, per_param: usize, tol: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    cfg.validate()?;
    let mut block_cfg = cfg.block();
    block_cfg.dropout = 0.0;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Probe::Sample { per_input: per_param, seed };
    let mut out = Vec::new();

    let x = random(&mut rng, 4, d);
    let mem = random(&mut rng, 5, d);
    let ctx = random(&mut rng, 2, d);
    let weights = random(&mut rng, 4, d);
    let pooled = random(&mut rng, 1, d);

    macro_rules! check {
        ($name:expr, |$init:ident| $build:expr, |$s:ident, $m:ident| $loss:expr) => {{
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
            let $m = {
                let mut $init = Init::new(&mut store, &mut init_rng);
                $build?
            };
            let r = check_param_grads(&store, |$s: &Session<'_>| $loss, probe, STEP, tol)?;
            out.push(($name.to_string(), r));
        }};
    }
    check!("attention", |init| MultiHeadAttention::new(&mut init, &block_cfg), |s, m| m
        .forward(s, s.constant(x.clone()), s.constant(mem.clone()), None)?
        .mul_const(&weights)?
        .sum());
    check!("feed-forward", |init| FeedForward::new(&mut init, d, cfg.d_ffn), |s, m| m
        .forward(s, s.constant(x.clone()))?
        .mul_const(&weights)?
        .sum());
    check!("layer norm", |init| LayerNorm::new(&mut init, d), |s, m| m
        .forward(s, s.constant(x.clone()))?
        .mul_const(&weights)?
        .sum());
    check!("attention pooling", |init| AttentionPooling::new(&mut init, d), |s, m| m
        .forward(s, s.constant(mem.clone()))?
        .mul_const(&pooled)?
        .sum());
    let feats = random(&mut rng, 12, cfg.n_feats);
    let conv_w = random(&mut rng, crate::nn::subsampled_len(12), d);
    let channels = (cfg.conv_channels[0], cfg.conv_channels[1]);
    check!("conv front end", |init| ConvPooling::new(&mut init, cfg.n_feats, channels, d), |s, m| m
        .forward(s, &feats)?
        .mul_const(&conv_w)?
        .sum());
    check!("encoder block", |init| EncoderBlock::new(&mut init, &block_cfg), |s, m| m
        .forward_causal(s, s.constant(x.clone()))?
        .mul_const(&weights)?
        .sum());
    check!("decoder block", |init| DecoderBlock::new(&mut init, &block_cfg, &["speech", "context"]), |s, m| {
        let kv = m.project_sources(s, &[s.constant(mem.clone()), s.constant(ctx.clone())])?;
        m.forward(s, s.constant(x.clone()), &kv)?.mul_const(&weights)?.sum()
    });

    let v = 10;
    let no_dropout = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let utterances: Vec<PreparedUtterance> = (0..3)
        .map(|_| {
            let n = rng.gen_range(2..5);
            let mut tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(4..v)).collect();
            tokens.push(EOS);
            PreparedUtterance {
                features: Some(random(&mut rng, 4 * n, cfg.n_feats)),
                tokens,
            }
        })
        .collect();
    let targets: Vec<Tensor> = utterances.iter().map(|u| onehot(&u.tokens, v)).collect::<Result<_>>()?;
    for (name, asr) in [("recognizer loss", true), ("language model loss", false)] {
        let (model, store) = if asr {
            DiscourseModel::new_asr(&no_dropout, v, seed)?
        } else {
            DiscourseModel::new_lm(&no_dropout, v, seed)?
        };
        let r = check_param_grads(
            &store,
            |s| segment_loss(s, &model, &utterances, &targets, true, None),
            probe,
            STEP,
            tol,
        )?;
        out.push((name.to_string(), r));
    }
    Ok(out)
}
