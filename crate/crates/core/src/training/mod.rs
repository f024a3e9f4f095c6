//! Losses, optimization and the discourse-level training loop.

pub mod augment;
pub mod optim;
pub mod targets;
pub mod teacher;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{spec_augment, SpecAugmentConfig};
pub use optim::{clip_global_norm, inverse_sqrt_lr, RAdam, RAdamConfig};
pub use targets::{nll_loss, onehot, smooth_targets_kd, smooth_targets_label, uniform_non_pad};
pub use teacher::{load_teacher_cache, save_teacher_cache, teacher_distributions, TeacherCache};

use crate::autodiff::Var;
use crate::data::Discourse;
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::model::{shift_right, DiscourseModel, ModelKind};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Precision, Tensor};
use crate::vocab::{Vocabulary, EOS};

/// How per-token training targets are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    /// Ground-truth indicators.
    #[default]
    None,
    /// Mix with a uniform distribution over non-PAD ids (`label_eps`).
    Label,
    /// Mix with a large-context language model's predictions (`alpha`).
    Kd,
    /// Mix with a language model that sees no preceding utterances.
    KdContextFree,
}

impl Smoothing {
    pub fn needs_teacher(self) -> bool {
        matches!(self, Smoothing::Kd | Smoothing::KdContextFree)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub smoothing: Smoothing,
    pub alpha: f64,
    pub label_eps: f64,
    /// Discourse segments per optimizer step.
    pub batch_size: usize,
    /// Lectures are cut into consecutive segments of this many utterances.
    pub max_utterances: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    /// When false every utterance sees only the sentinel context.
    pub use_context: bool,
    pub precision: Precision,
    pub optimizer: RAdamConfig,
    pub spec_augment: SpecAugmentConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::None,
            alpha: 0.5,
            label_eps: 0.1,
            batch_size: 4,
            max_utterances: 50,
            max_epochs: 30,
            max_steps: None,
            patience: 3,
            peak_lr: 1e-3,
            warmup_steps: 200,
            clip_norm: 5.0,
            use_context: true,
            precision: Precision::Verification,
            optimizer: RAdamConfig::default(),
            spec_augment: SpecAugmentConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.label_eps) {
            return Err(Error::invalid("alpha must be in [0, 1] and label_eps in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_utterances == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size, max_utterances and max_epochs must be positive"));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("peak_lr and clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Token ids (ending with EOS) and normalized features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedUtterance {
    pub features: Option<Tensor>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDiscourse {
    pub id: String,
    pub utterances: Vec<PreparedUtterance>,
}

impl PreparedDiscourse {
    pub fn n_tokens(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }
}

/// Encodes transcripts (appending EOS) and, when `stats` is given,
/// normalizes features; without stats the features are dropped.
pub fn prepare(discourses: &[Discourse], vocab: &Vocabulary, stats: Option<&FeatureStats>) -> Result<Vec<PreparedDiscourse>> {
    discourses
        .iter()
        .map(|d| {
            d.validate()?;
            let utterances = d
                .utterances
                .iter()
                .map(|u| {
                    let mut tokens = vocab.encode(&u.text);
                    tokens.push(EOS);
                    let features = stats.map(|s| s.normalize(&u.features)).transpose()?;
                    Ok(PreparedUtterance { features, tokens })
                })
                .collect::<Result<_>>()?;
            Ok(PreparedDiscourse {
                id: d.id.clone(),
                utterances,
            })
        })
        .collect()
}

/// `(discourse, first utterance, count)` windows of at most `max` utterances.
pub fn segments(data: &[PreparedDiscourse], max: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (d, disc) in data.iter().enumerate() {
        let mut start = 0;
        while start < disc.utterances.len() {
            let n = max.min(disc.utterances.len() - start);
            out.push((d, start, n));
            start += n;
        }
    }
    out
}

/// Summed cross-entropy of one segment against per-utterance targets.
///
/// Context memories come from the reference transcripts of the segment's
/// earlier utterances (teacher forcing), or are the sentinel throughout
/// when `use_context` is false.
pub fn segment_loss<'s>(
    s: &'s Session<'_>,
    model: &DiscourseModel,
    utterances: &[PreparedUtterance],
    targets: &[Tensor],
    use_context: bool,
    augment: Option<(&SpecAugmentConfig, &mut ChaCha8Rng)>,
) -> Result<Var<'s>> {
    if utterances.len() != targets.len() || utterances.is_empty() {
        return Err(Error::invalid("one target matrix per utterance required"));
    }
    let mut total: Option<Var<'s>> = None;
    for (logits, target) in segment_logits(s, model, utterances, use_context, augment)?.into_iter().zip(targets) {
        let loss = s.graph().soft_cross_entropy(logits, target)?;
        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Training targets for every utterance, aligned with `data`.
pub fn build_targets(
    data: &[PreparedDiscourse],
    vocab_size: usize,
    cfg: &TrainingConfig,
    teacher: Option<&TeacherCache>,
) -> Result<Vec<Vec<Tensor>>> {
    if cfg.smoothing.needs_teacher() && teacher.is_none() {
        return Err(Error::invalid("distillation targets need teacher distributions"));
    }
    data.iter()
        .map(|d| {
            let teach = teacher
                .filter(|_| cfg.smoothing.needs_teacher())
                .map(|t| {
                    t.lectures
                        .get(&d.id)
                        .ok_or_else(|| Error::Data(format!("no teacher distributions for lecture {}", d.id)))
                })
                .transpose()?;
            d.utterances
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let y = onehot(&u.tokens, vocab_size)?;
                    match cfg.smoothing {
                        Smoothing::None => Ok(y),
                        Smoothing::Label => smooth_targets_label(&y, cfg.label_eps),
                        Smoothing::Kd | Smoothing::KdContextFree => {
                            let q = teach.and_then(|t| t.get(i)).ok_or_else(|| {
                                Error::Data(format!("teacher cache misses utterance {i} of {}", d.id))
                            })?;
                            smooth_targets_kd(&y, q, cfg.alpha)
                        }
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-token training loss (against the training targets).
    pub train_loss: f64,
    /// Mean per-token negative log-likelihood on the validation set.
    pub valid_loss: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// `epoch<TAB>train_loss<TAB>valid_loss<TAB>wall_seconds`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.valid_loss, self.wall_seconds
        )
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub steps: u64,
    pub optimizer: RAdam,
}

/// SplitMix64 finalizer; derives independent stream seeds from a tuple.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Trains `store` in place. Each epoch visits every segment once in a
/// seeded random order; dropout and augmentation streams are keyed by
/// (seed, epoch, lecture, segment) so results do not depend on anything
/// but the seed. With a validation set, training stops after `patience`
/// epochs without improvement and the best epoch's parameters are kept.
pub fn train(
    model: &DiscourseModel,
    store: &mut ParamStore,
    train_set: &[PreparedDiscourse],
    valid_set: &[PreparedDiscourse],
    targets: &[Vec<Tensor>],
    cfg: &TrainingConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || train_set.iter().all(|d| d.utterances.is_empty()) {
        return Err(Error::Data("empty training corpus".into()));
    }
    if targets.len() != train_set.len() {
        return Err(Error::invalid("targets do not match the training set"));
    }
    let segs = segments(train_set, cfg.max_utterances);
    let mut optimizer = RAdam::new(cfg.optimizer, store);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let dropout = model.config.dropout;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order = segs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        let mut budget_hit = false;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
            let mut tokens = 0usize;
            for &(d, start, n) in batch {
                let utts = &train_set[d].utterances[start..start + n];
                let key = [seed, epoch as u64, d as u64, start as u64];
                let s = Session::train(store, cfg.precision, dropout, mix_seed(&key));
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[key[0], key[1], key[2], key[3], 1]));
                let augment = model.speech.is_some().then_some((&cfg.spec_augment, &mut rng));
                let loss = segment_loss(&s, model, utts, &targets[d][start..start + n], cfg.use_context, augment)?;
                loss_sum += loss.value().item();
                tokens += utts.iter().map(|u| u.tokens.len()).sum::<usize>();
                let g = s.graph().backward(loss)?;
                accumulate(&mut grads, s.param_grads(&g));
            }
            token_sum += tokens;
            let scale = 1.0 / tokens as f64;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = inverse_sqrt_lr(optimizer.step + 1, cfg.peak_lr, cfg.warmup_steps);
            optimizer.update(store, &grads, lr)?;
            if cfg.max_steps.is_some_and(|m| optimizer.step >= m) {
                budget_hit = true;
                break;
            }
        }
        let valid_loss = if valid_set.is_empty() {
            f64::NAN
        } else {
            mean_nll(model, store, valid_set, cfg.max_utterances, cfg.use_context, cfg.precision)?
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / token_sum.max(1) as f64,
            valid_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if !m.train_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        on_epoch(&m);
        metrics.push(m);
        if !valid_set.is_empty() {
            match &best {
                Some((b, _, _)) if valid_loss >= *b => {
                    let since = epoch - best.as_ref().expect("set").1;
                    if since >= cfg.patience.max(1) {
                        break 'epochs;
                    }
                }
                _ => best = Some((valid_loss, epoch, store.clone())),
            }
        }
        if budget_hit {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            *store = params;
            e
        }
        None => metrics.len(),
    };
    Ok(TrainOutcome {
        metrics,
        best_epoch,
        steps: optimizer.step,
        optimizer,
    })
}

/// Mean per-token negative log-likelihood of the references, in eval mode.
pub fn mean_nll(
    model: &DiscourseModel,
    store: &ParamStore,
    data: &[PreparedDiscourse],
    max_utterances: usize,
    use_context: bool,
    precision: Precision,
) -> Result<f64> {
    let (mut loss, mut tokens) = (0.0, 0usize);
    for (d, start, n) in segments(data, max_utterances) {
        let utts = &data[d].utterances[start..start + n];
        let targets = utts
            .iter()
            .map(|u| onehot(&u.tokens, model.vocab_size()))
            .collect::<Result<Vec<_>>>()?;
        let s = Session::eval(store, precision);
        loss += segment_loss(&s, model, utts, &targets, use_context, None)?.value().item();
        tokens += utts.iter().map(|u| u.tokens.len()).sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::Data("no tokens to evaluate".into()));
    }
    Ok(loss / tokens as f64)
}

/// Fraction of reference tokens that are the argmax of the teacher-forced
/// next-token distribution (reference contexts).
pub fn teacher_forced_accuracy(
    model: &DiscourseModel,
    store: &ParamStore,
    data: &[PreparedDiscourse],
    max_utterances: usize,
    use_context: bool,
    precision: Precision,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (d, start, n) in segments(data, max_utterances) {
        let utts = &data[d].utterances[start..start + n];
        let s = Session::eval(store, precision);
        for (t, logits) in segment_logits(&s, model, utts, use_context, None)?.into_iter().enumerate() {
            let pred = logits.value().argmax_rows();
            hits += pred.iter().zip(&utts[t].tokens).filter(|(p, r)| p == r).count();
            total += utts[t].tokens.len();
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Teacher-forced logits of every utterance of a segment, optionally
/// with SpecAugment applied to the features.
pub fn segment_logits<'s>(
    s: &'s Session<'_>,
    model: &DiscourseModel,
    utterances: &[PreparedUtterance],
    use_context: bool,
    mut augment: Option<(&SpecAugmentConfig, &mut ChaCha8Rng)>,
) -> Result<Vec<Var<'s>>> {
    let z = if use_context && utterances.len() > 1 {
        let texts: Vec<Vec<usize>> = utterances[..utterances.len() - 1].iter().map(|u| u.tokens.clone()).collect();
        Some(model.context.encode_discourse(s, &texts)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(utterances.len());
    for (t, u) in utterances.iter().enumerate() {
        let mut memories = Vec::with_capacity(2);
        if let Some(speech) = &model.speech {
            let feats = u.features.as_ref().ok_or_else(|| Error::Data("utterance has no features".into()))?;
            let feats = match augment.as_mut() {
                Some((cfg, rng)) if cfg.enabled => spec_augment(feats, cfg, &mut **rng),
                _ => feats.clone(),
            };
            memories.push(speech.encode(s, &feats)?);
        }
        memories.push(match z {
            Some(z) => model.context.memory_at(s, z, t)?,
            None => s.param(model.context.sentinel),
        });
        out.push(model.decoder.logits(s, &shift_right(&u.tokens), &memories)?);
    }
    Ok(out)
}

/// Requires the model kind a routine was written for.
pub(crate) fn expect_kind(model: &DiscourseModel, kind: ModelKind) -> Result<()> {
    if model.kind != kind {
        return Err(Error::invalid(format!("expected a {kind:?} model, got {:?}", model.kind)));
    }
    Ok(())
}
