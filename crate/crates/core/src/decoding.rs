//! Beam search per utterance and recursive decoding of whole lectures.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Transcripts;
use crate::error::{Error, Result};
use crate::model::{ContextCache, DecoderState, DiscourseModel, ModelKind, SourceCache};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Precision, Tensor};
use crate::training::PreparedDiscourse;
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

/// Where the text fed to the context encoder comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The recognizer's own 1-best output.
    #[default]
    Hypothesis,
    /// The reference transcript.
    Oracle,
    /// No history: the sentinel for every utterance.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Cap on output tokens per utterance, EOS included.
    pub max_len: usize,
    /// Rank by log-probability per output token instead of the sum.
    pub length_norm: bool,
    pub context: ContextMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 100,
            length_norm: false,
            context: ContextMode::Hypothesis,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::invalid("beam_size and max_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// BOS followed by the emitted tokens (EOS last when finished).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    pub state: S,
}

impl<S> Hypothesis<S> {
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / (self.tokens.len() - 1).max(1) as f64
        } else {
            self.log_prob
        }
    }

    /// Emitted tokens without BOS and EOS.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Debug)]
pub struct BeamOutput<S> {
    /// Best first. Finished hypotheses only, unless none finished.
    pub ranked: Vec<Hypothesis<S>>,
    /// True when no hypothesis emitted EOS within `max_len`.
    pub unfinished: bool,
}

/// Higher score first; equal scores go to the lexicographically smaller
/// token sequence, i.e. the lower token id at the first difference.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search with a finished pool. `step(state, token)` feeds `token`
/// and returns next-token log-probabilities with the new state. Tokens in
/// `banned` are never emitted.
pub fn beam_search<S: Clone>(
    mut step: impl FnMut(&S, usize) -> Result<(Vec<f64>, S)>,
    initial: S,
    eos: usize,
    banned: &[usize],
    cfg: &DecodeConfig,
) -> Result<BeamOutput<S>> {
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
        state: initial,
    }];
    let mut finished: Vec<Hypothesis<S>> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (i, h) in live.iter().enumerate() {
            let (log_probs, state) = step(&h.state, *h.tokens.last().expect("BOS"))?;
            if log_probs.len() <= eos || banned.iter().any(|&b| b >= log_probs.len()) {
                return Err(Error::invalid("step returned too few log-probabilities"));
            }
            if banned.len() >= log_probs.len() {
                return Err(Error::invalid("every token is banned"));
            }
            states.push(state);
            for (tok, &lp) in log_probs.iter().enumerate() {
                if banned.contains(&tok) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push((h.log_prob + lp, tokens, i));
            }
        }
        let score = |c: &(f64, Vec<usize>, usize)| {
            if cfg.length_norm {
                c.0 / (c.1.len() - 1) as f64
            } else {
                c.0
            }
        };
        candidates.sort_by(|a, b| rank((score(a), &a.1), (score(b), &b.1)));
        candidates.truncate(cfg.beam_size);
        live = Vec::with_capacity(candidates.len());
        for (log_prob, tokens, parent) in candidates {
            let done = *tokens.last().expect("nonempty") == eos;
            let h = Hypothesis {
                tokens,
                log_prob,
                finished: done,
                state: states[parent].clone(),
            };
            if done {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let unfinished = finished.is_empty();
    let mut ranked = if unfinished { live } else { finished };
    ranked.sort_by(|a, b| rank((a.score(cfg.length_norm), &a.tokens), (b.score(cfg.length_norm), &b.tokens)));
    Ok(BeamOutput { ranked, unfinished })
}

/// Decoder step function over precomputed source projections.
pub fn decoder_stepper<'a>(
    model: &'a DiscourseModel,
    store: &'a ParamStore,
    precision: Precision,
    sources: &'a SourceCache,
) -> impl FnMut(&DecoderState, usize) -> Result<(Vec<f64>, DecoderState)> + 'a {
    move |state, token| model.decoder.step(store, precision, sources, state, token)
}

/// Speech memory `M′×d` of one utterance.
pub fn speech_memory(model: &DiscourseModel, store: &ParamStore, precision: Precision, features: &Tensor) -> Result<Tensor> {
    let speech = model
        .speech
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no speech encoder"))?;
    let s = Session::eval(store, precision);
    Ok(speech.encode(&s, features)?.value())
}

/// Beam search for one utterance given its memories (speech first for a
/// recognizer, then context).
pub fn beam_search_utterance(
    model: &DiscourseModel,
    store: &ParamStore,
    precision: Precision,
    memories: &[Tensor],
    cfg: &DecodeConfig,
) -> Result<BeamOutput<DecoderState>> {
    let sources = model.decoder.prepare_sources(store, precision, memories)?;
    beam_search(
        decoder_stepper(model, store, precision, &sources),
        DecoderState::new(&model.decoder),
        EOS,
        &[PAD, BOS],
        cfg,
    )
}

/// Sum of teacher-forced log-probabilities of `emitted` (the tokens after
/// BOS, ending with EOS when the hypothesis finished).
pub fn rescore(model: &DiscourseModel, store: &ParamStore, precision: Precision, memories: &[Tensor], emitted: &[usize]) -> Result<f64> {
    if emitted.is_empty() {
        return Ok(0.0);
    }
    let mut targets = emitted.to_vec();
    if targets.last() != Some(&EOS) {
        targets.push(EOS);
    }
    let lp = model.decoder.teacher_forced_log_probs(store, precision, &targets, memories)?;
    Ok(emitted.iter().enumerate().map(|(n, &t)| lp.get(n, t)).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceDecode {
    /// Emitted tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Decodes a lecture utterance by utterance. After each utterance the
/// context cache is extended with the 1-best output (hypothesis mode) or
/// the reference (oracle mode); in `none` mode it stays empty.
pub fn decode_discourse(
    model: &DiscourseModel,
    store: &ParamStore,
    precision: Precision,
    discourse: &PreparedDiscourse,
    cfg: &DecodeConfig,
) -> Result<(Vec<UtteranceDecode>, ContextCache)> {
    if model.kind != ModelKind::Asr {
        return Err(Error::invalid("decoding needs a recognizer checkpoint"));
    }
    let mut cache = ContextCache::new(&model.context);
    let mut out = Vec::with_capacity(discourse.utterances.len());
    for u in &discourse.utterances {
        let features = u
            .features
            .as_ref()
            .ok_or_else(|| Error::Data(format!("lecture {}: utterance without features", discourse.id)))?;
        let memories = [
            speech_memory(model, store, precision, features)?,
            cache.memory(&model.context, store)?,
        ];
        let beams = beam_search_utterance(model, store, precision, &memories, cfg)?;
        let best = &beams.ranked[0];
        let decoded = UtteranceDecode {
            tokens: best.output().to_vec(),
            log_prob: best.log_prob,
            finished: best.finished,
        };
        let feed = match cfg.context {
            ContextMode::Hypothesis => Some(decoded.tokens.iter().copied().chain([EOS]).collect::<Vec<_>>()),
            ContextMode::Oracle => Some(u.tokens.clone()),
            ContextMode::None => None,
        };
        if let Some(tokens) = feed {
            cache.append(&model.context, store, precision, &tokens)?;
        }
        out.push(decoded);
    }
    Ok((out, cache))
}

/// Decodes every lecture and returns 1-best transcripts keyed by
/// (lecture, utterance index).
pub fn decode_corpus(
    model: &DiscourseModel,
    store: &ParamStore,
    precision: Precision,
    data: &[PreparedDiscourse],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Transcripts> {
    cfg.validate()?;
    let mut out = Transcripts::new();
    for d in data {
        let (decoded, _) = decode_discourse(model, store, precision, d, cfg)?;
        for (i, u) in decoded.into_iter().enumerate() {
            out.insert((d.id.clone(), i), vocab.decode(&u.tokens));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probabilities fixed per depth, independent of history.
    fn table_stepper(rows: Vec<Vec<f64>>) -> impl FnMut(&usize, usize) -> Result<(Vec<f64>, usize)> {
        move |depth, _| Ok((rows[*depth].clone(), depth + 1))
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn greedy_path_with_beam_one() {
        let rows = vec![ln(&[0.1, 0.1, 0.2, 0.6]), ln(&[0.1, 0.1, 0.7, 0.1])];
        let cfg = DecodeConfig {
            beam_size: 1,
            max_len: 5,
            ..DecodeConfig::default()
        };
        let out = beam_search(table_stepper(rows), 0usize, 2, &[], &cfg).unwrap();
        assert_eq!(out.ranked[0].tokens, vec![BOS, 3, 2]);
        assert!((out.ranked[0].log_prob - (0.6f64.ln() + 0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_token_ids() {
        let rows = vec![ln(&[0.25, 0.25, 0.25, 0.25]); 3];
        let cfg = DecodeConfig {
            beam_size: 2,
            max_len: 3,
            ..DecodeConfig::default()
        };
        // EOS = 0 ties with every other token and wins on id.
        let out = beam_search(table_stepper(rows), 0usize, 0, &[], &cfg).unwrap();
        assert_eq!(out.ranked[0].tokens, vec![BOS, 0]);
    }

    #[test]
    fn no_eos_within_limit_is_flagged() {
        let rows = vec![ln(&[0.5, 0.49, 0.01]); 2];
        let cfg = DecodeConfig {
            beam_size: 2,
            max_len: 2,
            ..DecodeConfig::default()
        };
        let out = beam_search(table_stepper(rows), 0usize, 2, &[], &cfg).unwrap();
        assert!(out.unfinished && !out.ranked[0].finished);
        assert_eq!(out.ranked[0].tokens, vec![BOS, 0, 0]);
    }

    #[test]
    fn finished_hypotheses_are_ranked_non_increasing() {
        let rows = vec![ln(&[0.1, 0.3, 0.4, 0.2]), ln(&[0.2, 0.2, 0.3, 0.3]), ln(&[0.1, 0.1, 0.5, 0.3])];
        let cfg = DecodeConfig {
            beam_size: 4,
            max_len: 3,
            ..DecodeConfig::default()
        };
        let out = beam_search(table_stepper(rows), 0usize, 2, &[], &cfg).unwrap();
        assert!(out.ranked.iter().all(|h| h.finished));
        assert!(out.ranked.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }
}
