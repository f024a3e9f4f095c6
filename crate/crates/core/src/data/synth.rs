//! Synthetic lectures whose correct transcription depends on the topic
//! announced in the first utterance.
//!
//! Every lecture has a latent topic. Its first utterance opens with the
//! topic's marker character. In later utterances each position is, with
//! probability `ambiguity_rate`, a member of a confusable group: all members
//! of a group sound identical and the member is chosen by the topic. The
//! remaining positions are neutral characters with distinct sounds.
//! Each character is rendered as `frames_per_token` frames of its fixed
//! acoustic embedding plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discourse, Utterance};
use crate::error::{Error, Result};
use crate::nn::params::standard_normal;
use crate::tensor::Tensor;

const TOPIC_CHARS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const GROUP_CHARS: &str = "0123456789αβγδεζηθικλμνξοπρστυφχψω";
const NEUTRAL_CHARS: &str = "abcdefghijklmnopqrstuvwxyzАБВГДЕЖЗИЙКЛМНОПРСТУФХЦЧШЩЭЮЯ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskConfig {
    /// Distinct characters: topic markers + group members + neutral.
    pub vocab_size: usize,
    pub utterances_per_discourse: usize,
    pub tokens_per_utterance: usize,
    pub n_topics: usize,
    pub n_confusable_groups: usize,
    pub ambiguity_rate: f64,
    pub noise: f64,
    pub n_feats: usize,
    pub frames_per_token: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            utterances_per_discourse: 6,
            tokens_per_utterance: 8,
            n_topics: 4,
            n_confusable_groups: 2,
            ambiguity_rate: 0.3,
            noise: 0.3,
            n_feats: 16,
            frames_per_token: 4,
            n_train: 200,
            n_valid: 20,
            n_test: 40,
            seed: 1,
        }
    }
}

impl SynthTaskConfig {
    pub fn n_neutral(&self) -> usize {
        self.vocab_size
            .saturating_sub(self.n_topics + self.n_topics * self.n_confusable_groups)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic task: {m}")));
        if self.n_topics == 0 || self.n_topics > TOPIC_CHARS.chars().count() {
            return bad("n_topics out of range");
        }
        if self.n_topics * self.n_confusable_groups > GROUP_CHARS.chars().count() {
            return bad("too many confusable characters");
        }
        if self.n_neutral() == 0 || self.n_neutral() > NEUTRAL_CHARS.chars().count() {
            return bad("vocab_size leaves no room for neutral characters (or too many)");
        }
        if self.utterances_per_discourse == 0 || self.tokens_per_utterance < 2 {
            return bad("need at least one utterance of two tokens");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) || (self.ambiguity_rate > 0.0 && self.n_confusable_groups == 0) {
            return bad("ambiguity_rate must be in [0, 1] with at least one group when positive");
        }
        if self.n_feats == 0 || self.frames_per_token == 0 || self.noise < 0.0 || !self.noise.is_finite() {
            return bad("n_feats, frames_per_token must be positive and noise non-negative");
        }
        if self.frames_per_token * self.tokens_per_utterance < 4 {
            return bad("utterances must span at least 4 frames");
        }
        Ok(())
    }
}

/// What a character is, acoustically and semantically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CharClass {
    Topic(usize),
    Member { group: usize, topic: usize },
    Neutral(usize),
}

/// The task's fixed alphabet and acoustic embeddings.
#[derive(Clone, Debug)]
pub struct SynthTask {
    pub config: SynthTaskConfig,
    /// Characters with their class, in generation order.
    pub alphabet: Vec<(char, CharClass)>,
    /// One embedding per sound: topics, then groups, then neutral.
    sounds: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<Discourse>,
    pub valid: Vec<Discourse>,
    pub test: Vec<Discourse>,
}

impl SynthTask {
    pub fn new(config: SynthTaskConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut alphabet = Vec::new();
        alphabet.extend(TOPIC_CHARS.chars().take(c.n_topics).enumerate().map(|(k, ch)| (ch, CharClass::Topic(k))));
        let mut group_chars = GROUP_CHARS.chars();
        for group in 0..c.n_confusable_groups {
            for topic in 0..c.n_topics {
                let ch = group_chars.next().expect("validated");
                alphabet.push((ch, CharClass::Member { group, topic }));
            }
        }
        alphabet.extend(NEUTRAL_CHARS.chars().take(c.n_neutral()).enumerate().map(|(k, ch)| (ch, CharClass::Neutral(k))));
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed_50d5);
        let n_sounds = c.n_topics + c.n_confusable_groups + c.n_neutral();
        let sounds = (0..n_sounds)
            .map(|_| (0..c.n_feats).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        Ok(Self { config, alphabet, sounds })
    }

    pub fn sound_of(&self, class: CharClass) -> usize {
        let c = &self.config;
        match class {
            CharClass::Topic(k) => k,
            CharClass::Member { group, .. } => c.n_topics + group,
            CharClass::Neutral(k) => c.n_topics + c.n_confusable_groups + k,
        }
    }

    pub fn class_of(&self, ch: char) -> Option<CharClass> {
        self.alphabet.iter().find(|(c, _)| *c == ch).map(|&(_, k)| k)
    }

    fn char_for(&self, class: CharClass) -> char {
        self.alphabet.iter().find(|(_, k)| *k == class).expect("class in alphabet").0
    }

    pub fn sound(&self, index: usize) -> &[f64] {
        &self.sounds[index]
    }

    pub fn n_sounds(&self) -> usize {
        self.sounds.len()
    }

    /// All three splits; identical configs give identical corpora.
    pub fn generate(&self) -> SynthCorpus {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut split = |name: &str, n: usize| -> Vec<Discourse> {
            (0..n).map(|i| self.discourse(format!("{name}{i:04}"), &mut rng)).collect()
        };
        let train = split("train", c.n_train);
        let valid = split("valid", c.n_valid);
        let test = split("test", c.n_test);
        SynthCorpus { train, valid, test }
    }

    fn discourse(&self, id: String, rng: &mut ChaCha8Rng) -> Discourse {
        let c = &self.config;
        let topic = rng.gen_range(0..c.n_topics);
        let utterances = (0..c.utterances_per_discourse)
            .map(|t| {
                let classes: Vec<CharClass> = (0..c.tokens_per_utterance)
                    .map(|n| {
                        if t == 0 && n == 0 {
                            CharClass::Topic(topic)
                        } else if t > 0 && rng.gen::<f64>() < c.ambiguity_rate {
                            CharClass::Member {
                                group: rng.gen_range(0..c.n_confusable_groups),
                                topic,
                            }
                        } else {
                            CharClass::Neutral(rng.gen_range(0..c.n_neutral()))
                        }
                    })
                    .collect();
                self.render(&classes, rng)
            })
            .collect();
        Discourse { id, utterances }
    }

    fn render(&self, classes: &[CharClass], rng: &mut ChaCha8Rng) -> Utterance {
        let c = &self.config;
        let mut data = Vec::with_capacity(classes.len() * c.frames_per_token * c.n_feats);
        for &class in classes {
            let sound = &self.sounds[self.sound_of(class)];
            for _ in 0..c.frames_per_token {
                data.extend(sound.iter().map(|v| v + c.noise * standard_normal(rng)));
            }
        }
        Utterance {
            features: Tensor::new(&[classes.len() * c.frames_per_token, c.n_feats], data).expect("sized"),
            text: classes.iter().map(|&k| self.char_for(k)).collect(),
        }
    }

    /// Error rate of the best classifier that sees one token's frames and,
    /// if `know_topic`, the lecture's true topic, measured over every token
    /// after the first utterance.
    ///
    /// Each token is assigned the character maximizing prior × Gaussian
    /// likelihood of its frames; the prior is the generator's marginal
    /// character distribution, restricted to the known topic when given.
    /// Ties go to the earlier alphabet entry.
    pub fn bayes_error(&self, discourses: &[Discourse], know_topic: bool) -> Result<f64> {
        let c = &self.config;
        let (mut errors, mut total) = (0usize, 0usize);
        for d in discourses {
            let first = d.utterances[0].text.chars().next().and_then(|ch| self.class_of(ch));
            let Some(CharClass::Topic(topic)) = first else {
                return Err(Error::Data(format!("lecture {} does not open with a topic marker", d.id)));
            };
            for u in &d.utterances[1..] {
                for (n, truth) in u.text.chars().enumerate() {
                    let frames = u.features.slice_rows(n * c.frames_per_token, c.frames_per_token);
                    let guess = self.classify(&frames, know_topic.then_some(topic));
                    errors += usize::from(guess != truth);
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Data("no tokens after the first utterances".into()));
        }
        Ok(errors as f64 / total as f64)
    }

    fn classify(&self, frames: &Tensor, topic: Option<usize>) -> char {
        let c = &self.config;
        let var = (c.noise * c.noise).max(1e-12);
        let log_lik: Vec<f64> = (0..self.n_sounds())
            .map(|s| {
                let mu = &self.sounds[s];
                -(0..frames.rows())
                    .map(|r| frames.row(r).iter().zip(mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / (2.0 * var)
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, ' ');
        for &(ch, class) in &self.alphabet {
            let prior = match class {
                CharClass::Topic(_) => 0.0,
                CharClass::Member { topic: k, .. } => {
                    let p = c.ambiguity_rate / c.n_confusable_groups as f64;
                    match topic {
                        Some(t) if t != k => 0.0,
                        Some(_) => p,
                        None => p / c.n_topics as f64,
                    }
                }
                CharClass::Neutral(_) => (1.0 - c.ambiguity_rate) / c.n_neutral() as f64,
            };
            if prior > 0.0 {
                let score = prior.ln() + log_lik[self.sound_of(class)];
                if score > best.0 {
                    best = (score, ch);
                }
            }
        }
        best.1
    }
}
