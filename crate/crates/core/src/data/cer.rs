use super::Transcripts;
use crate::error::{Error, Result};

/// Levenshtein distance over characters with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length.
pub fn compute_cer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::invalid("empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CerScore {
    pub errors: usize,
    pub ref_chars: usize,
}

impl CerScore {
    pub fn cer(&self) -> f64 {
        self.errors as f64 / self.ref_chars as f64
    }
}

/// Micro-averaged CER: total edits over total reference characters. Every
/// reference utterance must have a hypothesis and vice versa.
pub fn score_corpus(hyps: &Transcripts, refs: &Transcripts) -> Result<CerScore> {
    if refs.is_empty() {
        return Err(Error::Data("no reference utterances".into()));
    }
    if let Some(k) = hyps.keys().find(|k| !refs.contains_key(k)) {
        return Err(Error::Data(format!("hypothesis for unknown utterance {} {}", k.0, k.1)));
    }
    let mut score = CerScore {
        errors: 0,
        ref_chars: 0,
    };
    for (key, r) in refs {
        let h = hyps
            .get(key)
            .ok_or_else(|| Error::Data(format!("no hypothesis for {} {}", key.0, key.1)))?;
        score.errors += edit_distance(h, r);
        score.ref_chars += r.chars().count();
    }
    if score.ref_chars == 0 {
        return Err(Error::Data("references are all empty".into()));
    }
    Ok(score)
}
