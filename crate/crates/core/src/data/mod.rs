//! Corpora, the synthetic discourse task, and error-rate scoring.

pub mod cer;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{load_features, save_features};
use crate::tensor::Tensor;

pub use cer::{compute_cer, edit_distance, score_corpus, CerScore};
pub use synth::{SynthTask, SynthTaskConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `M×f` acoustic features.
    pub features: Tensor,
    pub text: String,
}

/// One lecture: utterances in spoken order.
#[derive(Clone, Debug, PartialEq)]
pub struct Discourse {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Discourse {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Data(format!("lecture {} has no utterances", self.id)));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.features.rows() < 4 || u.text.is_empty() {
                return Err(Error::Data(format!(
                    "lecture {} utterance {i}: need at least 4 frames and 1 character",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    /// Splits into consecutive windows of at most `max_utterances`.
    pub fn segments(&self, max_utterances: usize) -> impl Iterator<Item = &[Utterance]> {
        self.utterances.chunks(max_utterances.max(1))
    }
}

/// Reads a manifest of `lecture<TAB>features<TAB>transcript` lines. Relative
/// paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Discourse>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, feats, trans] = fields[..] else {
            return Err(Error::format("manifest", format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        let features = load_features(&base.join(feats))?;
        let texts = std::fs::read_to_string(base.join(trans))?;
        let texts: Vec<&str> = texts.lines().collect();
        if texts.len() != features.len() {
            return Err(Error::Data(format!(
                "lecture {id}: {} feature matrices but {} transcript lines",
                features.len(),
                texts.len()
            )));
        }
        let d = Discourse {
            id: id.to_string(),
            utterances: features
                .into_iter()
                .zip(texts)
                .map(|(features, t)| Utterance {
                    features,
                    text: t.to_string(),
                })
                .collect(),
        };
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

/// Writes features and transcripts under `dir` and a manifest named
/// `<split>.tsv`; returns the manifest path.
pub fn save_manifest(dir: &Path, split: &str, discourses: &[Discourse]) -> Result<PathBuf> {
    for sub in ["features", "transcripts"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = String::new();
    for d in discourses {
        let feats = format!("features/{}.dsfx", d.id);
        let trans = format!("transcripts/{}.txt", d.id);
        let matrices: Vec<Tensor> = d.utterances.iter().map(|u| u.features.clone()).collect();
        save_features(&dir.join(&feats), &matrices)?;
        let mut body = String::new();
        for u in &d.utterances {
            if u.text.contains('\n') {
                return Err(Error::Data("transcript contains a newline".into()));
            }
            body.push_str(&u.text);
            body.push('\n');
        }
        std::fs::write(dir.join(&trans), body)?;
        writeln!(manifest, "{}\t{feats}\t{trans}", d.id).expect("string write");
    }
    let path = dir.join(format!("{split}.tsv"));
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Transcriptions keyed by (lecture, utterance index).
pub type Transcripts = BTreeMap<(String, usize), String>;

pub fn references(discourses: &[Discourse]) -> Transcripts {
    discourses
        .iter()
        .flat_map(|d| {
            d.utterances
                .iter()
                .enumerate()
                .map(move |(i, u)| ((d.id.clone(), i), u.text.clone()))
        })
        .collect()
}

/// `lecture<TAB>index<TAB>text` lines.
pub fn format_transcripts(t: &Transcripts) -> String {
    let mut out = String::new();
    for ((id, i), text) in t {
        writeln!(out, "{id}\t{i}\t{text}").expect("string write");
    }
    out
}

pub fn parse_transcripts(text: &str) -> Result<Transcripts> {
    let mut out = Transcripts::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(idx), text) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format("transcript file", format!("line {}: missing fields", n + 1)));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::format("transcript file", format!("line {}: bad index {idx:?}", n + 1)))?;
        if out.insert((id.to_string(), idx), text.unwrap_or("").to_string()).is_some() {
            return Err(Error::format("transcript file", format!("duplicate entry {id} {idx}")));
        }
    }
    Ok(out)
}
