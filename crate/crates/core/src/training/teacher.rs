//! Language-model predictions used as distillation targets, and their
//! on-disk cache.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{expect_kind, segment_logits, segments, PreparedDiscourse};
use crate::error::{Error, Result};
use crate::model::{DiscourseModel, ModelKind};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 4] = b"DSTC";
const VERSION: u32 = 1;

/// Per-lecture, per-utterance `N×|V|` teacher probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherCache {
    pub vocab_hash: String,
    pub lectures: BTreeMap<String, Vec<Tensor>>,
}

/// Next-token distributions of a trained language model at every position
/// of every utterance, conditioned on the reference transcripts of the
/// preceding utterances in the same segment (or on nothing when
/// `use_context` is false). Evaluated without dropout.
pub fn teacher_distributions(
    lm: &DiscourseModel,
    store: &ParamStore,
    discourse: &PreparedDiscourse,
    max_utterances: usize,
    use_context: bool,
    precision: Precision,
) -> Result<Vec<Tensor>> {
    expect_kind(lm, ModelKind::Lm)?;
    let mut out = Vec::with_capacity(discourse.utterances.len());
    for (_, start, n) in segments(std::slice::from_ref(discourse), max_utterances) {
        let s = Session::eval(store, precision);
        let utts = &discourse.utterances[start..start + n];
        for logits in segment_logits(&s, lm, utts, use_context, None)? {
            out.push(logits.softmax()?.value());
        }
    }
    Ok(out)
}

impl TeacherCache {
    pub fn compute(
        lm: &DiscourseModel,
        store: &ParamStore,
        data: &[PreparedDiscourse],
        vocab_hash: &str,
        max_utterances: usize,
        use_context: bool,
        precision: Precision,
    ) -> Result<Self> {
        let lectures = data
            .iter()
            .map(|d| Ok((d.id.clone(), teacher_distributions(lm, store, d, max_utterances, use_context, precision)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab_hash: vocab_hash.to_string(),
            lectures,
        })
    }

    /// Errors unless the cache was produced with the given vocabulary.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch(format!(
                "teacher vocabulary {} differs from student vocabulary {}",
                short(&self.vocab_hash),
                short(vocab_hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Writes one file per lecture (`<dir>/<lecture>.dstc`): magic, version,
/// 64-byte hex vocabulary hash, `|V|`, record count, then records of
/// (utterance u32, token u32, `|V|` f32 probabilities).
pub fn save_teacher_cache(dir: &Path, cache: &TeacherCache) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, utts) in &cache.lectures {
        let mut w = BufWriter::new(std::fs::File::create(dir.join(format!("{id}.dstc")))?);
        write_lecture(&mut w, &cache.vocab_hash, utts)?;
        w.flush()?;
    }
    Ok(())
}

fn write_lecture(w: &mut impl Write, vocab_hash: &str, utts: &[Tensor]) -> Result<()> {
    let hash = vocab_hash.as_bytes();
    if hash.len() != 64 {
        return Err(Error::invalid("vocabulary hash must be 64 hex characters"));
    }
    let v = utts.first().map_or(0, Tensor::cols);
    let records: usize = utts.iter().map(Tensor::rows).sum();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_all(hash)?;
    w.write_u32::<LittleEndian>(v as u32)?;
    w.write_u32::<LittleEndian>(records as u32)?;
    for (u, probs) in utts.iter().enumerate() {
        for r in 0..probs.rows() {
            w.write_u32::<LittleEndian>(u as u32)?;
            w.write_u32::<LittleEndian>(r as u32)?;
            for &p in probs.row(r) {
                w.write_f32::<LittleEndian>(p as f32)?;
            }
        }
    }
    Ok(())
}

fn read_lecture(r: &mut impl Read) -> Result<(String, Vec<Tensor>)> {
    let bad = |m: &str| Error::format("teacher cache", m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.read_u32::<LittleEndian>()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut hash = [0u8; 64];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash.to_vec()).map_err(|_| bad("hash is not text"))?;
    let v = r.read_u32::<LittleEndian>()? as usize;
    let records = r.read_u32::<LittleEndian>()? as usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut utts = Vec::new();
    let mut buf = vec![0f32; v];
    for _ in 0..records {
        let u = r.read_u32::<LittleEndian>()? as usize;
        let tok = r.read_u32::<LittleEndian>()? as usize;
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        if u == utts.len() + 1 && tok == 0 && !rows.is_empty() {
            utts.push(Tensor::from_rows(&std::mem::take(&mut rows))?);
        }
        if u != utts.len() || tok != rows.len() {
            return Err(bad("records out of order"));
        }
        rows.push(buf.iter().map(|&p| f64::from(p)).collect());
    }
    if !rows.is_empty() {
        utts.push(Tensor::from_rows(&rows)?);
    }
    Ok((hash, utts))
}

/// Loads every `*.dstc` file in `dir`, checking that all carry
/// `vocab_hash`.
pub fn load_teacher_cache(dir: &Path, vocab_hash: &str) -> Result<TeacherCache> {
    let mut cache = TeacherCache {
        vocab_hash: vocab_hash.to_string(),
        lectures: BTreeMap::new(),
    };
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("dstc") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (hash, utts) = read_lecture(&mut BufReader::new(std::fs::File::open(&path)?))?;
        if hash != vocab_hash {
            return Err(Error::VocabMismatch(format!(
                "teacher cache {} was built with vocabulary {}, expected {}",
                path.display(),
                short(&hash),
                short(vocab_hash)
            )));
        }
        cache.lectures.insert(id, utts);
    }
    Ok(cache)
}
