//! Binary checkpoints: model description, named tensors and optimizer
//! moments.
//!
//! Layout (little endian): magic `DSCK`, version u32, config length u32 and
//! JSON config blob, tensor count u32, then per tensor the name length u32,
//! UTF-8 name, rank u32, dims u32×rank, payload flag u8 (4 = f32, 8 = f64)
//! and data. An optimizer section follows: `OPTM` plus step u64 and two
//! tensor tables (first and second moments, same order as the
//! parameters), or `NOPT`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::model::{DiscourseModel, ModelKind};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::{RAdam, RAdamConfig};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

/// Everything needed to rebuild the network around the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub feature_stats: Option<FeatureStats>,
    /// Whether the network was trained with preceding-utterance context.
    pub use_context: bool,
    /// Free-form record of the run (effective configuration).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: Option<RAdam>,
}

/// Tensor payload precision on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    F32,
    F64,
}

impl Checkpoint {
    /// Rebuilds the architecture described by the metadata and fills in
    /// the stored tensors (names and shapes must match exactly).
    pub fn model(&self) -> Result<(DiscourseModel, ParamStore)> {
        let mut store = ParamStore::new();
        let model = DiscourseModel::build(self.meta.kind, &self.meta.model, self.meta.vocab.len(), &mut store, 0)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }

    pub fn save(&self, path: &Path, payload: Payload) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w, payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(&self, w: &mut impl Write, payload: Payload) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let blob = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(blob.len() as u32)?;
        w.write_all(&blob)?;
        let named: Vec<(&str, &Tensor)> = self.params.iter().collect();
        write_table(w, &named, payload)?;
        match &self.optimizer {
            Some(opt) => {
                w.write_all(b"OPTM")?;
                let cfg = serde_json::to_vec(&opt.config)?;
                w.write_u32::<LittleEndian>(cfg.len() as u32)?;
                w.write_all(&cfg)?;
                w.write_u64::<LittleEndian>(opt.step)?;
                for moments in [&opt.m, &opt.v] {
                    let named: Vec<(&str, &Tensor)> = named.iter().map(|(n, _)| *n).zip(moments.iter()).collect();
                    write_table(w, &named, payload)?;
                }
            }
            None => w.write_all(b"NOPT")?,
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut blob = vec![0u8; len];
        r.read_exact(&mut blob)?;
        let meta: CheckpointMeta = serde_json::from_slice(&blob)?;
        let mut params = ParamStore::new();
        for (name, t) in read_table(r)? {
            params.insert(name, t)?;
        }
        r.read_exact(&mut magic)?;
        let optimizer = match &magic {
            b"OPTM" => {
                let len = r.read_u32::<LittleEndian>()? as usize;
                let mut cfg = vec![0u8; len];
                r.read_exact(&mut cfg)?;
                let config: RAdamConfig = serde_json::from_slice(&cfg)?;
                let step = r.read_u64::<LittleEndian>()?;
                let m: Vec<Tensor> = read_table(r)?.into_iter().map(|(_, t)| t).collect();
                let v: Vec<Tensor> = read_table(r)?.into_iter().map(|(_, t)| t).collect();
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::format("checkpoint", "optimizer state size differs from parameters"));
                }
                Some(RAdam { config, step, m, v })
            }
            b"NOPT" => None,
            _ => return Err(Error::format("checkpoint", "bad optimizer section")),
        };
        Ok(Self { meta, params, optimizer })
    }
}

fn write_table(w: &mut impl Write, named: &[(&str, &Tensor)], payload: Payload) -> Result<()> {
    w.write_u32::<LittleEndian>(named.len() as u32)?;
    for (name, t) in named {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        match payload {
            Payload::F32 => {
                w.write_u8(4)?;
                for &v in t.data() {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
            }
            Payload::F64 => {
                w.write_u8(8)?;
                for &v in t.data() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
    }
    Ok(())
}

fn read_table(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match r.read_u8()? {
            4 => {
                let mut buf = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut buf)?;
                buf.into_iter().map(f64::from).collect()
            }
            8 => {
                let mut buf = vec![0f64; n];
                r.read_f64_into::<LittleEndian>(&mut buf)?;
                buf
            }
            f => return Err(Error::format("checkpoint", format!("unknown payload flag {f}"))),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 8,
            n_feats: 4,
            conv_channels: [2, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_f64_is_exact() {
        let vocab = Vocabulary::build(&["abc"]).unwrap();
        let (_, store) = DiscourseModel::new_asr(&tiny(), vocab.len(), 3).unwrap();
        let mut opt = RAdam::new(RAdamConfig::default(), &store);
        opt.step = 7;
        let ck = Checkpoint {
            meta: CheckpointMeta {
                kind: ModelKind::Asr,
                model: tiny(),
                vocab,
                feature_stats: None,
                use_context: true,
                run: serde_json::json!({"seed": 3}),
            },
            params: store.clone(),
            optimizer: Some(opt.clone()),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf, Payload::F64).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        let (_, rebuilt) = back.model().unwrap();
        assert!(rebuilt.iter().zip(store.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn f32_payload_and_corruption() {
        let vocab = Vocabulary::build(&["ab"]).unwrap();
        let (_, store) = DiscourseModel::new_lm(&tiny(), vocab.len(), 1).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                kind: ModelKind::Lm,
                model: tiny(),
                vocab,
                feature_stats: None,
                use_context: false,
                run: serde_json::Value::Null,
            },
            params: store.clone(),
            optimizer: None,
        };
        let mut buf = Vec::new();
        ck.write(&mut buf, Payload::F32).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        for ((_, a), (_, b)) in back.params.iter().zip(store.iter()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        buf[1] = b'X';
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
    }
}
