//! Acoustic feature matrices: normalization, deltas and the binary
//! per-lecture feature file.
//!
//! Feature matrices are `M×f` (one row per 10 ms frame).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DSFX";
const VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Statistics over every frame of the given utterances.
    pub fn compute<'a>(utterances: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut frames = 0usize;
        for x in utterances {
            if sum.is_empty() {
                sum = vec![0.0; x.cols()];
                sq = vec![0.0; x.cols()];
            } else if x.cols() != sum.len() {
                return Err(Error::Data("feature dimension differs between utterances".into()));
            }
            for r in 0..x.rows() {
                for (j, &v) in x.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            frames += x.rows();
        }
        if frames == 0 {
            return Err(Error::Data("no frames to compute statistics from".into()));
        }
        let n = frames as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % f]) / self.std[i % f])
            .collect();
        Tensor::new(x.shape(), data)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let f = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % f] + self.mean[i % f])
            .collect();
        Tensor::new(x.shape(), data)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "feature normalization",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }
}

/// Regression deltas over a ±2 frame window, edges replicated.
pub fn deltas(x: &Tensor) -> Tensor {
    let (m, f) = (x.rows(), x.cols());
    let at = |t: isize, j: usize| x.get(t.clamp(0, m as isize - 1) as usize, j);
    let mut out = vec![0.0; m * f];
    for t in 0..m as isize {
        for j in 0..f {
            let num: f64 = (1..=2).map(|n| n as f64 * (at(t + n, j) - at(t - n, j))).sum();
            out[t as usize * f + j] = num / 10.0;
        }
    }
    Tensor::from_parts(vec![m, f], out)
}

/// `[x, Δx, ΔΔx]` side by side: `M×f` → `M×3f`.
pub fn with_deltas(x: &Tensor) -> Tensor {
    let d1 = deltas(x);
    let d2 = deltas(&d1);
    let (m, f) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(m * 3 * f);
    for r in 0..m {
        out.extend_from_slice(x.row(r));
        out.extend_from_slice(d1.row(r));
        out.extend_from_slice(d2.row(r));
    }
    Tensor::from_parts(vec![m, 3 * f], out)
}

/// Writes one lecture's utterances (all `M×f` with a common `f`).
pub fn write_features(w: &mut impl Write, utterances: &[Tensor]) -> Result<()> {
    let f = utterances.first().map_or(0, Tensor::cols);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(f as u32)?;
    w.write_u32::<LittleEndian>(utterances.len() as u32)?;
    for x in utterances {
        if x.rank() != 2 || x.cols() != f {
            return Err(Error::Data("feature dimension differs between utterances".into()));
        }
        w.write_u32::<LittleEndian>(x.rows() as u32)?;
        for &v in x.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("feature file", "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format("feature file", format!("unsupported version {version}")));
    }
    let f = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let m = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0f32; m * f];
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        let data: Vec<f64> = buf.into_iter().map(f64::from).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("feature file", "non-finite value"));
        }
        out.push(Tensor::new(&[m, f], data)?);
    }
    Ok(out)
}

pub fn save_features(path: &Path, utterances: &[Tensor]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(&mut w, utterances)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<Tensor>> {
    read_features(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
