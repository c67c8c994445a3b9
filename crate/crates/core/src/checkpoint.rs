//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NMTC"  version: u32
//! config: u32 byte length, UTF-8 `key = value` text
//! count: u32
//! count × { name: u32 length + UTF-8, ndim: u32, dims: ndim × u32,
//!           len: u64, data: len × f32 }
//! ```
//!
//! Array names: `param.<name>`, `adam.m.<name>`, `adam.v.<name>`,
//! `meta.epoch`, `meta.adam_step` and `history.<field>`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Per-epoch record kept in the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub steps: usize,
    /// NaN when no validation set was given.
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub params: Vec<NamedArray>,
    /// First and second Adam moments, same order as `params`.
    pub moments: Vec<(NamedArray, NamedArray)>,
    pub history: Vec<EpochMetrics>,
}

fn to_f32(t: &Tensor, name: &str) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| v as f32).collect(),
    }
}

impl NamedArray {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        to_f32(t, name)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
    }
}

impl Checkpoint {
    /// Parameters widened back to f64; every entry is trainable.
    pub fn store(&self) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        for a in &self.params {
            s.insert(a.name.clone(), a.to_tensor()?, true)?;
        }
        Ok(s)
    }

    fn arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        let scalar = |name: &str, v: f32| NamedArray {
            name: name.into(),
            shape: vec![1],
            data: vec![v],
        };
        out.push(scalar("meta.epoch", self.epoch as f32));
        out.push(scalar("meta.adam_step", self.adam_step as f32));
        for p in &self.params {
            out.push(NamedArray {
                name: format!("param.{}", p.name),
                ..p.clone()
            });
        }
        for (m, v) in &self.moments {
            out.push(NamedArray {
                name: format!("adam.m.{}", m.name),
                ..m.clone()
            });
            out.push(NamedArray {
                name: format!("adam.v.{}", v.name),
                ..v.clone()
            });
        }
        let h = &self.history;
        let col = |name: &str, f: &dyn Fn(&EpochMetrics) -> f64| NamedArray {
            name: format!("history.{name}"),
            shape: vec![h.len()],
            data: h.iter().map(|e| f(e) as f32).collect(),
        };
        out.push(col("epoch", &|e| e.epoch as f64));
        out.push(col("lr", &|e| e.lr));
        out.push(col("train_loss", &|e| e.train_loss));
        out.push(col("steps", &|e| e.steps as f64));
        out.push(col("val_accuracy", &|e| e.val_accuracy));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        let arrays = self.arrays();
        b.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
            for v in &a.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Format(format!("array {name}: shape {shape:?} does not hold {len} values")));
            }
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_arrays(config, arrays)
    }

    fn from_arrays(config: TrainConfig, arrays: Vec<NamedArray>) -> Result<Self> {
        let mut ck = Checkpoint {
            config,
            epoch: 0,
            adam_step: 0,
            params: Vec::new(),
            moments: Vec::new(),
            history: Vec::new(),
        };
        let mut m1 = Vec::new();
        let mut m2 = Vec::new();
        let mut hist: Vec<(String, Vec<f32>)> = Vec::new();
        for a in arrays {
            let strip = |p: &str| NamedArray {
                name: a.name[p.len()..].to_string(),
                shape: a.shape.clone(),
                data: a.data.clone(),
            };
            match a.name.as_str() {
                "meta.epoch" => ck.epoch = a.data.first().copied().unwrap_or(0.0) as usize,
                "meta.adam_step" => ck.adam_step = a.data.first().copied().unwrap_or(0.0) as u64,
                n if n.starts_with("param.") => ck.params.push(strip("param.")),
                n if n.starts_with("adam.m.") => m1.push(strip("adam.m.")),
                n if n.starts_with("adam.v.") => m2.push(strip("adam.v.")),
                n if n.starts_with("history.") => hist.push((n["history.".len()..].to_string(), a.data)),
                other => return Err(Error::Format(format!("unexpected array {other:?}"))),
            }
        }
        if m1.len() != m2.len() || (!m1.is_empty() && m1.len() != ck.params.len()) {
            return Err(Error::Format("optimizer moments do not match parameters".into()));
        }
        for (a, b) in m1.iter().zip(&m2) {
            if a.name != b.name {
                return Err(Error::Format(format!("moment order mismatch at {}", a.name)));
            }
        }
        ck.moments = m1.into_iter().zip(m2).collect();
        let get = |k: &str| hist.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone()).unwrap_or_default();
        let (ep, lr, loss, steps, acc) = (get("epoch"), get("lr"), get("train_loss"), get("steps"), get("val_accuracy"));
        for i in 0..ep.len() {
            let at = |v: &[f32]| v.get(i).copied().unwrap_or(f32::NAN) as f64;
            ck.history.push(EpochMetrics {
                epoch: ep[i] as usize,
                lr: at(&lr),
                train_loss: at(&loss),
                steps: at(&steps) as usize,
                val_accuracy: at(&acc),
            });
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file first, so an existing checkpoint
    /// survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&self.to_bytes())?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let p = |n: &str, v: Vec<f32>| NamedArray {
            name: n.into(),
            shape: vec![1, v.len()],
            data: v,
        };
        Checkpoint {
            config: TrainConfig::desk(),
            epoch: 2,
            adam_step: 500,
            params: vec![p("a", vec![1.5, -2.0]), p("b", vec![0.1])],
            moments: vec![
                (p("a", vec![0.0, 1.0]), p("a", vec![2.0, 3.0])),
                (p("b", vec![4.0]), p("b", vec![5.0])),
            ],
            history: vec![
                EpochMetrics {
                    epoch: 1,
                    lr: 5e-4f32 as f64,
                    train_loss: 1.25,
                    steps: 250,
                    val_accuracy: 0.5,
                },
                EpochMetrics {
                    epoch: 2,
                    lr: 5e-4f32 as f64,
                    train_loss: 0.75,
                    steps: 250,
                    val_accuracy: f64::NAN,
                },
            ],
        }
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.moments, ck.moments);
        assert_eq!((back.epoch, back.adam_step), (2, 500));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.history[0], ck.history[0]);
        assert!(back.history[1].val_accuracy.is_nan());
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"NMTC");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), CHECKPOINT_VERSION);
        let n = u32::from_le_bytes([b[8], b[9], b[10], b[11]]) as usize;
        assert!(std::str::from_utf8(&b[12..12 + n]).unwrap().contains("d_model = 64"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
        let mut ver = b;
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_and_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nmtc");
        sample().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let s = back.store().unwrap();
        assert_eq!(s.value("a").unwrap().data(), &[1.5, -2.0]);
        assert!(!path.with_extension("tmp").exists());
    }
}
