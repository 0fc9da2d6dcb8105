//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `magic "RQCKPT\0\n"`, `u32 version`, `u32 len` + JSON run setup,
//! `u64 step`, `u32 count` tensors as (`u16 len` + name, `u8 ndim`,
//! `u32` dims, `f32` payload), `u32 count` loss records as four `f64`.
//! Parameter tensors are named as in the model; optimizer moments carry
//! the prefixes `adam.m/` and `adam.v/`.

use std::path::Path;

use super::{LossBreakdown, TrainSetup, Trainer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RQCKPT\0\n";
const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON of the [`TrainSetup`] that produced the checkpoint.
    pub setup_json: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub history: Vec<LossBreakdown>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let store = &t.model.store;
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        for (prefix, slots) in [(M_PREFIX, &t.optimizer.m), (V_PREFIX, &t.optimizer.v)] {
            for ((name, p), s) in store.iter().zip(slots) {
                let moment = Tensor::new(p.shape().to_vec(), s.clone()).expect("moment shape");
                tensors.push((format!("{prefix}{name}"), moment));
            }
        }
        Checkpoint {
            setup_json: serde_json::to_string(&t.setup).expect("setup serializes"),
            step: t.optimizer.step,
            tensors,
            history: t.history.clone(),
        }
    }

    pub fn setup(&self) -> Result<TrainSetup> {
        serde_json::from_str(&self.setup_json)
            .map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))
    }

    fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies parameters into `model`. Every model tensor must be present
    /// with the same shape and no parameter may be left over.
    pub fn load_params(&self, model: &mut Model) -> Result<()> {
        let setup = self.setup()?;
        let config_diff = if setup.model == model.config {
            Vec::new()
        } else {
            let a = serde_json::to_value(&setup.model).expect("config serializes");
            let b = serde_json::to_value(&model.config).expect("config serializes");
            differing_keys(&a, &b, "model")
        };
        let with_diff = |msg: String| {
            if config_diff.is_empty() {
                Error::Checkpoint(msg)
            } else {
                Error::Checkpoint(format!("{msg}; architecture differs ({})", config_diff.join(", ")))
            }
        };
        for (name, t) in model.store.iter() {
            match self.tensor(name) {
                None => return Err(with_diff(format!("tensor {name} missing from checkpoint"))),
                Some(c) if c.shape() != t.shape() => {
                    return Err(with_diff(format!(
                        "tensor {name}: model expects shape {:?}, checkpoint has {:?}",
                        t.shape(),
                        c.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some((extra, _)) = self.tensors.iter().find(|(n, _)| {
            !n.starts_with(M_PREFIX) && !n.starts_with(V_PREFIX) && model.store.id(n).is_none()
        }) {
            return Err(with_diff(format!(
                "tensor {extra} in checkpoint has no counterpart in the model"
            )));
        }
        if !config_diff.is_empty() {
            return Err(with_diff("tensors match but the configuration does not".into()));
        }
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            model.store.set(name, self.tensor(name).expect("checked above").clone())?;
        }
        Ok(())
    }

    /// Restores parameters, optimizer moments and loss history.
    pub fn restore(&self, t: &mut Trainer) -> Result<()> {
        self.load_params(&mut t.model)?;
        let store = &t.model.store;
        for (prefix, slots) in [(M_PREFIX, &mut t.optimizer.m), (V_PREFIX, &mut t.optimizer.v)] {
            for ((name, p), slot) in store.iter().zip(slots.iter_mut()) {
                let key = format!("{prefix}{name}");
                let m = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {key} missing from checkpoint")))?;
                if m.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key}: expected shape {:?}, found {:?}",
                        p.shape(),
                        m.shape()
                    )));
                }
                slot.copy_from_slice(m.data());
            }
        }
        t.optimizer.step = self.step;
        t.history = self.history.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.setup_json.len() as u32).to_le_bytes());
        b.extend_from_slice(self.setup_json.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for l in &self.history {
            for v in [l.video, l.frame, l.similarity, l.total] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32("configuration length")? as usize;
        let setup_json = String::from_utf8(r.take(len, "configuration")?.to_vec())
            .map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let what = format!("tensor {i}");
            let nlen = r.u16(&what)? as usize;
            let name = String::from_utf8(r.take(nlen, &what)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{what} name is not UTF-8")))?;
            let ndim = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32(&name)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is truncated")))?;
            let data = r
                .take(numel * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let records = r.u32("loss history length")? as usize;
        let mut history = Vec::with_capacity(records.min(1 << 20));
        for _ in 0..records {
            let mut v = [0.0; 4];
            for x in &mut v {
                *x = f64::from_le_bytes(r.take(8, "loss history")?.try_into().unwrap());
            }
            history.push(LossBreakdown {
                video: v[0],
                frame: v[1],
                similarity: v[2],
                total: v[3],
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after loss history",
                r.remaining()
            )));
        }
        Ok(Checkpoint {
            setup_json,
            step,
            tensors,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn differing_keys(a: &serde_json::Value, b: &serde_json::Value, at: &str) -> Vec<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter()
                .flat_map(|k| {
                    let path = format!("{at}.{k}");
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => differing_keys(u, v, &path),
                        _ => vec![path],
                    }
                })
                .collect()
        }
        _ if a == b => Vec::new(),
        _ => vec![format!("{at}: {a} vs {b}")],
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TrainSetup {
        let mut model = ModelConfig {
            channels: 8,
            heads: 2,
            input_channels: vec![4, 4],
            text_channels: 4,
            ..ModelConfig::default()
        };
        model.encoder.layers = 1;
        model.frame_decoder.layers = 1;
        model.frame_decoder.queries = 3;
        model.video_decoder.layers = 1;
        model.video_decoder.queries = 3;
        TrainSetup {
            seed: 3,
            model,
            ..TrainSetup::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.optimizer.m[0][0] = 0.25;
        t.optimizer.step = 7;
        t.history.push(LossBreakdown {
            video: 1.0,
            frame: 2.0,
            similarity: 0.1,
            total: 3.05,
        });
        let c = t.checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let r = Trainer::resume(&back, None).unwrap();
        assert_eq!(r.optimizer, t.optimizer);
        assert_eq!(r.history, t.history);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let c = Trainer::new(tiny()).unwrap().checkpoint();
        let bytes = c.to_bytes();
        for n in (0..bytes.len()).step_by(97) {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn architecture_mismatch_names_the_field() {
        let c = Trainer::new(tiny()).unwrap().checkpoint();
        let mut other = tiny().model;
        other.frame_decoder.layers = 2;
        let mut m = Model::new(other, 0).unwrap();
        let err = c.load_params(&mut m).unwrap_err().to_string();
        assert!(err.contains("model.frame_decoder.layers"), "{err}");
        assert!(err.contains("tensor frame_decoder."), "{err}");

        let mut other = tiny().model;
        other.chained_matching = false;
        let mut m = Model::new(other, 0).unwrap();
        let err = c.load_params(&mut m).unwrap_err().to_string();
        assert!(err.contains("model.chained_matching"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut c = Trainer::new(tiny()).unwrap().checkpoint();
        let (name, _) = c.tensors.remove(5);
        let mut m = Model::new(tiny().model, 0).unwrap();
        let err = c.load_params(&mut m).unwrap_err().to_string();
        assert!(err.contains(&name), "{err}");
    }

    #[test]
    fn reshaped_tensor_is_named() {
        let mut c = Trainer::new(tiny()).unwrap().checkpoint();
        let (name, t) = c.tensors[2].clone();
        let n = t.numel();
        c.tensors[2].1 = t.reshape([n, 1]).unwrap();
        let mut m = Model::new(tiny().model, 0).unwrap();
        let err = c.load_params(&mut m).unwrap_err().to_string();
        assert!(err.contains(&name), "{err}");
    }
}
