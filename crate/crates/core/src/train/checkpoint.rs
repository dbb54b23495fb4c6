//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "ICLR1" | version | header length | header (canonical JSON)
//! | parameter table | optimizer table
//! table: count, then per tensor: name length, name (UTF-8), rank,
//!        extents, values as f32 LE
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ICLR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Caller-supplied context, e.g. the full run configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub epoch: usize,
    pub validation_loss: f64,
    pub optimizer: OptimizerMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    /// First and second Adam moments, keyed `m/<param>` and `v/<param>`.
    pub moments: ParamSet,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        train: &TrainConfig,
        adam: &AdamState,
        epoch: usize,
        validation_loss: f64,
    ) -> Checkpoint {
        let mut moments = ParamSet::new();
        for (name, t) in &adam.m {
            moments.insert(format!("m/{name}"), t.clone());
        }
        for (name, t) in &adam.v {
            moments.insert(format!("v/{name}"), t.clone());
        }
        Checkpoint {
            header: CheckpointHeader {
                model: model.config,
                train: train.clone(),
                extra: serde_json::Value::Null,
                epoch,
                validation_loss,
                optimizer: OptimizerMeta {
                    step: adam.step,
                    beta1: adam.beta1,
                    beta2: adam.beta2,
                    eps: adam.eps,
                },
            },
            params: model.params.clone(),
            moments,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.header.model, self.params.clone())
    }

    pub fn adam_state(&self) -> Result<AdamState> {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (key, t) in &self.moments {
            match key.split_once('/') {
                Some(("m", name)) => m.insert(name.to_string(), t.clone()),
                Some(("v", name)) => v.insert(name.to_string(), t.clone()),
                _ => return Err(Error::data(format!("unexpected optimizer tensor {key:?}"))),
            };
        }
        let o = &self.header.optimizer;
        Ok(AdamState {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            m,
            v,
        })
    }

    /// Fail unless the stored parameters have exactly the shapes `expected` implies.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let want = expected.param_shapes();
        if want.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameter tensors, configuration expects {}",
                self.params.len(),
                want.len()
            )));
        }
        for (name, shape) in want {
            match self.params.get(name) {
                None => return Err(Error::config(format!("checkpoint lacks parameter {name}"))),
                Some(t) if t.shape() != shape => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?} in checkpoint, configuration expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, len_u32(header.len())?);
        out.extend_from_slice(&header);
        write_table(&mut out, &self.params)?;
        write_table(&mut out, &self.moments)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.fail_at(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.fail_at(MAGIC.len(), format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let at = r.pos;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(n)?).map_err(|e| r.fail_at(at, format!("bad header: {e}")))?;
        let params = read_table(&mut r)?;
        let moments = read_table(&mut r)?;
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            header,
            params,
            moments,
        })
    }

    /// Write through a temporary sibling and rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("length {n} does not fit the checkpoint format")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_table(out: &mut Vec<u8>, table: &ParamSet) -> Result<()> {
    put_u32(out, len_u32(table.len())?);
    for (name, t) in table {
        put_u32(out, len_u32(name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, 2);
        for &e in t.shape() {
            put_u32(out, len_u32(e)?);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

fn read_table(r: &mut Reader) -> Result<ParamSet> {
    let count = r.u32()?;
    let mut table = ParamSet::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.fail_at(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(r.fail_at(at, format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(r.fail_at(at, format!("tensor {name} has an empty extent")));
        }
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail_at(at, "tensor size overflows"))?;
        let data: Vec<f64> = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if table.insert(name.clone(), Tensor::new(rows, cols, data)).is_some() {
            return Err(r.fail_at(at, format!("duplicate tensor {name}")));
        }
    }
    Ok(table)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        self.fail_at(self.pos, message)
    }

    fn fail_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::train::adam::round_to_f32;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 12,
            dim: 4,
            dict_size: 5,
            top_k: 2,
            proj_hidden: 4,
            proj_out: 4,
            variant: Variant::IdIcl,
        };
        let mut model = Model::init(cfg, 3).unwrap();
        round_to_f32(&mut model.params);
        let mut adam = AdamState::new(&model.params);
        adam.step = 7;
        adam.m.get_mut("dictionary").unwrap().data_mut()[0] = 0.25;
        Checkpoint::new(&model, &TrainConfig::default(), &adam, 4, 1.5)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.adam_state().unwrap().step, 7);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        bytes.pop();
        bytes[5] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 5, .. })));
        bytes[5] = 1;
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let c = sample();
        c.check_compatible(&c.header.model).unwrap();
        let mut other = c.header.model;
        other.dim = 8;
        assert!(matches!(c.check_compatible(&other), Err(Error::Config(_))));
    }
}
