//! Checkpoint file: one line of JSON header, a newline, then every parameter
//! as little-endian `f64` values in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Number of scalars.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    /// Free-form echo of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        let mut params = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (_, name, t) in store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len() * 8;
            tensors.push(t.clone());
        }
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                dtype: "f64-le".into(),
                config,
                params,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header.params.iter().position(|p| p.name == name).map(|i| &self.tensors[i])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_string(&self.header)?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write_to(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION || header.dtype != "f64-le" {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} / dtype {}",
                header.format_version, header.dtype
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let end = p.offset + p.len * 8;
            if end > payload.len() || p.shape.iter().product::<usize>() != p.len {
                return Err(Error::Format(format!("parameter {} overruns the payload or its shape", p.name)));
            }
            let data = payload[p.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(p.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
    }

    /// Overwrites every parameter of `store` with the tensor of the same name.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.header.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 1e300]]).unwrap());
        s.add("b", Tensor::row(&[std::f64::consts::PI, -2.0, 0.1]));
        s
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_store(&store(), serde_json::json!({"d": 2}));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        for (a, b) in back.tensors.iter().zip(&ck.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.header.params[1].offset, 32);
        let mut other = store();
        *other.get_mut(other.find("b").unwrap()) = Tensor::zeros(&[3]);
        back.restore_into(&mut other).unwrap();
        assert_eq!(other.get(other.find("b").unwrap()), store().get(store().find("b").unwrap()));
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let ck = Checkpoint::from_store(&store(), serde_json::Value::Null);
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2, 2]));
        s.add("b", Tensor::zeros(&[4]));
        assert!(matches!(ck.restore_into(&mut s), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        Checkpoint::from_store(&store(), serde_json::Value::Null).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }
}
