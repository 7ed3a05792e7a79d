//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "MLIPCKPT"
//! version   u32      1
//! meta_len  u64      length of the JSON metadata
//! meta      bytes    {"model": ModelConfig, "train": TrainConfig | null}
//! count     u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8), rows u64, cols u64, rows·cols f64 values
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

use super::config::TrainConfig;
use super::model::Mlip;

const MAGIC: &[u8; 8] = b"MLIPCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Mlip,
    pub train: Option<TrainConfig>,
}

pub fn save_checkpoint(path: &Path, model: &Mlip, train: Option<&TrainConfig>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let meta = serde_json::to_vec(&Meta {
        model: model.config.clone(),
        train: train.cloned(),
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(&meta)?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (_, name, value) in model.params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.rows() as u64).to_le_bytes())?;
        out.write_all(&(value.cols() as u64).to_le_bytes())?;
        for v in value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not an MLIP checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u64()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u64()?;
    let mut stored = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()?;
        let cols = r.u64()?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let data = r
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stored.add(name, Matrix::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    let mut model = Mlip::new(meta.model, 0)?;
    if stored.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model needs {}",
            stored.len(),
            model.params.len()
        )));
    }
    model.params.load_from(&stored)?;
    Ok(Checkpoint {
        model,
        train: meta.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = TrainConfig::micro();
        let mut model = Mlip::new(cfg.model_config(), 3).unwrap();
        model.params.get_mut(model.phi).set(0, 2, 0.75);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, Some(&cfg)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.train, Some(cfg));
        assert_eq!(back.model.config, model.config);
        assert_eq!(back.model.params.values(), model.params.values());
        assert_eq!(back.model.integrity().phi.get(0, 2), 0.75);
    }

    #[test]
    fn rejects_corrupt_files() {
        let model = Mlip::new(TrainConfig::micro().model_config(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
