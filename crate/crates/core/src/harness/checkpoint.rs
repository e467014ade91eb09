//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TDV3" | version | config_len | config text (UTF-8) | n_records
//! per record: name_len | name | ndim | dims... | f32 LE values
//! ```
//!
//! The config text is the run's `key=value` form, so a checkpoint alone is
//! enough to rebuild the model it came from.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDV3";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(config_text: &str, store: &ParameterStore<T>) -> Self {
        let records = store
            .iter()
            .map(|(name, t)| Record {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            config_text: config_text.to_string(),
            records,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len())?;
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.records.len())?;
        for r in &self.records {
            put_u32(&mut out, r.name.len())?;
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len())?;
            for &d in &r.shape {
                put_u32(&mut out, d)?;
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
        }
        let n = rd.u32()? as usize;
        let config_text = rd.string(n)?;
        let count = rd.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let n = rd.u32()? as usize;
            let name = rd.string(n)?;
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` has an overflowing shape")))?;
            let raw = rd.take(numel.checked_mul(4).ok_or_else(|| Error::Format("oversized record".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push(Record { name, shape, values });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { config_text, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// A fresh store holding every record.
    pub fn to_store<T: Scalar>(&self) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for r in &self.records {
            store.insert(r.name.clone(), to_tensor(r)?)?;
        }
        Ok(store)
    }

    /// Overwrites the values of `store`, which must hold exactly the
    /// checkpoint's tensors with the same shapes; the first offending name
    /// is reported.
    pub fn load_into<T: Scalar>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        store.assign_from(&self.to_store()?)
    }
}

fn to_tensor<T: Scalar>(r: &Record) -> Result<Tensor<T>> {
    Tensor::new(r.shape.clone(), r.values.iter().map(|&v| T::of(v as f64)).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}
