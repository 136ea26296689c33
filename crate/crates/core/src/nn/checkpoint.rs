//! Versioned binary container of named tensors.
//!
//! ```text
//! magic "LRCK" | version u32 | record count u32
//! per record: name length u32 | name bytes | dtype u8 | rank u32 | dims u64×rank | data (LE)
//! ```
//! All integers are little-endian. Optimizer state uses the
//! [`OPTIMIZER_PREFIX`] name prefix.

use std::fs;
use std::path::Path;

use super::params::TensorStore;
use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LRCK";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_PREFIX: &str = "adagrad/";
pub const BUFFER_PREFIX: &str = "buffer/";
pub const META_PREFIX: &str = "meta/";

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self.data {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            RecordData::F32(v) => v.iter().map(|x| T::from_f32(*x).unwrap()).collect(),
            RecordData::F64(v) => v.iter().map(|x| T::from_f64(*x).unwrap()).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("validated on read")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|v| v.to_f64().unwrap()).collect()),
        };
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        });
    }

    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &TensorStore<T>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Loads every tensor of `store` from records named `prefix + name`,
    /// checking shapes. Mismatches are collected into one error.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut TensorStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        for i in 0..store.len() {
            let key = format!("{prefix}{}", store.name(i));
            match self.get(&key) {
                None => problems.push(format!("{key}: missing")),
                Some(rec) if rec.shape != store.get(i).shape() => problems.push(format!(
                    "{key}: expected {:?}, found {:?}",
                    store.get(i).shape(),
                    rec.shape
                )),
                Some(rec) => *store.get_mut(i) = rec.to_tensor(),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "checkpoint does not match model: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.push(rec.dtype() as u8);
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for d in &rec.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &rec.data {
                RecordData::F32(v) => v.iter().for_each(|x| x.extend_le_bytes(&mut out)),
                RecordData::F64(v) => v.iter().for_each(|x| x.extend_le_bytes(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let dtype =
                DType::from_tag(tag).ok_or_else(|| Error::format(path, format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size())?;
            let data = match dtype {
                DType::F32 => RecordData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => RecordData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            records.push(Record { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write-then-rename so an interrupted write never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated checkpoint at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let mut ck = Checkpoint::new();
        ck.push("w", &Tensor::<f32>::from_f64(vec![2, 1], &[1.5, -2.0]).unwrap());
        ck.push("adagrad/w", &Tensor::<f64>::from_f64(vec![2], &[0.25, 4.0]).unwrap());
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"LRCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // name length, name, dtype tag
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'w');
        assert_eq!(bytes[17], DType::F32 as u8);
        let back = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    }

    #[test]
    fn load_store_reports_shape_mismatch() {
        let mut ck = Checkpoint::new();
        ck.push("a", &Tensor::<f32>::zeros(vec![3]));
        let mut store = TensorStore::<f32>::new();
        store.insert("a", Tensor::zeros(vec![4])).unwrap();
        store.insert("b", Tensor::zeros(vec![1])).unwrap();
        let err = ck.load_store("", &mut store).unwrap_err().to_string();
        assert!(err.contains("a: expected [4], found [3]"), "{err}");
        assert!(err.contains("b: missing"), "{err}");
    }
}
