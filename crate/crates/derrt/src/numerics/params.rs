//! Versioned binary parameter files.
//!
//! Layout (all integers little-endian):
//! `magic "DRRTPARM" | version u32 | count u32 |` then per entry
//! `name_len u32 | name utf-8 | ndim u32 | dims u64... | data f64...`.
//! Entries keep insertion order, so identical parameters produce identical
//! bytes and vice versa.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::TensorData;

const MAGIC: &[u8; 8] = b"DRRTPARM";
const VERSION: u32 = 1;

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamFile {
    entries: Vec<(String, TensorData)>,
}

impl ParamFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: TensorData) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<TensorData> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(idx).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
            for &d in &tensor.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &tensor.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::ModelFormat("non-utf8 tensor name".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            entries.push((name, TensorData::new(shape, data)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn roundtrip_preserves_everything() {
        let mut rng = RngStream::new(4, 0);
        let mut pf = ParamFile::new();
        pf.push("pi", TensorData::randn(vec![3], 1.0, &mut rng));
        pf.push("A", TensorData::randn(vec![3, 3], 1.0, &mut rng));
        pf.push("w", TensorData::randn(vec![2, 4, 3, 3], 0.2, &mut rng));
        let mut bytes = Vec::new();
        pf.write_to(&mut bytes).unwrap();
        let back = ParamFile::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(pf, back);
    }

    #[test]
    fn identical_params_identical_bytes() {
        let make = || {
            let mut rng = RngStream::new(9, 9);
            let mut pf = ParamFile::new();
            pf.push("a", TensorData::randn(vec![5], 1.0, &mut rng));
            let mut bytes = Vec::new();
            pf.write_to(&mut bytes).unwrap();
            bytes
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOTAPARM\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(ParamFile::read_from(&mut bytes.as_slice()).is_err());
    }
}
