//! Versioned binary container used for checkpoints and dataset caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"PBAYESC\0"
//! version   u32
//! header    u64 length + UTF-8 JSON (carries `kind` and metadata)
//! arrays    u32 count, then per array:
//!             u16 name length + UTF-8 name, u64 element count, f64 values
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so reloads are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PBAYESC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: Value,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

impl Container {
    pub fn new(kind: impl Into<String>, header: impl Serialize) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            header: serde_json::to_value(header)?,
            arrays: BTreeMap::new(),
        })
    }

    pub fn with_array(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.arrays.insert(name.into(), values);
        self
    }

    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Container(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn take_array(&mut self, name: &str) -> Result<Vec<f64>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Container(format!("missing array `{name}`")))
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&serde_json::json!({
            "kind": self.kind,
            "meta": self.header,
        }))?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, values) in &self.arrays {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(values.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input, "version")?);
        if version != FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(read_array(&mut input, "header length")?) as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut input, &mut header, "header")?;
        let mut header: Value = serde_json::from_slice(&header)?;
        let kind = header
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Container("header without kind".into()))?
            .to_string();
        let meta = header
            .get_mut("meta")
            .map(Value::take)
            .unwrap_or(Value::Null);
        let count = u32::from_le_bytes(read_array(&mut input, "array count")?);
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut input, "array name length")?);
            let mut name = vec![0u8; name_len as usize];
            read_exact(&mut input, &mut name, "array name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Container("array name is not UTF-8".into()))?;
            let len = u64::from_le_bytes(read_array(&mut input, "array length")?) as usize;
            let mut raw = vec![0u8; len * 8];
            read_exact(&mut input, &mut raw, "array data")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, values);
        }
        Ok(Self {
            kind,
            header: meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], field: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Container(format!("truncated while reading {field}")))
}

fn read_array<const N: usize>(input: &mut impl Read, field: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(input, &mut buf, field)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let c = Container::new("test", serde_json::json!({"n": values.len()}))
                .unwrap()
                .with_array("v", values.clone());
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Container::read_from(&buf[..]).unwrap();
            let got = &back.arrays["v"];
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.kind, "test");
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let c = Container::new("k", 1).unwrap().with_array("a", vec![1.0, 2.0]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert!(Container::read_from(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Container::read_from(&buf[..]).is_err());
    }
}
