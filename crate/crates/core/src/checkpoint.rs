//! Named-tensor checkpoint container.
//!
//! Layout: magic `CKP1`, u32 header length and UTF-8 `key = value` header,
//! u32 entry count, the name table (u32 length + bytes per name), then one
//! u32-length-prefixed `.tns` blob per entry in table order. Integers are
//! little-endian.

use std::fs;
use std::path::Path;

use cram_diff::tns::{self, Cursor};
use cram_diff::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, _) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (_, t) in &self.entries {
            let blob = tns::encode(t);
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, 0);
        if cur.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let text = |cur: &mut Cursor| -> Result<String> {
            let len = cur.u32()? as usize;
            let at = cur.offset();
            let raw = cur.take(len)?;
            String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8"))
        };
        let header = text(&mut cur)?;
        let count = cur.u32()? as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            names.push(text(&mut cur)?);
        }
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let len = cur.u32()? as usize;
            let base = cur.offset();
            let mut inner = Cursor::new(cur.take(len)?, base);
            let t = tns::read::<f32>(&mut inner).map_err(|e| Error::format(base, format!("entry `{name}`: {e}")))?;
            if inner.remaining() != 0 {
                return Err(Error::format(inner.offset(), format!("entry `{name}`: stray bytes")));
            }
            entries.push((name, t));
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes after last entry"));
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
