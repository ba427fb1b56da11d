//! Little-endian byte codec shared by the checkpoint, task-vector, dataset and
//! curvature file formats.
//!
//! Every container file has the same outer shape: an 8-byte magic, a `u64`
//! length, a JSON header of that length, then a binary payload. Readers track
//! the absolute byte offset so corrupt files report where decoding failed.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, TakError};

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error(&self, message: impl Into<String>) -> TakError {
        TakError::Format {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "unexpected end of data: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let at = self.offset();
        let got = self.take(8)?;
        if got != magic {
            return Err(TakError::Format {
                offset: at,
                message: format!(
                    "bad magic: expected {:?}, got {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    /// Reads a `u64`-length-prefixed JSON header.
    pub fn json<T: DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.u64()? as usize;
        let at = self.offset();
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| TakError::Format {
            offset: at + e.column() as u64,
            message: format!("invalid JSON header: {e}"),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn json<T: Serialize>(&mut self, header: &T) -> Result<()> {
        let raw = serde_json::to_vec(header).map_err(|e| TakError::Data(e.to_string()))?;
        self.u64(raw.len() as u64);
        self.bytes(&raw);
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
