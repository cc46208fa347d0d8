//! Serialized-parameter checkpoint files.
//!
//! Layout (all integers little endian):
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 8     | magic `DLMPCKPT`                                     |
//! | 4     | format version (`1`)                                 |
//! | 4     | header length `n` in bytes                           |
//! | n     | UTF-8 JSON header `{kind, config, param_count}`      |
//! | 8 * k | `param_count` IEEE-754 `f64` values                  |
//!
//! Parameters are stored in double precision regardless of the precision
//! a network was trained in, so loading is bit exact for `f64` models.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 8] = b"DLMPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    param_count: usize,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, params: Vec<f64>) -> Self {
        Self {
            kind: kind.to_owned(),
            config,
            params,
        }
    }

    pub fn config_as<T: DeserializeOwned>(&self, kind: &str) -> Result<T> {
        ensure!(
            self.kind == kind,
            Format,
            "checkpoint holds a `{}`, expected `{kind}`",
            self.kind
        );
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            param_count: self.params.len(),
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 16 && &bytes[..8] == MAGIC,
            Format,
            "not a checkpoint file"
        );
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        ensure!(version == VERSION, Format, "unsupported checkpoint version {version}");
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        ensure!(bytes.len() >= 16 + hlen, Format, "truncated checkpoint header");
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let body = &bytes[16 + hlen..];
        ensure!(
            body.len() == 8 * header.param_count,
            Format,
            "checkpoint declares {} parameters but carries {} bytes",
            header.param_count,
            body.len()
        );
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind: header.kind,
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(params in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let ckpt = Checkpoint::new("thing", serde_json::json!({"width": 3}), params);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let bytes = Checkpoint::new("k", serde_json::json!({}), vec![1.0, 2.0]).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let c = Checkpoint::new("scorer", serde_json::json!({}), vec![]);
        assert!(c.config_as::<serde_json::Value>("denoiser").is_err());
    }
}
