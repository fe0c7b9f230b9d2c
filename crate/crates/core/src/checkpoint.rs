//! Single-file checkpoint container.
//!
//! Byte layout:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SVPCKPT1"
//! 8       8     header length H, u64 little-endian
//! 16      H     UTF-8 JSON header
//! 16+H    32    SHA-256 of the header bytes
//! 48+H    4·N   payload: little-endian f32 values of every tensor, in
//!               header order, each tensor row-major
//! ```
//!
//! The header records the model kind, its configuration, tensor names and
//! shapes, dtype (`"f32"`), training step, optional noise-schedule
//! parameters, free-form metadata, and the SHA-256 of the payload. A
//! mismatch of either digest is reported as a corrupt checkpoint.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SVPCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    dtype: String,
    step: u64,
    schedule: Option<ScheduleParams>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub schedule: Option<ScheduleParams>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(4 * self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        for (_, t) in &self.tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            dtype: "f32".into(),
            step: self.step,
            schedule: self.schedule,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(48 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Checkpoint { path: origin.to_path_buf(), reason: reason.into() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e + 32 <= bytes.len());
        let header_end = header_end.ok_or_else(|| corrupt("truncated header"))?;
        let header_bytes = &bytes[16..header_end];
        if Sha256::digest(header_bytes).as_slice() != &bytes[header_end..header_end + 32] {
            return Err(corrupt("header checksum mismatch"));
        }
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &bytes[header_end + 32..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * total {
            return Err(corrupt("payload length does not match tensor shapes"));
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            schedule: header.schedule,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless the checkpoint holds a model of the given kind.
    pub fn expect_kind(&self, kind: &str, origin: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: origin.to_path_buf(),
                reason: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(())
    }
}
