//! Binary container for named f32 tensors, used for model checkpoints and
//! cached attack outputs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "APNMLCKP"
//! version u32
//! hlen    u32      length of the JSON header
//! header  hlen     {"spec": ModelSpec?, "meta": {string: string}}
//! count   u32      number of records
//! record: nlen u32, name nlen bytes, ndim u32, dims u32*ndim, data f32*prod
//! ```
//!
//! Values are stored and restored bit-for-bit; a reload is byte-identical to
//! what was saved. Every length is validated against the remaining bytes
//! before any allocation, so truncated or corrupt files fail cleanly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"APNMLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<ModelSpec>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: Option<ModelSpec>,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Package model parameters with their spec and provenance strings.
    pub fn for_model(params: &ModelParams<f32>, meta: BTreeMap<String, String>) -> Self {
        let names = params.spec().param_layout();
        Checkpoint {
            spec: Some(params.spec().clone()),
            meta,
            tensors: names
                .into_iter()
                .map(|(n, _, _)| n)
                .zip(params.tensors().iter().cloned())
                .collect(),
        }
    }

    /// Package loose named tensors (attack caches and the like).
    pub fn for_tensors(tensors: Vec<(String, Tensor<f32>)>, meta: BTreeMap<String, String>) -> Self {
        Checkpoint { spec: None, meta, tensors }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header { spec: self.spec.clone(), meta: self.meta.clone() })
            .map_err(|e| Error::Format(format!("header encode: {e}")))?;
        out.extend_from_slice(&u32::try_from(header.len()).expect("header fits").to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).expect("count fits").to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32::try_from(name.len()).expect("name fits").to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32::try_from(t.shape().len()).expect("ndim fits").to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).expect("dim fits").to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Stage next to the target so a crash mid-write never leaves a
        // half-written checkpoint under the real name.
        let staged = path.with_extension("tmp-write");
        std::fs::write(&staged, &out)?;
        std::fs::rename(&staged, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { b: &bytes, at: 0 };

        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a checkpoint file (magic {:02x?})",
                path.display(),
                magic
            )));
        }
        let version = r.u32le()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        let hlen = r.u32le()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;

        let count = r.u32le()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = r.u32le()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|e| Error::Format(format!("record name: {e}")))?;
            let ndim = r.u32le()? as usize;
            if ndim > 32 {
                return Err(Error::Format(format!("record {name}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut len = 1usize;
            for _ in 0..ndim {
                let d = r.u32le()? as usize;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("record {name}: shape overflow")))?;
                shape.push(d);
            }
            let raw = r.take(len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after the last record",
                path.display(),
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint { spec: header.spec, meta: header.meta, tensors })
    }

    /// Rebuild model parameters, verifying names and shapes against the
    /// stored spec (and the caller's expected spec if given).
    pub fn into_model(self, expect: Option<&ModelSpec>) -> Result<(ModelParams<f32>, BTreeMap<String, String>)> {
        let Some(spec) = self.spec else {
            return Err(Error::CheckpointSpec("checkpoint carries no model spec".into()));
        };
        if let Some(want) = expect {
            if *want != spec {
                return Err(Error::CheckpointSpec(format!(
                    "checkpoint holds {spec:?}, expected {want:?}"
                )));
            }
        }
        let layout = spec.param_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::CheckpointSpec(format!(
                "{} records for a spec with {} parameters",
                self.tensors.len(),
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((want_name, want_shape, _), (name, t)) in layout.iter().zip(self.tensors) {
            if *want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::CheckpointSpec(format!(
                    "record {name} {:?} where {want_name} {want_shape:?} belongs",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok((ModelParams::from_tensors(spec, tensors)?, self.meta))
    }
}

/// Save model parameters; `meta` carries provenance strings such as the
/// training seed and epoch count.
pub fn save_model(path: &Path, params: &ModelParams<f32>, meta: BTreeMap<String, String>) -> Result<()> {
    Checkpoint::for_model(params, meta).write(path)
}

/// Load model parameters, optionally insisting on a spec.
pub fn load_model(
    path: &Path,
    expect: Option<&ModelSpec>,
) -> Result<(ModelParams<f32>, BTreeMap<String, String>)> {
    Checkpoint::read(path)?.into_model(expect)
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::CheckpointTruncated(format!(
                "need {n} bytes at offset {}, file has {}",
                self.at,
                self.b.len()
            ))
        })?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4-byte slice")))
    }
}
