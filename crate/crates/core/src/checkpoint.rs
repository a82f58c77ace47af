//! Self-describing checkpoint container.
//!
//! Layout on disk:
//!
//! ```text
//! magic        8 bytes   b"BNNCKPT\0"
//! version      u32 LE    currently 1
//! header_len   u64 LE
//! header       JSON      kind, layout entries, tags, scalars, vector names/lengths
//! payload      f64 LE    each vector in header order, concatenated
//! ```
//!
//! Values are stored as raw little-endian IEEE-754 bits, so a reload is
//! bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayoutEntry, ParamLayout};

const MAGIC: &[u8; 8] = b"BNNCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    layout: Vec<LayoutEntry>,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
    vectors: Vec<VectorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    layout: Arc<ParamLayout>,
    tags: BTreeMap<String, String>,
    scalars: BTreeMap<String, f64>,
    vectors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, layout: Arc<ParamLayout>) -> Self {
        Checkpoint {
            kind: kind.into(),
            layout,
            tags: BTreeMap::new(),
            scalars: BTreeMap::new(),
            vectors: Vec::new(),
        }
    }

    pub fn with_vector(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.vectors.push((name.into(), values));
        self
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn with_scalar(mut self, key: impl Into<String>, value: f64) -> Self {
        self.scalars.insert(key.into(), value);
        self
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        self.vectors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    pub(crate) fn require_vector(&self, name: &str) -> Result<&[f64]> {
        self.vector(name)
            .ok_or_else(|| Error::Layout(format!("checkpoint of kind `{}` has no vector `{name}`", self.kind)))
    }

    /// The deterministic center of whatever the checkpoint stores: plain
    /// parameters, a variational mean, an SGLD running mean or a MAP estimate.
    pub fn center(&self) -> Result<&[f64]> {
        let name = match self.kind.as_str() {
            "point" => "params",
            "vi" | "mc_dropout" => "m",
            "sgld" => "mean",
            "laplace" => "theta_star",
            other => {
                return Err(Error::Layout(format!("unknown checkpoint kind `{other}`")));
            }
        };
        self.require_vector(name)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        for (name, v) in &self.vectors {
            if v.len() != self.layout.len() {
                return Err(Error::Layout(format!(
                    "vector `{name}` has {} entries, layout has {}",
                    v.len(),
                    self.layout.len()
                )));
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            layout: self.layout.entries().to_vec(),
            tags: self.tags.clone(),
            scalars: self.scalars.clone(),
            vectors: self
                .vectors
                .iter()
                .map(|(name, v)| VectorHeader {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.vectors.iter().map(|(_, v)| v.len() * 8).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + payload);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, v) in &self.vectors {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        let layout = ParamLayout::from_entries(header.layout)?;

        let mut payload = &body[header_len..];
        let mut vectors = Vec::with_capacity(header.vectors.len());
        for vh in header.vectors {
            let nbytes = vh.len * 8;
            if payload.len() < nbytes {
                return Err(bad(format!("truncated payload in vector `{}`", vh.name)));
            }
            let values = payload[..nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[nbytes..];
            vectors.push((vh.name, values));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(Checkpoint {
            kind: header.kind,
            layout: Arc::new(layout),
            tags: header.tags,
            scalars: header.scalars,
            vectors,
        })
    }
}
