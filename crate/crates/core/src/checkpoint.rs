//! Checkpoint persistence.
//!
//! A checkpoint file is a UTF-8 manifest followed by a little-endian f32
//! blob:
//!
//! ```text
//! PETSCKPT 1
//! meta <key> <value>
//! tensor <name> <d0,d1,...> <byte-offset>
//! blob <byte-count>
//! <raw f32 little-endian data>
//! ```
//!
//! Tensor entries appear in insertion order and offsets index into the blob.
//! All trainable state is kept on the f32 grid, so save → load → save is
//! byte-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::nn::ParameterSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "PETSCKPT 1";

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: IndexMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(char::is_whitespace), "meta key `{key}`");
        debug_assert!(!value.contains('\n'), "meta value must be single-line");
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("meta key `{key}` failed to parse")))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(!name.contains(char::is_whitespace), "tensor name `{name}`");
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Store a parameter set under a prefix, including optimizer state.
    pub fn put_params(&mut self, prefix: &str, params: &ParameterSet) {
        for (name, t) in params.params() {
            self.insert(&format!("{prefix}.{name}"), t.clone());
        }
        let (m, v) = params.moments();
        for (name, t) in m {
            self.insert(&format!("{prefix}.adam.m.{name}"), t.clone());
        }
        for (name, t) in v {
            self.insert(&format!("{prefix}.adam.v.{name}"), t.clone());
        }
        self.set_meta(&format!("{prefix}.step"), params.step_count());
    }

    /// Rebuild a parameter set stored with [`Checkpoint::put_params`].
    pub fn get_params(&self, prefix: &str) -> Result<ParameterSet> {
        let mut params = IndexMap::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let ppre = format!("{prefix}.");
        let mpre = format!("{prefix}.adam.m.");
        let vpre = format!("{prefix}.adam.v.");
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&mpre) {
                m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix(&vpre) {
                v.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix(&ppre) {
                params.insert(rest.to_string(), t.clone());
            }
        }
        if params.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors under `{prefix}`")));
        }
        let step = self.meta_parsed(&format!("{prefix}.step"))?;
        Ok(ParameterSet::restore(params, m, v, step))
    }

    /// Serialize to the manifest + blob encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            let offset = blob.len();
            for v in t.to_f32() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {offset}\n", dims.join(",")));
        }
        manifest.push_str(&format!("blob {}\n", blob.len()));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // split manifest (text until after the `blob N` line) from the blob
        let mut ckpt = Checkpoint::new();
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let mut pending: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let blob_len;
        loop {
            let rest = &bytes[pos..];
            let eol = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..eol])
                .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
            pos += eol + 1;
            if line_no == 0 {
                if line != MAGIC {
                    return Err(Error::Checkpoint(format!("bad magic line `{line}`")));
                }
                line_no += 1;
                continue;
            }
            line_no += 1;
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let rest = parts.next().unwrap_or("");
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 3 {
                        return Err(Error::Checkpoint(format!("bad tensor line `{line}`")));
                    }
                    let dims: Vec<usize> = fields[1]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Checkpoint(format!("bad dims in `{line}`")))?;
                    let offset: usize = fields[2]
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad offset in `{line}`")))?;
                    pending.push((fields[0].to_string(), dims, offset));
                }
                Some("blob") => {
                    blob_len = parts
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::Checkpoint(format!("bad blob line `{line}`")))?;
                    break;
                }
                _ => return Err(Error::Checkpoint(format!("unknown manifest line `{line}`"))),
            }
        }
        let blob = &bytes[pos..];
        if blob.len() != blob_len {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match manifest ({blob_len})",
                blob.len()
            )));
        }
        for (name, dims, offset) in pending {
            let numel: usize = dims.iter().product();
            let end = offset + numel * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` overruns blob")));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in blob[offset..end].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
            ckpt.tensors.insert(name, Tensor::from_vec(&dims, data)?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}
