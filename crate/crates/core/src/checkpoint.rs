//! Parameter checkpoints.
//!
//! A checkpoint is a UTF-8 text header followed by raw little-endian `f64`
//! values:
//!
//! ```text
//! deshadow-checkpoint 1
//! meta <key> <value>          (zero or more, sorted by key)
//! param <name> <d0>x<d1>x...  (one per tensor, in storage order)
//! end
//! <binary payload>
//! ```
//!
//! The payload holds every parameter's values in header order, row-major,
//! 8 bytes per value, with no padding between tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const MAGIC: &str = "deshadow-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) {
        for (name, t) in entries {
            let mut t = t.clone();
            t.clear_grad();
            self.tensors.push((name.to_string(), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").expect("vec write");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') || k.is_empty() {
                return Err(Error::Checkpoint(format!("invalid meta entry `{k}`")));
            }
            writeln!(out, "meta {k} {v}").expect("vec write");
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "invalid parameter name `{name}`"
                )));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() {
                "scalar".to_string()
            } else {
                dims.join("x")
            };
            writeln!(out, "param {name} {dims}").expect("vec write");
        }
        writeln!(out, "end").expect("vec write");
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a deshadow checkpoint".into()));
        }
        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| bad(format!("bad dimension in `{line}`")))
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                specs.push((name.to_string(), shape));
            } else {
                return Err(bad(format!("unexpected header line `{line}`")));
            }
        }
        let payload = &bytes[pos..];
        let total: usize = specs.iter().map(|(_, s)| numel(s)).sum();
        if payload.len() != total * 8 {
            return Err(bad(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let data: Vec<f64> = values.by_ref().take(numel(&shape)).collect();
            let t =
                Tensor::new(shape, data).map_err(|e| bad(format!("parameter `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
