//! Named-array container used for model checkpoints.
//!
//! Layout (version 1):
//!
//! ```text
//! DIFFCORE-CKPT 1\n
//! records <count>\n
//! then per record:
//!   <name> <rank> <dim_0> ... <dim_{rank-1}>\n
//!   <prod(dims) little-endian f64 values>
//! ```
//!
//! A parameter `p` is stored as four records: `p` (value), `p#m`, `p#v`
//! (Adam moments) and `p#step` (one value holding the step counter).

use std::path::Path;

use crate::error::{DiffError, Result};
use crate::params::{Param, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &str = "DIFFCORE-CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad(format!("invalid record name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(bad(format!("duplicate record `{name}`")));
        }
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends every parameter of `set` (value and Adam state) under `prefix`.
    pub fn add_params(&mut self, prefix: &str, set: &ParamSet) -> Result<()> {
        for p in set.iter() {
            let name = format!("{prefix}{}", p.name);
            self.push(name.clone(), p.value.clone())?;
            self.push(format!("{name}#m"), p.m.clone())?;
            self.push(format!("{name}#v"), p.v.clone())?;
            self.push(format!("{name}#step"), Tensor::scalar(p.step as f64))?;
        }
        Ok(())
    }

    /// Rebuilds the parameters stored under `prefix`, in file order.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, value) in &self.records {
            let Some(local) = name.strip_prefix(prefix) else {
                continue;
            };
            if local.contains('#') {
                continue;
            }
            let state = |suffix: &str| {
                self.get(&format!("{name}#{suffix}"))
                    .cloned()
                    .ok_or_else(|| bad(format!("missing `{name}#{suffix}`")))
            };
            let step = state("step")?;
            if step.len() != 1 || step.item() < 0.0 || step.item().fract() != 0.0 {
                return Err(bad(format!("bad step counter for `{name}`")));
            }
            set.push(Param {
                name: local.to_string(),
                value: value.clone(),
                m: state("m")?,
                v: state("v")?,
                step: step.item() as u64,
            })?;
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION}\nrecords {}\n", self.records.len()).into_bytes();
        for (name, t) in &self.records {
            let mut header = format!("{name} {}", t.rank());
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
            out.extend_from_slice(header.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut line = || -> Result<String> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unexpected end of header"))?;
            let s = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            cursor += end + 1;
            Ok(s.to_string())
        };
        let magic = line()?;
        match magic.split_once(' ') {
            Some((MAGIC, v)) if v.parse::<u32>().ok() == Some(VERSION) => {}
            _ => return Err(bad(format!("unsupported header {magic:?}"))),
        }
        let count_line = line()?;
        let count: usize = count_line
            .strip_prefix("records ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(format!("bad record count line {count_line:?}")))?;

        let mut ckpt = Checkpoint::new();
        let mut pos = cursor;
        for _ in 0..count {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated record header"))?;
            let header =
                std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            pos += end + 1;
            let mut parts = header.split(' ');
            let name = parts.next().ok_or_else(|| bad("empty record header"))?;
            let rank: usize = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| bad(format!("bad rank in {header:?}")))?;
            let dims: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| bad(format!("bad dim in {header:?}"))))
                .collect::<Result<_>>()?;
            if dims.len() != rank {
                return Err(bad(format!(
                    "rank {rank} but {} dims in {header:?}",
                    dims.len()
                )));
            }
            let n: usize = dims.iter().product();
            let len = n * 8;
            if bytes.len() < pos + len {
                return Err(bad(format!("truncated payload for `{name}`")));
            }
            let data = bytes[pos..pos + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += len;
            ckpt.push(name, Tensor::new(&dims, data)?)?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_with_adam_state() {
        let mut set = ParamSet::new();
        set.insert(
            "conv.w",
            Tensor::new(&[2, 1, 1, 1], vec![0.5, -1.25]).unwrap(),
        )
        .unwrap();
        set.insert("conv.b", Tensor::new(&[2], vec![0.0, 3.0]).unwrap())
            .unwrap();
        let grads = vec![
            Tensor::new(&[2, 1, 1, 1], vec![0.1, -0.2]).unwrap(),
            Tensor::new(&[2], vec![1.0, 0.0]).unwrap(),
        ];
        set.adam_step(&grads, &Default::default()).unwrap();

        let mut ckpt = Checkpoint::new();
        ckpt.add_params("deq/", &set).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.params("deq/").unwrap(), set);
        assert!(back.params("lin/").unwrap().is_empty());
    }

    #[test]
    fn header_layout_is_stable() {
        let mut ckpt = Checkpoint::new();
        ckpt.push("a", Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let bytes = ckpt.to_bytes();
        let text = b"DIFFCORE-CKPT 1\nrecords 1\na 2 1 2\n";
        assert_eq!(&bytes[..text.len()], text);
        assert_eq!(&bytes[text.len()..text.len() + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), text.len() + 16);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut ckpt = Checkpoint::new();
        ckpt.push("x", Tensor::zeros(&[4])).unwrap();
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE 1\nrecords 0\n").is_err());
        assert!(Checkpoint::from_bytes(b"DIFFCORE-CKPT 2\nrecords 0\n").is_err());
    }

    #[test]
    fn rejects_names_with_spaces() {
        let mut ckpt = Checkpoint::new();
        assert!(ckpt.push("bad name", Tensor::zeros(&[1])).is_err());
    }
}
