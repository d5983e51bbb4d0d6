//! Named-tensor container.
//!
//! Layout: a UTF-8 manifest terminated by a line `end`, followed by the raw
//! little-endian `f64` payload.
//!
//! ```text
//! semood-checkpoint 1
//! meta seed 42
//! meta epoch 30
//! tensor trunk.0.weight 16,64 0 1024
//! tensor trunk.0.bias 64 8192 64
//! end
//! <payload>
//! ```
//!
//! Tensor lines carry `name shape byte_offset element_count`, offsets being
//! relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AutodiffError, Tensor};

const MAGIC: &str = "semood-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Every checkpoint records the seed of the generator that produced it.
    pub fn new(seed: u64) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), seed.to_string());
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.meta["seed"].parse().expect("seed validated on construction")
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<(), AutodiffError> {
        let value = value.to_string();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(bad(format!("invalid meta key '{key}'")));
        }
        if value.contains('\n') || value.contains('\r') {
            return Err(bad(format!("meta value for '{key}' spans lines")));
        }
        if key == "seed" && value.parse::<u64>().is_err() {
            return Err(bad("seed must be an unsigned integer"));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<(), AutodiffError> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(bad(format!("invalid tensor name '{name}'")));
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(bad(format!("duplicate tensor '{name}'")));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), AutodiffError> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {} {offset} {}", shape.join(","), t.len())?;
            offset += t.len() * 8;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self, AutodiffError> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String, AutodiffError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("manifest truncated"));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };

        if next_line(&mut r)? != MAGIC {
            return Err(bad("missing checkpoint header"));
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("malformed tensor line '{l}'")));
                }
                let shape = f[1]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("bad shape in '{l}': {e}")))?;
                let offset = f[2].parse().map_err(|e| bad(format!("bad offset in '{l}': {e}")))?;
                let count = f[3].parse().map_err(|e| bad(format!("bad count in '{l}': {e}")))?;
                entries.push((f[0].to_string(), shape, offset, count));
            } else {
                return Err(bad(format!("unrecognized manifest line '{l}'")));
            }
        }
        match meta.get("seed") {
            Some(s) if s.parse::<u64>().is_ok() => {}
            _ => return Err(bad("manifest lacks a valid seed")),
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset, count) in entries {
            let end = offset + count * 8;
            if end > payload.len() {
                return Err(bad(format!("tensor '{name}' runs past end of payload")));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AutodiffError> {
        Self::read_from(File::open(path)?)
    }
}
