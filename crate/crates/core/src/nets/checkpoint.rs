use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

const MAGIC: &str = "FMCKPT1";

/// A checkpoint file: a text manifest (metadata lines, then one line per
/// tensor with name/dtype/shape) followed by the raw little-endian f64
/// payload of every tensor in manifest order.
///
/// The manifest must carry `seed` and `config_hash`; training adds its
/// own counters (iteration, epoch, cursor) as extra metadata so a resume
/// can rebuild its random streams exactly.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(seed: u64, config_hash: &str) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert("config_hash".to_string(), config_hash.to_string());
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor) {
        self.tensors.push((name.to_string(), tensor.clone()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Input(format!("checkpoint has no meta key {key:?}")))?
            .parse()
            .map_err(|_| Error::Input(format!("checkpoint meta {key:?} is not an integer")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.meta.contains_key("seed") || !self.meta.contains_key("config_hash") {
            return Err(Error::Contract(
                "checkpoint manifest needs seed and config_hash".into(),
            ));
        }
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Contract(format!("unserializable meta key {k:?}")));
            }
            manifest.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("tensor name {name:?} has spaces")));
            }
            let dims = t
                .shape()
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let dims = if dims.is_empty() { "scalar".into() } else { dims };
            manifest.push_str(&format!("tensor {name} f64 {dims}\n"));
        }
        manifest.push_str("end\n");

        let mut file = std::fs::File::create(path)?;
        file.write_all(manifest.as_bytes())?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let header_end = find_header_end(&bytes)?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Input("checkpoint manifest is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Input("not a checkpoint file (bad magic)".into()));
        }

        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Input(format!("bad meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[1] != "f64" {
                    return Err(Error::Input(format!("bad tensor line {line:?}")));
                }
                let shape: Vec<usize> = if parts[2] == "scalar" {
                    Vec::new()
                } else {
                    parts[2]
                        .split('x')
                        .map(|d| {
                            d.parse()
                                .map_err(|_| Error::Input(format!("bad extent {d:?}")))
                        })
                        .collect::<Result<_>>()?
                };
                specs.push((parts[0].to_string(), shape));
            } else {
                return Err(Error::Input(format!("bad manifest line {line:?}")));
            }
        }

        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let numel: usize = shape.iter().product();
            let need = numel * 8;
            if offset + need > bytes.len() {
                return Err(Error::Input(format!(
                    "checkpoint payload truncated at tensor {name:?}"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in bytes[offset..offset + need].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            offset += need;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if offset != bytes.len() {
            return Err(Error::Input("trailing bytes after checkpoint payload".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end\n";
    let mut at = 0;
    while at + needle.len() <= bytes.len() {
        if &bytes[at..at + needle.len()] == needle
            && (at == 0 || bytes[at - 1] == b'\n')
        {
            return Ok(at + needle.len());
        }
        at += 1;
    }
    Err(Error::Input("checkpoint manifest has no end marker".into()))
}
