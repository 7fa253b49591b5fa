//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MADECKPT" | u32 version
//! u32 len | UTF-8 header (`key = value` lines: model config, then metadata)
//! u32 tensor count
//! per tensor: u32 name len | name | u32 ndim | u64 dims... | f64 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, NullDescription};

pub const MAGIC: &[u8; 8] = b"MADECKPT";
pub const VERSION: u32 = 1;

/// Prefix that separates metadata keys from model config keys in the header.
const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Free-form provenance such as epoch and step.
    pub meta: BTreeMap<String, String>,
}

pub fn config_to_pairs(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("height", c.height.to_string()),
        ("width", c.width.to_string()),
        ("patch_size", c.patch_size.to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("heads", c.heads.to_string()),
        ("mlp_hidden", c.mlp_hidden.to_string()),
        (
            "stage_layers",
            c.stage_layers.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("desc_tokens", c.desc_tokens.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("num_classes", c.num_classes.to_string()),
        ("use_description", c.use_description.to_string()),
        ("null_description", c.null_description.name().to_string()),
    ]
}

/// Parse a `a,b,c` stage split.
pub fn parse_stage_layers(v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("stage_layers needs three values, got `{v}`")));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| Error::Config(format!("bad stage layer count `{p}`")))?;
    }
    Ok(out)
}

fn config_from_pairs(pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<&str> {
        pairs
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header is missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header value for `{k}` is not an integer")))
    };
    let config = ModelConfig {
        height: num("height")?,
        width: num("width")?,
        patch_size: num("patch_size")?,
        embed_dim: num("embed_dim")?,
        heads: num("heads")?,
        mlp_hidden: num("mlp_hidden")?,
        stage_layers: parse_stage_layers(get("stage_layers")?)?,
        desc_tokens: num("desc_tokens")?,
        vocab_size: num("vocab_size")?,
        num_classes: num("num_classes")?,
        use_description: get("use_description")?
            .parse()
            .map_err(|_| Error::Checkpoint("use_description must be true or false".into()))?,
        null_description: get("null_description")?.parse::<NullDescription>()?,
    };
    Ok(config)
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in config_to_pairs(&self.model.config) {
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("{META_PREFIX}{k} = {v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let tensors = self.model.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut pairs = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
            match k.strip_prefix(META_PREFIX) {
                Some(m) => meta.insert(m.to_string(), v.to_string()),
                None => pairs.insert(k.to_string(), v.to_string()),
            };
        }
        let config = config_from_pairs(&pairs)?;
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, config implies {}",
                expected.len()
            )));
        }
        for ((want_name, want_shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            if &name != want_name || &shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {shape:?} does not match expected `{want_name}` {want_shape:?}"
                )));
            }
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self {
            model: Model::from_parts(config, params)?,
            meta,
        })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// truncated checkpoint in place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
