//! Checkpoints: a text manifest next to a blob of little-endian f64s.
//!
//! ```text
//! format=embgate-checkpoint
//! version=1
//! config.layers=2
//! ...
//! meta.vocab=vocab.txt
//! blob=params.bin
//! blob_len=12345
//! blob_sha256=…
//! tensor=embed.word 600x32 0
//! ```
//!
//! Tensor lines give name, shape and byte offset, in blob order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{InjectionMode, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "embgate-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";

/// A loaded model plus the free-form `meta.*` entries saved with it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

fn config_entries(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("layers", c.layers.to_string()),
        ("hidden", c.hidden.to_string()),
        ("ext_dim", c.ext_dim.to_string()),
        ("heads", c.heads.to_string()),
        ("ffn", c.ffn.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("num_classes", c.num_classes.to_string()),
        ("injection_mode", c.injection_mode.to_string()),
        ("injection_layer", c.injection_layer.to_string()),
        ("layer_norm_eps", c.layer_norm_eps.to_string()),
        ("init_std", c.init_std.to_string()),
    ]
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn config_from(entries: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        entries
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("manifest lacks config.{k}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("config.{k} is not an integer")))
    };
    let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("config.{k} is not a number"))) };
    Ok(ModelConfig {
        layers: int("layers")?,
        hidden: int("hidden")?,
        ext_dim: int("ext_dim")?,
        heads: int("heads")?,
        ffn: int("ffn")?,
        max_seq_len: int("max_seq_len")?,
        vocab_size: int("vocab_size")?,
        num_classes: int("num_classes")?,
        injection_mode: get("injection_mode")?
            .parse::<InjectionMode>()
            .map_err(|e| bad(e.to_string()))?,
        injection_layer: int("injection_layer")?,
        layer_norm_eps: float("layer_norm_eps")?,
        init_std: float("init_std")?,
    })
}

/// Renders the manifest and blob without touching the filesystem.
pub fn encode(model: &Model, meta: &BTreeMap<String, String>) -> (String, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    let mut tensors = String::new();
    for (_, name, t) in model.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(tensors, "tensor={name} {} {}", shape.join("x"), blob.len());
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut m = format!("format={FORMAT}\nversion={VERSION}\n");
    for (k, v) in config_entries(&model.config) {
        let _ = writeln!(m, "config.{k}={v}");
    }
    for (k, v) in meta {
        let _ = writeln!(m, "meta.{k}={v}");
    }
    let _ = writeln!(m, "blob={BLOB_FILE}");
    let _ = writeln!(m, "blob_len={}", blob.len());
    let _ = writeln!(m, "blob_sha256={}", hex::encode(Sha256::digest(&blob)));
    m.push_str(&tensors);
    (m, blob)
}

/// Writes `manifest.txt` and `params.bin` into `dir`, creating it.
pub fn save(dir: impl AsRef<Path>, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model, meta);
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Parses a manifest and its blob back into a model, verifying version,
/// length, checksum and every tensor's shape.
pub fn decode(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let mut config = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut header = BTreeMap::new();
    let mut tensors = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("manifest line {}: expected key=value", n + 1)))?;
        if let Some(k) = key.strip_prefix("config.") {
            config.insert(k.to_string(), value.to_string());
        } else if let Some(k) = key.strip_prefix("meta.") {
            meta.insert(k.to_string(), value.to_string());
        } else if key == "tensor" {
            let parts: Vec<&str> = value.split_whitespace().collect();
            let [name, shape, offset] = parts[..] else {
                return Err(bad(format!("manifest line {}: malformed tensor entry", n + 1)));
            };
            let shape = shape
                .split('x')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("manifest line {}: bad shape `{shape}`", n + 1)))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| bad(format!("manifest line {}: bad offset", n + 1)))?;
            tensors.push((name.to_string(), shape, offset));
        } else {
            header.insert(key.to_string(), value.to_string());
        }
    }

    match header.get("format").map(String::as_str) {
        Some(FORMAT) => {}
        other => return Err(bad(format!("not a checkpoint manifest (format={other:?})"))),
    }
    match header.get("version").map(String::as_str) {
        Some(v) if v == VERSION.to_string() => {}
        other => {
            return Err(bad(format!(
                "unsupported checkpoint version {other:?}, expected {VERSION}"
            )))
        }
    }
    let expected_len: usize = header
        .get("blob_len")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("manifest lacks blob_len"))?;
    if blob.len() != expected_len {
        return Err(bad(format!(
            "blob is {} bytes, manifest says {expected_len}",
            blob.len()
        )));
    }
    let digest = hex::encode(Sha256::digest(blob));
    if header.get("blob_sha256") != Some(&digest) {
        return Err(bad("blob checksum does not match manifest"));
    }

    let mut params = ParamStore::new();
    let mut cursor = 0;
    for (name, shape, offset) in tensors {
        let n: usize = shape.iter().product();
        if offset != cursor || offset + n * 8 > blob.len() {
            return Err(bad(format!("tensor `{name}` has inconsistent offset {offset}")));
        }
        let data = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        cursor = offset + n * 8;
        params
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| bad(e.to_string()))?;
    }
    if cursor != blob.len() {
        return Err(bad(format!("{} trailing bytes in blob", blob.len() - cursor)));
    }
    let config = config_from(&config)?;
    let model = Model::from_params(config, params)?;
    Ok(Checkpoint { model, meta })
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_name = manifest
        .lines()
        .find_map(|l| l.strip_prefix("blob="))
        .unwrap_or(BLOB_FILE);
    let blob_path: PathBuf = dir.join(blob_name);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode(&manifest, &blob)
}
