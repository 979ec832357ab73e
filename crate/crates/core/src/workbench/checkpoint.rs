//! Checkpoints: a versioned text manifest (ordered tensor names, shapes,
//! dtype, byte offsets), a single little-endian float32 blob, and the
//! model config.
//!
//! ```text
//! <dir>/manifest.txt    "parrot-checkpoint-v1" + one line per tensor
//! <dir>/weights.bin     concatenated LE f32 data in manifest order
//! <dir>/config.toml     the ModelConfig
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};

const CHECKPOINT_VERSION: &str = "parrot-checkpoint-v1";

pub fn save_checkpoint(model: &TransformerModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "{CHECKPOINT_VERSION}").expect("string write");
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in model.named_params() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name}\t{}\tf32\t{}", dims.join(","), blob.len())
            .expect("string write");
        for &v in tensor.data().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("weights.bin"), blob)?;
    let config = toml::to_string_pretty(model.config())
        .map_err(|e| Error::data(format!("serialize model config: {e}")))?;
    fs::write(dir.join("config.toml"), config)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TransformerModel> {
    let config_text = fs::read_to_string(dir.join("config.toml"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("config.toml").display())))?;
    let cfg: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| Error::data(format!("bad checkpoint config: {e}")))?;
    // Construction RNG is irrelevant: every parameter is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = TransformerModel::new(cfg, &mut rng)?;

    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("manifest.txt").display())))?;
    let blob = fs::read(dir.join("weights.bin"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("weights.bin").display())))?;

    let mut lines = manifest.lines();
    let version = lines.next().unwrap_or("");
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version '{version}' (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut entries: HashMap<String, (Vec<usize>, usize)> = HashMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 || parts[2] != "f32" {
            return Err(Error::data(format!(
                "manifest line {}: expected 'name\\tdims\\tf32\\toffset'",
                lineno + 2
            )));
        }
        let dims: Vec<usize> = parts[1]
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::data(format!("manifest line {}: bad dims", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| Error::data(format!("manifest line {}: bad offset", lineno + 2)))?;
        if entries.insert(parts[0].to_string(), (dims, offset)).is_some() {
            return Err(Error::data(format!("duplicate tensor '{}'", parts[0])));
        }
    }

    let named = model.named_params();
    if named.len() != entries.len() {
        return Err(Error::data(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            named.len()
        )));
    }
    for (name, tensor) in named {
        let (dims, offset) = entries
            .get(&name)
            .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{name}'")))?;
        if *dims != tensor.shape() {
            return Err(Error::data(format!(
                "tensor '{name}': checkpoint shape {dims:?} != model shape {:?}",
                tensor.shape()
            )));
        }
        let nbytes = tensor.numel() * 4;
        if offset + nbytes > blob.len() {
            return Err(Error::data(format!(
                "tensor '{name}': data range {offset}..{} exceeds blob of {} bytes",
                offset + nbytes,
                blob.len()
            )));
        }
        let values: Vec<f32> = blob[*offset..offset + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensor.copy_from(&values)?;
    }
    Ok(model)
}
