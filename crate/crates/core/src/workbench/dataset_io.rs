//! On-disk dataset layout: a text manifest plus one little-endian f32
//! frame blob per utterance.
//!
//! ```text
//! <dir>/manifest.tsv     header line, then "<utt_id>\t<n_frames>\t<ids...>"
//! <dir>/frames/<utt_id>.f32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::task::{Dataset, DatasetMeta, Utterance};

const MANIFEST_VERSION: &str = "parrot-dataset-v1";

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut manifest = String::new();
    writeln!(
        manifest,
        "{MANIFEST_VERSION}\tframe_dim={}\tframes_per_token={}\tvocab_size={}",
        ds.meta.frame_dim, ds.meta.frames_per_token, ds.meta.vocab_size
    )
    .expect("string write");
    for u in &ds.utts {
        let ids: Vec<String> = u.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(manifest, "{}\t{}\t{}", u.id, u.n_frames, ids.join(" ")).expect("string write");
        let mut blob = Vec::with_capacity(u.frames.len() * 4);
        for &v in &u.frames {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("frames").join(format!("{}.f32", u.id)), blob)?;
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty dataset manifest"))?;
    let mut fields = header.split('\t');
    let version = fields.next().unwrap_or("");
    if version != MANIFEST_VERSION {
        return Err(Error::data(format!(
            "unsupported dataset manifest version '{version}' (expected {MANIFEST_VERSION})"
        )));
    }
    let mut meta = DatasetMeta {
        frame_dim: 0,
        frames_per_token: 0,
        vocab_size: 0,
    };
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad manifest header field '{field}'")))?;
        let value: usize = value
            .parse()
            .map_err(|_| Error::data(format!("bad manifest header value '{field}'")))?;
        match key {
            "frame_dim" => meta.frame_dim = value,
            "frames_per_token" => meta.frames_per_token = value,
            "vocab_size" => meta.vocab_size = value,
            _ => {}
        }
    }
    if meta.frame_dim == 0 || meta.vocab_size == 0 {
        return Err(Error::data("dataset manifest missing frame_dim/vocab_size"));
    }

    let mut utts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::data(format!("manifest line {}: missing utt id", lineno + 2)))?;
        let n_frames: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("manifest line {}: bad n_frames", lineno + 2)))?;
        let tokens: Vec<u32> = match parts.next() {
            Some(rest) if !rest.is_empty() => rest
                .split_whitespace()
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| Error::data(format!("manifest line {}: bad token id '{s}'", lineno + 2)))
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let blob_path = dir.join("frames").join(format!("{id}.f32"));
        let blob =
            fs::read(&blob_path).map_err(|e| Error::data(format!("{}: {e}", blob_path.display())))?;
        if blob.len() != n_frames * meta.frame_dim * 4 {
            return Err(Error::data(format!(
                "{}: expected {} bytes for {} frames x {} dims, got {}",
                blob_path.display(),
                n_frames * meta.frame_dim * 4,
                n_frames,
                meta.frame_dim,
                blob.len()
            )));
        }
        let frames: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        utts.push(Utterance {
            id: id.to_string(),
            frames,
            n_frames,
            tokens,
        });
    }
    Ok(Dataset { meta, utts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::task::{generate_task, TaskConfig};

    #[test]
    fn round_trip() {
        let task = generate_task(&TaskConfig {
            n_train: 6,
            ..TaskConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&task.train, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.meta, task.train.meta);
        assert_eq!(loaded.utts.len(), task.train.utts.len());
        for (a, b) in task.train.utts.iter().zip(&loaded.utts) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "other-v9\tframe_dim=4\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
