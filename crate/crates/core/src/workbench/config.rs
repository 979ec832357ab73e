//! The experiment config file: one TOML document with `[task]`, `[model]`,
//! `[train]`, `[beam]` and optional `[sampling]` sections, plus a
//! top-level `seed`. Command-line overrides are dotted `--key value`
//! pairs applied onto the parsed tree before deserialization.
//!
//! Seed precedence: `--seed` override > `seed` in the file > the
//! `PARROT_SEED` environment variable > 17.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampling::{HypothesisSource, MixLevel, ScheduleConfig, StepUnit};

use super::presets::DEFAULT_CHANNEL_RATES;
use super::task::TaskConfig;
use super::train::TrainConfig;

pub const SEED_ENV_VAR: &str = "PARROT_SEED";
pub const DEFAULT_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    ExternalFile,
    ErrorChannel,
    OfflineSelf,
    OnlineSelf,
}

/// `[sampling]` section: schedule plus hypothesis source in one place.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub source: SourceKind,
    pub p_min: f32,
    pub n_st: u32,
    pub n_ed: u32,
    pub step_unit: StepUnit,
    pub mix_level: MixLevel,
    /// Online self-decoding passes.
    pub n_passes: usize,
    /// Error-channel rates.
    pub sub_rate: f32,
    pub del_rate: f32,
    pub ins_rate: f32,
    /// Transcript file for the external source.
    pub hyp_file: Option<PathBuf>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            source: SourceKind::OnlineSelf,
            p_min: 0.5,
            n_st: 1,
            n_ed: 8,
            step_unit: StepUnit::Epoch,
            mix_level: MixLevel::Token,
            n_passes: 1,
            sub_rate: DEFAULT_CHANNEL_RATES.0,
            del_rate: DEFAULT_CHANNEL_RATES.1,
            ins_rate: DEFAULT_CHANNEL_RATES.2,
            hyp_file: None,
        }
    }
}

impl SamplingSpec {
    pub fn schedule(&self) -> Result<ScheduleConfig> {
        ScheduleConfig::new(self.p_min, self.n_st, self.n_ed, self.step_unit, self.mix_level)
    }

    /// Build the runtime source. Offline self-decoding cannot be built
    /// from a config alone (it needs a trained model); use a preset or
    /// pre-decode to a hypothesis file instead.
    pub fn build_source(&self) -> Result<HypothesisSource> {
        match self.source {
            SourceKind::ErrorChannel => {
                HypothesisSource::error_channel(self.sub_rate, self.del_rate, self.ins_rate)
            }
            SourceKind::OnlineSelf => Ok(HypothesisSource::OnlineSelf {
                n_passes: self.n_passes,
            }),
            SourceKind::ExternalFile => {
                let path = self.hyp_file.as_ref().ok_or_else(|| {
                    Error::config("sampling.source = external_file requires sampling.hyp_file")
                })?;
                HypothesisSource::external_file(path)
            }
            SourceKind::OfflineSelf => Err(Error::config(
                "offline_self is driven by presets (it first trains a teacher-forced model); \
                 decode to a hypothesis file and use external_file for standalone runs",
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub sampling: Option<SamplingSpec>,
}

impl FileConfig {
    /// Resolved master seed.
    pub fn master_seed(&self) -> u64 {
        self.seed
            .or_else(|| {
                std::env::var(SEED_ENV_VAR)
                    .ok()
                    .and_then(|s| s.parse().ok())
            })
            .unwrap_or(DEFAULT_SEED)
    }

    /// Task config with the master seed applied.
    pub fn task_config(&self) -> TaskConfig {
        let mut t = self.task.clone();
        t.seed = self.master_seed();
        t
    }

    /// Train config with the master seed and the `[sampling]` schedule
    /// applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.seed = self.master_seed();
        t.schedule = match &self.sampling {
            Some(s) => Some(s.schedule()?),
            None => None,
        };
        Ok(t)
    }
}

/// Parse a config file (or start from all defaults), apply `--key value`
/// overrides, and deserialize.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    apply_overrides(&mut value, overrides)?;
    value
        .try_into()
        .map_err(|e| Error::config(format!("bad config: {e}")))
}

/// Apply `--key value` pairs onto a TOML tree. Keys are dotted paths
/// (`train.lr`, `task.buckets` is not addressable — override whole scalar
/// or array leaves). Values parse as TOML fragments, falling back to
/// strings.
pub fn apply_overrides(root: &mut toml::Value, overrides: &[String]) -> Result<()> {
    if overrides.len() % 2 != 0 {
        return Err(Error::config(format!(
            "overrides must come in '--key value' pairs, got {:?}",
            overrides
        )));
    }
    for pair in overrides.chunks(2) {
        let key = pair[0]
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("override key '{}' must start with --", pair[0])))?;
        let parsed = parse_override_value(&pair[1]);
        set_path(root, key, parsed)?;
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key '{path}'")));
    }
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{path}': '{part}' is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override '{path}': parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
