//! Built-in experiment presets: a comparison grid over positional schemes
//! (sinusoidal / learned / none / relative) and decoder-input sampling
//! regimes, with ids B1 and E1..E8+E3.
//!
//! Relative ranges follow the `enc-dec` convention with the encoder range
//! expressed in tokens and scaled by the task's frames-per-token emission
//! factor (a range of 2 tokens covers the same span the paper-scale setup
//! reaches with its frame-level clipping).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{beam_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{FwdCtx, ModelConfig, TransformerModel};
use crate::positional::PeMode;
use crate::sampling::{HypothesisSource, MixLevel, ScheduleConfig, StepUnit};
use crate::tensor::{Graph, Tensor};

use super::eval::{evaluate, EvalReport};
use super::task::{generate_task, TaskConfig};
use super::train::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PresetSource {
    /// Parameterized error channel standing in for an external recognizer.
    Channel,
    /// Decode the training set once with a teacher-forced model trained
    /// first, then train against those fixed transcripts.
    Offline,
    /// N-pass self-decoding with the model being trained.
    Online { n_passes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetSampling {
    pub p_min: f32,
    pub source: PresetSource,
}

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub id: &'static str,
    pub enc_pe: PeMode,
    pub dec_pe: PeMode,
    /// Encoder clipping range in tokens (scaled by frames_per_token).
    pub enc_rpe_tokens: Option<usize>,
    /// Decoder clipping range in tokens.
    pub dec_rpe_k: Option<usize>,
    pub sampling: Option<PresetSampling>,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        id: "B1",
        enc_pe: PeMode::Sinusoidal,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: None,
    },
    Preset {
        id: "E1",
        enc_pe: PeMode::Sinusoidal,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: Some(PresetSampling {
            p_min: 0.8,
            source: PresetSource::Channel,
        }),
    },
    Preset {
        id: "E2",
        enc_pe: PeMode::Sinusoidal,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: Some(PresetSampling {
            p_min: 0.8,
            source: PresetSource::Offline,
        }),
    },
    Preset {
        id: "E3",
        enc_pe: PeMode::Sinusoidal,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: Some(PresetSampling {
            p_min: 0.5,
            source: PresetSource::Online { n_passes: 1 },
        }),
    },
    Preset {
        id: "E5",
        enc_pe: PeMode::None,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: None,
    },
    Preset {
        id: "E6",
        enc_pe: PeMode::Learned,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: None,
        dec_rpe_k: None,
        sampling: None,
    },
    Preset {
        id: "E7",
        enc_pe: PeMode::None,
        dec_pe: PeMode::Sinusoidal,
        enc_rpe_tokens: Some(2),
        dec_rpe_k: None,
        sampling: None,
    },
    Preset {
        id: "E8",
        enc_pe: PeMode::None,
        dec_pe: PeMode::None,
        enc_rpe_tokens: Some(2),
        dec_rpe_k: Some(2),
        sampling: None,
    },
    Preset {
        id: "E8+E3",
        enc_pe: PeMode::None,
        dec_pe: PeMode::None,
        enc_rpe_tokens: Some(2),
        dec_rpe_k: Some(4),
        sampling: Some(PresetSampling {
            p_min: 0.5,
            source: PresetSource::Online { n_passes: 1 },
        }),
    },
];

pub fn preset_ids() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.id).collect()
}

pub fn lookup(id: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.id == id).ok_or_else(|| {
        Error::config(format!(
            "unknown preset '{id}'; valid ids: {}",
            preset_ids().join(", ")
        ))
    })
}

impl Preset {
    /// Model config for this preset on a concrete task: vocabulary and
    /// feature dims come from the task, relative ranges scale by the
    /// emission factor, learned tables size to the longest training
    /// sequence.
    pub fn model_config(&self, task: &TaskConfig, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.vocab_size = task.vocab_size;
        m.input_feature_dim = task.frame_dim;
        m.enc_pe_mode = self.enc_pe;
        m.dec_pe_mode = self.dec_pe;
        m.enc_rpe_k = self.enc_rpe_tokens.map(|t| t * task.frames_per_token);
        m.dec_rpe_k = self.dec_rpe_k;
        m.enc_learned_max_len = (self.enc_pe == PeMode::Learned)
            .then_some(task.train_len[1] * task.frames_per_token);
        m.dec_learned_max_len = (self.dec_pe == PeMode::Learned).then_some(task.train_len[1] + 1);
        m
    }

    /// Epoch-unit token-level schedule: full teacher forcing through the
    /// first epoch, linear down to p_min at 70% of training.
    pub fn schedule(&self, epochs: usize) -> Result<Option<ScheduleConfig>> {
        match &self.sampling {
            None => Ok(None),
            Some(s) => {
                let n_ed = ((epochs as f32 * 0.7).ceil() as u32).max(2);
                Ok(Some(ScheduleConfig::new(
                    s.p_min,
                    1,
                    n_ed,
                    StepUnit::Epoch,
                    MixLevel::Token,
                )?))
            }
        }
    }
}

/// Error-channel rates standing in for an external recognizer with a CER
/// around ten percent.
pub const DEFAULT_CHANNEL_RATES: (f32, f32, f32) = (0.06, 0.03, 0.02);

pub struct PresetOutcome {
    pub preset_id: String,
    pub model_cfg: ModelConfig,
    pub log: TrainLog,
    pub report: EvalReport,
    /// Buckets skipped because a learned position table cannot cover them.
    pub skipped_buckets: Vec<String>,
}

/// Build, train and evaluate one preset row.
///
/// Writes `checkpoint/`, `train_log.tsv`, `report.txt` and `report.json`
/// under `out_dir` when given.
pub fn run_preset(
    id: &str,
    task: &TaskConfig,
    train_cfg: &TrainConfig,
    base_model: &ModelConfig,
    beam: &BeamConfig,
    out_dir: Option<&Path>,
) -> Result<PresetOutcome> {
    let preset = lookup(id)?;
    let data = generate_task(task)?;
    let model_cfg = preset.model_config(task, base_model);

    let mut cfg = train_cfg.clone();
    cfg.schedule = preset.schedule(cfg.epochs)?;

    let source: Option<HypothesisSource> = match &preset.sampling {
        None => None,
        Some(s) => Some(match s.source {
            PresetSource::Channel => {
                let (sub, del, ins) = DEFAULT_CHANNEL_RATES;
                HypothesisSource::error_channel(sub, del, ins)?
            }
            PresetSource::Online { n_passes } => HypothesisSource::OnlineSelf { n_passes },
            PresetSource::Offline => {
                // Phase 1: teacher-forced model of the same architecture,
                // then decode the training set once.
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(0x0F);
                let phase1 = TransformerModel::new(model_cfg.clone(), &mut rng)?;
                let mut phase1_cfg = cfg.clone();
                phase1_cfg.schedule = None;
                train(&phase1, &data.train, &phase1_cfg, None, None)?;
                let hyps = decode_train_set(&phase1, &data.train, beam)?;
                HypothesisSource::OfflineSelf { hyps }
            }
        }),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let model = TransformerModel::new(model_cfg.clone(), &mut rng)?;
    let log = train(&model, &data.train, &cfg, source.as_ref(), out_dir)?;

    // A learned position table cannot score sequences beyond its length;
    // those buckets are skipped and named in the report.
    let enc_limit = model_cfg
        .enc_learned_max_len
        .filter(|_| model_cfg.enc_pe_mode == PeMode::Learned);
    let mut evaluable = Vec::new();
    let mut skipped_buckets = Vec::new();
    for (name, ds) in data.buckets {
        let too_long = enc_limit.map_or(false, |limit| ds.max_frame_len() > limit);
        if too_long {
            skipped_buckets.push(name);
        } else {
            evaluable.push((name, ds));
        }
    }

    let eval_beam = beam_for_buckets(beam, &evaluable);
    let report = evaluate(&model, &evaluable, &eval_beam)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut text = format!("preset {id}\n");
        text.push_str(&report.to_text());
        for name in &skipped_buckets {
            text.push_str(&format!(
                "{name}: skipped (exceeds learned position table)\n"
            ));
        }
        std::fs::write(dir.join("report.txt"), text)?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
    }

    Ok(PresetOutcome {
        preset_id: id.to_string(),
        model_cfg,
        log,
        report,
        skipped_buckets,
    })
}

/// Beam config sized for the buckets under evaluation: generous max_len so
/// truncation never hides tail behavior.
pub fn beam_for_buckets(base: &BeamConfig, buckets: &[(String, super::task::Dataset)]) -> BeamConfig {
    let longest = buckets
        .iter()
        .map(|(_, ds)| ds.max_token_len())
        .max()
        .unwrap_or(0);
    BeamConfig {
        width: base.width,
        max_len: (2 * longest + 4).max(base.max_len),
        length_norm: base.length_norm,
    }
}

/// Greedy-quality transcripts for every training utterance (used by the
/// offline source).
pub fn decode_train_set(
    model: &TransformerModel,
    ds: &super::task::Dataset,
    beam: &BeamConfig,
) -> Result<std::collections::HashMap<String, Vec<u32>>> {
    let cfg = BeamConfig {
        width: beam.width,
        max_len: 2 * ds.max_token_len() + 4,
        length_norm: beam.length_norm,
    };
    let mut out = std::collections::HashMap::new();
    for u in &ds.utts {
        let frames = Tensor::from_vec(&[1, u.n_frames, ds.meta.frame_dim], u.frames.clone())?;
        let mut graph = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = FwdCtx::new(&mut graph, &mut rng, false);
        let enc = model.encode(&mut ctx, &frames, &[u.n_frames])?;
        let results = beam_decode(model, &enc, u.n_frames, &cfg)?;
        out.insert(u.id.clone(), results[0].tokens.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_preset_lists_valid_ids() {
        let err = lookup("E4").unwrap_err().to_string();
        assert!(err.contains("E4"));
        for id in preset_ids() {
            assert!(err.contains(id), "error should list {id}");
        }
    }

    #[test]
    fn preset_table_matches_grid() {
        let b1 = lookup("B1").unwrap();
        assert_eq!(b1.enc_pe, PeMode::Sinusoidal);
        assert_eq!(b1.dec_pe, PeMode::Sinusoidal);
        assert!(b1.sampling.is_none());

        let e3 = lookup("E3").unwrap();
        match e3.sampling {
            Some(PresetSampling {
                p_min,
                source: PresetSource::Online { n_passes },
            }) => {
                assert_eq!(p_min, 0.5);
                assert_eq!(n_passes, 1);
            }
            _ => panic!("E3 must be online sampling"),
        }

        let e8 = lookup("E8").unwrap();
        assert_eq!(e8.enc_rpe_tokens, Some(2));
        assert_eq!(e8.dec_rpe_k, Some(2));
        assert_eq!(e8.enc_pe, PeMode::None);
    }

    #[test]
    fn rpe_range_scales_with_emission_factor() {
        let task = TaskConfig {
            frames_per_token: 3,
            ..TaskConfig::default()
        };
        let cfg = lookup("E8")
            .unwrap()
            .model_config(&task, &ModelConfig::desk());
        assert_eq!(cfg.enc_rpe_k, Some(6));
        assert_eq!(cfg.dec_rpe_k, Some(2));
        assert_eq!(cfg.vocab_size, task.vocab_size);
    }

    #[test]
    fn learned_table_sized_from_training_lengths() {
        let task = TaskConfig {
            frames_per_token: 3,
            train_len: [3, 10],
            ..TaskConfig::default()
        };
        let cfg = lookup("E6")
            .unwrap()
            .model_config(&task, &ModelConfig::desk());
        assert_eq!(cfg.enc_learned_max_len, Some(30));
        assert_eq!(cfg.enc_pe_mode, PeMode::Learned);
    }
}
