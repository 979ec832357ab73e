//! Parallel scheduled sampling: the piecewise-linear teacher-force
//! schedule, token- and sentence-level mixing of ground truth with
//! hypothesis tokens, and the hypothesis sources that simulate the error
//! distribution of inference (external transcripts, a parameterized error
//! channel, offline self-decoding, online N-pass self-decoding).
//!
//! Mixing happens up front for the whole label sequence, so the decoder
//! still runs one parallel forward pass per training step instead of one
//! pass per output position.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FwdCtx, TransformerModel};
use crate::tensor::{Graph, Tensor};
use crate::vocab;

/// What a schedule step index counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    /// Fractional epochs: `epoch + batch/batches_per_epoch`.
    Epoch,
    /// Global batch counter.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixLevel {
    Token,
    Sentence,
}

/// Teacher-force schedule: rate 1 until `n_st`, then linear down to
/// `p_min` at `n_ed`, clamped to `[p_min, 1]` everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub p_min: f32,
    pub n_st: u32,
    pub n_ed: u32,
    pub step_unit: StepUnit,
    pub mix_level: MixLevel,
}

impl ScheduleConfig {
    pub fn new(
        p_min: f32,
        n_st: u32,
        n_ed: u32,
        step_unit: StepUnit,
        mix_level: MixLevel,
    ) -> Result<ScheduleConfig> {
        let cfg = ScheduleConfig {
            p_min,
            n_st,
            n_ed,
            step_unit,
            mix_level,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(Error::config(format!(
                "p_min must be in (0, 1], got {}",
                self.p_min
            )));
        }
        if self.n_st >= self.n_ed {
            return Err(Error::config(format!(
                "schedule needs n_st < n_ed, got {} >= {}",
                self.n_st, self.n_ed
            )));
        }
        Ok(())
    }
}

/// The scheduled teacher-force rate at (possibly fractional) step `i`:
/// `max(min(1, 1 - (1 - p_min) * (i - n_st) / (n_ed - n_st)), p_min)`.
pub fn teacher_force_rate(i: f32, cfg: &ScheduleConfig) -> f32 {
    let span = (cfg.n_ed - cfg.n_st) as f32;
    let linear = 1.0 - (1.0 - cfg.p_min) * (i - cfg.n_st as f32) / span;
    linear.min(1.0).max(cfg.p_min)
}

/// The per-utterance decoder input produced by mixing, plus the record of
/// which positions kept ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixPlan {
    /// Same length as the ground-truth label sequence.
    pub mixed: Vec<u32>,
    pub teacher_mask: Vec<bool>,
}

/// Mix ground truth `y` (length u) with hypothesis `y_hat` (length q) at
/// teacher-force rate `p`.
///
/// Token level draws one Bernoulli(p) per position: keep `y[j]`, else take
/// `y_hat[j]` when `j < q` and the pad token when `j >= q`. Sentence level
/// draws once and keeps `y` wholesale or takes `y_hat`
/// padded/truncated to u.
pub fn mix_tokens(
    y: &[u32],
    y_hat: &[u32],
    p: f32,
    level: MixLevel,
    rng: &mut ChaCha8Rng,
) -> MixPlan {
    let u = y.len();
    let q = y_hat.len();
    let mut mixed = Vec::with_capacity(u);
    let mut teacher_mask = Vec::with_capacity(u);
    match level {
        MixLevel::Token => {
            for j in 0..u {
                if rng.gen::<f32>() < p {
                    mixed.push(y[j]);
                    teacher_mask.push(true);
                } else {
                    mixed.push(if j < q { y_hat[j] } else { vocab::PAD });
                    teacher_mask.push(false);
                }
            }
        }
        MixLevel::Sentence => {
            let keep_truth = rng.gen::<f32>() < p;
            for j in 0..u {
                if keep_truth {
                    mixed.push(y[j]);
                    teacher_mask.push(true);
                } else {
                    mixed.push(if j < q { y_hat[j] } else { vocab::PAD });
                    teacher_mask.push(false);
                }
            }
        }
    }
    MixPlan {
        mixed,
        teacher_mask,
    }
}

/// Where hypothesis token sequences come from.
pub enum HypothesisSource {
    /// Transcripts loaded from a hypothesis file keyed by utterance id.
    ExternalFile { hyps: HashMap<String, Vec<u32>> },
    /// Seeded random corruption of the reference: per-token substitution /
    /// deletion, plus insertions.
    ErrorChannel {
        sub_rate: f32,
        del_rate: f32,
        ins_rate: f32,
    },
    /// Transcripts produced in advance by decoding the training set with a
    /// previously trained model.
    OfflineSelf { hyps: HashMap<String, Vec<u32>> },
    /// N-pass self-decoding with the model being trained: pass 1 feeds
    /// ground truth, later passes feed the previous mixture. Zero passes
    /// degenerates to teacher forcing.
    OnlineSelf { n_passes: usize },
}

impl HypothesisSource {
    pub fn error_channel(sub_rate: f32, del_rate: f32, ins_rate: f32) -> Result<HypothesisSource> {
        for (name, r) in [("sub", sub_rate), ("del", del_rate), ("ins", ins_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!(
                    "{name}_rate must be in [0, 1), got {r}"
                )));
            }
        }
        if sub_rate + del_rate + ins_rate >= 1.0 {
            return Err(Error::config(format!(
                "error channel rates must sum below 1, got {}",
                sub_rate + del_rate + ins_rate
            )));
        }
        Ok(HypothesisSource::ErrorChannel {
            sub_rate,
            del_rate,
            ins_rate,
        })
    }

    pub fn external_file(path: &Path) -> Result<HypothesisSource> {
        Ok(HypothesisSource::ExternalFile {
            hyps: read_hypothesis_file(path)?,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HypothesisSource::ExternalFile { .. } => "external_file",
            HypothesisSource::ErrorChannel { .. } => "error_channel",
            HypothesisSource::OfflineSelf { .. } => "offline_self",
            HypothesisSource::OnlineSelf { .. } => "online_self",
        }
    }
}

/// One training batch as the sampler sees it: ids, encoder inputs and the
/// per-utterance label sequences (reference + EOS, unpadded).
pub struct SampleBatch<'a> {
    pub ids: &'a [String],
    pub frames: &'a Tensor,
    pub frame_lens: &'a [usize],
    pub targets: &'a [Vec<u32>],
    pub vocab_size: usize,
}

/// Decoder input rows for a batch: SOS followed by the labels shifted
/// right, padded to the longest row.
pub fn shift_into_decoder_input(targets: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let u_max = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    targets
        .iter()
        .map(|t| {
            let mut row = Vec::with_capacity(u_max);
            row.push(vocab::SOS);
            row.extend(t.iter().take(t.len().saturating_sub(1)));
            while row.len() < u_max {
                row.push(vocab::PAD);
            }
            row
        })
        .collect()
}

/// Apply the error channel to one reference sequence.
pub fn corrupt(
    y: &[u32],
    sub_rate: f32,
    del_rate: f32,
    ins_rate: f32,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let n_real = vocab_size as u32 - vocab::FIRST_REAL;
    let random_real = |rng: &mut ChaCha8Rng| vocab::FIRST_REAL + rng.gen_range(0..n_real);
    let mut out = Vec::with_capacity(y.len() + 2);
    for &tok in y {
        if rng.gen::<f32>() < ins_rate {
            out.push(random_real(rng));
        }
        let draw: f32 = rng.gen();
        if draw < sub_rate {
            // Substitute with a different real token.
            let mut repl = random_real(rng);
            while repl == tok && n_real > 1 {
                repl = random_real(rng);
            }
            out.push(repl);
        } else if draw < sub_rate + del_rate {
            // Deleted.
        } else {
            out.push(tok);
        }
    }
    out
}

/// Per-position argmax of the decoder logits, one row per utterance,
/// truncated to each utterance's own label length.
fn argmax_rows(logits: &Tensor, target_lens: &[usize]) -> Vec<Vec<u32>> {
    let shape = logits.shape();
    let (u, v) = (shape[1], shape[2]);
    let data = logits.data();
    target_lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            (0..len.min(u))
                .map(|t| {
                    let row = &data[(b * u + t) * v..(b * u + t + 1) * v];
                    let mut best = 0usize;
                    for (c, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = c;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect()
}

/// Produce one hypothesis sequence per utterance in the batch.
///
/// `model` is only consulted for self-decoding sources; those run
/// non-differentiable forward passes (inference graph, no dropout), so no
/// gradient flows through hypothesis generation. For the online source,
/// pass 1 feeds ground truth and pass `m` feeds the pass `m-1` mixture
/// built at rate `p`; with zero passes the caller's final mix degenerates
/// to pure teacher forcing.
pub fn hypothesize(
    source: &HypothesisSource,
    model: Option<&TransformerModel>,
    batch: &SampleBatch,
    p: f32,
    level: MixLevel,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u32>>> {
    match source {
        HypothesisSource::ExternalFile { hyps } | HypothesisSource::OfflineSelf { hyps } => batch
            .ids
            .iter()
            .map(|id| {
                hyps.get(id).cloned().ok_or_else(|| {
                    Error::data(format!("no hypothesis for utterance id '{id}'"))
                })
            })
            .collect(),
        HypothesisSource::ErrorChannel {
            sub_rate,
            del_rate,
            ins_rate,
        } => {
            let vocab_size = batch.vocab_size;
            Ok(batch
                .targets
                .iter()
                .map(|y| {
                    // Corrupt the real-token prefix; the trailing EOS label
                    // is not part of a transcript.
                    let body = if y.last() == Some(&vocab::EOS) {
                        &y[..y.len() - 1]
                    } else {
                        &y[..]
                    };
                    corrupt(body, *sub_rate, *del_rate, *ins_rate, vocab_size, rng)
                })
                .collect())
        }
        HypothesisSource::OnlineSelf { n_passes } => {
            let model =
                model.ok_or_else(|| Error::config("online self-decoding requires a model"))?;
            let target_lens: Vec<usize> = batch.targets.iter().map(|t| t.len()).collect();
            let mut current: Vec<Vec<u32>> = batch.targets.to_vec();
            let mut hyps: Vec<Vec<u32>> = batch.targets.to_vec();
            for pass in 0..*n_passes {
                let dec_input = shift_into_decoder_input(&current);
                let mut graph = Graph::inference();
                let mut pass_rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = FwdCtx::new(&mut graph, &mut pass_rng, false);
                let enc = model.encode(&mut ctx, batch.frames, batch.frame_lens)?;
                let logits =
                    model.decode_step_parallel(&mut ctx, &enc, batch.frame_lens, &dec_input)?;
                hyps = argmax_rows(&logits, &target_lens);
                if pass + 1 < *n_passes {
                    current = batch
                        .targets
                        .iter()
                        .zip(&hyps)
                        .map(|(y, y_hat)| mix_tokens(y, y_hat, p, level, rng).mixed)
                        .collect();
                }
            }
            Ok(hyps)
        }
    }
}

/// Hypothesis file format: UTF-8 text, one utterance per line,
/// `<utt_id>\t<space-separated token ids>`.
pub fn read_hypothesis_file(path: &Path) -> Result<HashMap<String, Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!(
                "{}:{}: expected '<utt_id>\\t<token ids>'",
                path.display(),
                lineno + 1
            ))
        })?;
        let mut toks = Vec::new();
        for part in rest.split_whitespace() {
            let tok: u32 = part.parse().map_err(|_| {
                Error::data(format!(
                    "{}:{}: bad token id '{part}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            toks.push(tok);
        }
        map.insert(id.to_string(), toks);
    }
    Ok(map)
}

pub fn write_hypothesis_file(path: &Path, hyps: &[(String, Vec<u32>)]) -> Result<()> {
    let mut out = String::new();
    for (id, toks) in hyps {
        let ids: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{id}\t{}", ids.join(" ")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sched(p_min: f32, n_st: u32, n_ed: u32) -> ScheduleConfig {
        ScheduleConfig::new(p_min, n_st, n_ed, StepUnit::Batch, MixLevel::Token).unwrap()
    }

    #[test]
    fn schedule_anchor_points() {
        let cfg = sched(0.8, 2, 12);
        assert_eq!(teacher_force_rate(0.0, &cfg), 1.0);
        assert_eq!(teacher_force_rate(2.0, &cfg), 1.0);
        assert!((teacher_force_rate(7.0, &cfg) - 0.9).abs() < 1e-6);
        assert_eq!(teacher_force_rate(12.0, &cfg), 0.8);
        assert_eq!(teacher_force_rate(500.0, &cfg), 0.8);
    }

    #[test]
    fn schedule_rejects_degenerate_range() {
        assert!(ScheduleConfig::new(0.5, 3, 3, StepUnit::Epoch, MixLevel::Token).is_err());
        assert!(ScheduleConfig::new(0.0, 0, 3, StepUnit::Epoch, MixLevel::Token).is_err());
        assert!(ScheduleConfig::new(1.1, 0, 3, StepUnit::Epoch, MixLevel::Token).is_err());
    }

    #[test]
    fn mix_full_teacher_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = vec![5, 6, 7, 2];
        let y_hat = vec![9, 9];
        for level in [MixLevel::Token, MixLevel::Sentence] {
            let plan = mix_tokens(&y, &y_hat, 1.0, level, &mut rng);
            assert_eq!(plan.mixed, y);
            assert!(plan.teacher_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn mix_pure_hypothesis_pads_past_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = vec![5, 6, 7, 8, 9];
        let y_hat = vec![10, 11, 12];
        let plan = mix_tokens(&y, &y_hat, 0.0, MixLevel::Token, &mut rng);
        assert_eq!(plan.mixed, vec![10, 11, 12, vocab::PAD, vocab::PAD]);
        assert!(plan.teacher_mask.iter().all(|&m| !m));
    }

    #[test]
    fn sentence_mix_truncates_long_hypothesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = vec![5, 6, 7];
        let y_hat = vec![8, 9, 10, 11, 12];
        let plan = mix_tokens(&y, &y_hat, 0.0, MixLevel::Sentence, &mut rng);
        assert_eq!(plan.mixed, vec![8, 9, 10]);
    }

    #[test]
    fn mix_statistics_token_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000usize;
        let y = vec![5u32; n];
        let y_hat = vec![6u32; n];
        let plan = mix_tokens(&y, &y_hat, 0.5, MixLevel::Token, &mut rng);
        let teacher = plan.teacher_mask.iter().filter(|&&m| m).count();
        let frac = teacher as f32 / n as f32;
        assert!((frac - 0.5).abs() < 0.01, "teacher fraction {frac}");
        // Emitted tokens only ever come from {y_j, y_hat_j, PAD}.
        for (j, &tok) in plan.mixed.iter().enumerate() {
            assert!(tok == y[j] || tok == y_hat[j] || tok == vocab::PAD);
            if plan.teacher_mask[j] {
                assert_eq!(tok, y[j]);
            }
        }
    }

    #[test]
    fn mix_deterministic_per_seed() {
        let y: Vec<u32> = (3..40).collect();
        let y_hat: Vec<u32> = (4..30).collect();
        let a = mix_tokens(&y, &y_hat, 0.4, MixLevel::Token, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mix_tokens(&y, &y_hat, 0.4, MixLevel::Token, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn error_channel_identity_and_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<u32> = (0..100_000).map(|i| 3 + (i % 10)).collect();
        let same = corrupt(&y, 0.0, 0.0, 0.0, 16, &mut rng);
        assert_eq!(same, y);

        let corrupted = corrupt(&y, 0.1, 0.0, 0.0, 16, &mut rng);
        assert_eq!(corrupted.len(), y.len());
        let subs = corrupted.iter().zip(&y).filter(|(a, b)| a != b).count();
        let frac = subs as f32 / y.len() as f32;
        assert!((frac - 0.1).abs() < 0.01, "substituted fraction {frac}");
    }

    #[test]
    fn error_channel_rate_validation() {
        assert!(HypothesisSource::error_channel(0.5, 0.4, 0.2).is_err());
        assert!(HypothesisSource::error_channel(-0.1, 0.0, 0.0).is_err());
        assert!(HypothesisSource::error_channel(0.05, 0.02, 0.01).is_ok());
    }

    #[test]
    fn shift_prepends_sos_and_pads() {
        let targets = vec![vec![5, 6, 2], vec![7, 2]];
        let rows = shift_into_decoder_input(&targets);
        assert_eq!(rows[0], vec![vocab::SOS, 5, 6]);
        assert_eq!(rows[1], vec![vocab::SOS, 7, vocab::PAD]);
    }

    #[test]
    fn hypothesis_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyps.tsv");
        let hyps = vec![
            ("utt0".to_string(), vec![3u32, 4, 5]),
            ("utt1".to_string(), vec![]),
        ];
        write_hypothesis_file(&path, &hyps).unwrap();
        let map = read_hypothesis_file(&path).unwrap();
        assert_eq!(map["utt0"], vec![3, 4, 5]);
        assert_eq!(map["utt1"], Vec::<u32>::new());
    }

    #[test]
    fn missing_utterance_id_is_error() {
        let mut hyps = HashMap::new();
        hyps.insert("utt0".to_string(), vec![3u32]);
        let source = HypothesisSource::ExternalFile { hyps };
        let ids = vec!["utt0".to_string(), "utt-missing".to_string()];
        let frames = Tensor::zeros(&[2, 3, 2]);
        let targets = vec![vec![3u32, 2], vec![4, 2]];
        let batch = SampleBatch {
            ids: &ids,
            frames: &frames,
            frame_lens: &[3, 3],
            targets: &targets,
            vocab_size: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            hypothesize(&source, None, &batch, 0.5, MixLevel::Token, &mut rng).unwrap_err();
        assert!(err.to_string().contains("utt-missing"));
    }
}
