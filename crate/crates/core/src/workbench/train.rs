//! The training loop: length-bucketed batching, the teacher-force
//! schedule with hypothesis mixing, adam with epoch-halved learning rate,
//! label-smoothed loss, deterministic logging and checkpointing.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FwdCtx, TransformerModel};
use crate::sampling::{
    hypothesize, mix_tokens, shift_into_decoder_input, teacher_force_rate, HypothesisSource,
    SampleBatch, ScheduleConfig, StepUnit,
};
use crate::tensor::{Adam, Graph, Tensor};
use crate::vocab;

use super::checkpoint::save_checkpoint;
use super::task::{Dataset, Utterance};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    /// 1-indexed epoch from which the learning rate halves every epoch.
    pub lr_halve_from_epoch: usize,
    pub batch_size: usize,
    pub label_smoothing: f32,
    pub seed: u64,
    /// Teacher-force schedule; absent means pure teacher forcing.
    pub schedule: Option<ScheduleConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            lr: 1e-3,
            lr_halve_from_epoch: 7,
            batch_size: 16,
            label_smoothing: 0.1,
            seed: 17,
            schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.lr_halve_from_epoch == 0 || self.lr_halve_from_epoch > self.epochs {
            return Err(Error::config(format!(
                "lr_halve_from_epoch must be in 1..={}, got {}",
                self.epochs, self.lr_halve_from_epoch
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }

    /// Learning rate for a 1-indexed epoch: halves every epoch starting at
    /// `lr_halve_from_epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        if epoch >= self.lr_halve_from_epoch {
            self.lr * 0.5f32.powi((epoch - self.lr_halve_from_epoch + 1) as i32)
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub teacher_rate: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tepoch\tloss\tteacher_rate\tlr\n");
        for s in &self.steps {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.4}\t{:.6e}",
                s.step, s.epoch, s.loss, s.teacher_rate, s.lr
            )
            .expect("string write");
        }
        out
    }

    pub fn first_loss(&self) -> Option<f32> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.steps.last().map(|s| s.loss)
    }
}

/// One rectangular batch: zero-padded frames plus unpadded per-utterance
/// label sequences (reference + EOS).
pub struct Batch {
    pub ids: Vec<String>,
    pub frames: Tensor,
    pub frame_lens: Vec<usize>,
    pub targets: Vec<Vec<u32>>,
}

pub fn make_batch(frame_dim: usize, utts: &[&Utterance]) -> Result<Batch> {
    if utts.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let n_max = utts.iter().map(|u| u.n_frames).max().unwrap();
    let b = utts.len();
    let mut frames = vec![0.0f32; b * n_max * frame_dim];
    for (i, u) in utts.iter().enumerate() {
        frames[i * n_max * frame_dim..i * n_max * frame_dim + u.frames.len()]
            .copy_from_slice(&u.frames);
    }
    Ok(Batch {
        ids: utts.iter().map(|u| u.id.clone()).collect(),
        frames: Tensor::from_vec(&[b, n_max, frame_dim], frames)?,
        frame_lens: utts.iter().map(|u| u.n_frames).collect(),
        targets: utts
            .iter()
            .map(|u| {
                let mut t = u.tokens.clone();
                t.push(vocab::EOS);
                t
            })
            .collect(),
    })
}

/// Flattened targets padded to the batch's longest row.
fn padded_targets(targets: &[Vec<u32>]) -> Vec<u32> {
    let u_max = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(targets.len() * u_max);
    for t in targets {
        flat.extend_from_slice(t);
        flat.extend(std::iter::repeat(vocab::PAD).take(u_max - t.len()));
    }
    flat
}

/// Batches bucketed by similar length (sorted by token count, then
/// chunked). The chunk order is shuffled per epoch; chunk contents are
/// fixed.
fn length_bucketed_batches(ds: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ds.utts.len()).collect();
    order.sort_by_key(|&i| (ds.utts[i].tokens.len(), i));
    order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// Train `model` on `dataset`. Writes `checkpoint/` and `train_log.tsv`
/// under `out_dir` when given. Identical (config, seed, data) runs produce
/// byte-identical logs and checkpoints.
///
/// A schedule requires a hypothesis source and vice versa; with neither,
/// every step is pure teacher forcing. NaN loss aborts with a diagnostic
/// dump.
pub fn train(
    model: &TransformerModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    hyp_source: Option<&HypothesisSource>,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.schedule.is_some() != hyp_source.is_some() {
        return Err(Error::config(
            "schedule and hypothesis source must be given together",
        ));
    }
    if dataset.utts.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    if dataset.meta.vocab_size != model.config().vocab_size {
        return Err(Error::config(format!(
            "dataset vocab {} != model vocab {}",
            dataset.meta.vocab_size,
            model.config().vocab_size
        )));
    }

    // Independent RNG streams per concern: batch-order shuffling, dropout,
    // and mixing draws. Keeping them separate means a degenerate schedule
    // (or a pass-through source) cannot shift model-side randomness.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model_rng.set_stream(2);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mix_rng.set_stream(3);

    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut log = TrainLog::default();
    let mut batches = length_bucketed_batches(dataset, cfg.batch_size);
    let batches_per_epoch = batches.len();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        opt.set_lr(cfg.lr_at_epoch(epoch));
        batches.shuffle(&mut shuffle_rng);
        for (batch_idx, batch_indices) in batches.iter().enumerate() {
            let utts: Vec<&Utterance> = batch_indices.iter().map(|&i| &dataset.utts[i]).collect();
            let batch = make_batch(dataset.meta.frame_dim, &utts)?;

            let teacher_rate = match &cfg.schedule {
                Some(s) => {
                    let i = match s.step_unit {
                        StepUnit::Batch => global_step as f32,
                        StepUnit::Epoch => {
                            (epoch - 1) as f32 + batch_idx as f32 / batches_per_epoch as f32
                        }
                    };
                    teacher_force_rate(i, s)
                }
                None => 1.0,
            };

            let mixed_rows: Vec<Vec<u32>> = match (&cfg.schedule, hyp_source) {
                (Some(s), Some(source)) => {
                    let sample_batch = SampleBatch {
                        ids: &batch.ids,
                        frames: &batch.frames,
                        frame_lens: &batch.frame_lens,
                        targets: &batch.targets,
                        vocab_size: dataset.meta.vocab_size,
                    };
                    let hyps = hypothesize(
                        source,
                        Some(model),
                        &sample_batch,
                        teacher_rate,
                        s.mix_level,
                        &mut mix_rng,
                    )?;
                    batch
                        .targets
                        .iter()
                        .zip(&hyps)
                        .map(|(y, y_hat)| {
                            mix_tokens(y, y_hat, teacher_rate, s.mix_level, &mut mix_rng).mixed
                        })
                        .collect()
                }
                _ => batch.targets.clone(),
            };

            let dec_input = shift_into_decoder_input(&mixed_rows);
            let flat_targets = padded_targets(&batch.targets);

            let mut graph = Graph::recording();
            let mut ctx = FwdCtx::new(&mut graph, &mut model_rng, true);
            let enc = model.encode(&mut ctx, &batch.frames, &batch.frame_lens)?;
            let logits =
                model.decode_step_parallel(&mut ctx, &enc, &batch.frame_lens, &dec_input)?;
            let loss = graph.cross_entropy_ls(
                &logits,
                &flat_targets,
                cfg.label_smoothing,
                vocab::PAD,
            )?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                let diag = diagnostic_dump(&log, epoch, global_step, loss_val, opt.lr());
                if let Some(dir) = out_dir {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("nan_abort.txt"), &diag)?;
                }
                return Err(Error::train(format!(
                    "non-finite loss {loss_val} at step {global_step} (epoch {epoch}); state dumped"
                )));
            }
            graph.backward(&loss)?;
            opt.step();

            log.steps.push(StepLog {
                step: global_step,
                epoch,
                loss: loss_val,
                teacher_rate,
                lr: opt.lr(),
            });
            global_step += 1;
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(model, &dir.join("checkpoint"))?;
        std::fs::write(dir.join("train_log.tsv"), log.to_tsv())?;
    }
    Ok(log)
}

fn diagnostic_dump(
    log: &TrainLog,
    epoch: usize,
    step: usize,
    loss: f32,
    lr: f32,
) -> String {
    let mut out = String::new();
    writeln!(out, "training aborted: non-finite loss").expect("string write");
    writeln!(out, "step={step} epoch={epoch} loss={loss} lr={lr:.6e}").expect("string write");
    writeln!(out, "last steps:").expect("string write");
    for s in log.steps.iter().rev().take(10) {
        writeln!(
            out,
            "  step={} epoch={} loss={:.6} rate={:.4} lr={:.6e}",
            s.step, s.epoch, s.loss, s.teacher_rate, s.lr
        )
        .expect("string write");
    }
    out
}
