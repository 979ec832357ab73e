//! Greedy and beam-search decoding.
//!
//! Decoding recomputes the full decoder prefix each step (no incremental
//! cache); correct-but-slow is fine at this scale. PAD and SOS are never
//! candidate emissions; EOS terminates a hypothesis and its log-probability
//! counts toward the score. Hypotheses that hit `max_len` without EOS are
//! flagged truncated and carry no EOS term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FwdCtx, TransformerModel};
use crate::tensor::{Graph, Tensor};
use crate::vocab;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank completed hypotheses by score / length instead of raw score.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len: 64,
            length_norm: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("beam width must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(())
    }
}

/// One decoded hypothesis: emitted tokens (no SOS/EOS), total log-prob,
/// and whether it was cut off at `max_len`.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub score: f32,
    pub truncated: bool,
}

/// Log-softmax of one logits row.
fn log_probs(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
    let lse = max + lse.ln() as f32;
    row.iter().map(|&x| x - lse).collect()
}

/// Last-position log-probs for each row of a batched decoder pass.
fn step_log_probs(
    model: &TransformerModel,
    enc_out: &Tensor,
    frame_len: usize,
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f32>>> {
    let b = prefixes.len();
    let enc = tile_rows(enc_out, b)?;
    let lens = vec![frame_len; b];
    let mut graph = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = FwdCtx::new(&mut graph, &mut rng, false);
    let logits = model.decode_step_parallel(&mut ctx, &enc, &lens, prefixes)?;
    let shape = logits.shape();
    let (u, v) = (shape[1], shape[2]);
    let data = logits.data();
    Ok((0..b)
        .map(|i| log_probs(&data[(i * u + u - 1) * v..(i * u + u) * v]))
        .collect())
}

/// Replicate a `[1, n, d]` tensor into `[times, n, d]`.
pub fn tile_rows(t: &Tensor, times: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "tile_rows expects [1, n, d], got {shape:?}"
        )));
    }
    let data = t.data();
    let mut out = Vec::with_capacity(data.len() * times);
    for _ in 0..times {
        out.extend_from_slice(&data);
    }
    Tensor::from_vec(&[times, shape[1], shape[2]], out)
}

/// Auto-regressive argmax from SOS until EOS or `max_len` emitted tokens.
pub fn greedy_decode(
    model: &TransformerModel,
    enc_out: &Tensor,
    frame_len: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let mut prefix = vec![vocab::SOS];
    let mut tokens = Vec::new();
    let mut score = 0.0f32;
    for _ in 0..max_len {
        let lp = step_log_probs(model, enc_out, frame_len, std::slice::from_ref(&prefix))?;
        let row = &lp[0];
        let mut best: Option<u32> = None;
        for (tok, &logp) in row.iter().enumerate() {
            let tok = tok as u32;
            if tok == vocab::PAD || tok == vocab::SOS {
                continue;
            }
            if best.is_none() || logp > row[best.unwrap() as usize] {
                best = Some(tok);
            }
        }
        let tok = best.expect("vocab has candidates beyond pad/sos");
        score += row[tok as usize];
        if tok == vocab::EOS {
            return Ok(DecodeResult {
                tokens,
                score,
                truncated: false,
            });
        }
        tokens.push(tok);
        prefix.push(tok);
    }
    Ok(DecodeResult {
        tokens,
        score,
        truncated: true,
    })
}

#[derive(Clone)]
struct Hyp {
    prefix: Vec<u32>, // includes SOS
    log_prob: f32,
}

/// Standard beam search over decoder log-probabilities.
///
/// Each step expands every live hypothesis with every candidate token and
/// keeps the `width` best candidates overall; those ending in EOS retire
/// into a completed pool. Live hypotheses remaining at `max_len` retire as
/// truncated. The pool is ranked by total log-prob (divided by emitted
/// length when `length_norm` is on) and the best `width` come back,
/// scores non-increasing.
pub fn beam_decode(
    model: &TransformerModel,
    enc_out: &Tensor,
    frame_len: usize,
    cfg: &BeamConfig,
) -> Result<Vec<DecodeResult>> {
    cfg.validate()?;
    let mut alive = vec![Hyp {
        prefix: vec![vocab::SOS],
        log_prob: 0.0,
    }];
    let mut completed: Vec<DecodeResult> = Vec::new();

    for _ in 0..cfg.max_len {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|h| h.prefix.clone()).collect();
        let lp = step_log_probs(model, enc_out, frame_len, &prefixes)?;

        // (score, parent, token), deterministically ordered.
        let mut candidates: Vec<(f32, usize, u32)> = Vec::new();
        for (i, row) in lp.iter().enumerate() {
            for (tok, &logp) in row.iter().enumerate() {
                let tok = tok as u32;
                if tok == vocab::PAD || tok == vocab::SOS {
                    continue;
                }
                candidates.push((alive[i].log_prob + logp, i, tok));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(cfg.width);

        let mut next = Vec::with_capacity(cfg.width);
        for (score, parent, tok) in candidates {
            if tok == vocab::EOS {
                completed.push(DecodeResult {
                    tokens: alive[parent].prefix[1..].to_vec(),
                    score,
                    truncated: false,
                });
            } else {
                let mut prefix = alive[parent].prefix.clone();
                prefix.push(tok);
                next.push(Hyp {
                    prefix,
                    log_prob: score,
                });
            }
        }
        alive = next;
    }
    for h in alive {
        completed.push(DecodeResult {
            tokens: h.prefix[1..].to_vec(),
            score: h.log_prob,
            truncated: true,
        });
    }

    let rank_score = |r: &DecodeResult| {
        if cfg.length_norm {
            r.score / r.tokens.len().max(1) as f32
        } else {
            r.score
        }
    };
    completed.sort_by(|a, b| {
        rank_score(b)
            .partial_cmp(&rank_score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.tokens.len().cmp(&b.tokens.len()))
            .then(a.tokens.cmp(&b.tokens))
    });
    completed.truncate(cfg.width);
    Ok(completed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_setup(seed: u64) -> (TransformerModel, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TransformerModel::new(ModelConfig::micro(6, 3), &mut rng).unwrap();
        let frames = Tensor::randn(&[1, 4, 3], 1.0, &mut rng);
        let mut g = Graph::inference();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = FwdCtx::new(&mut g, &mut rng2, false);
        let enc = model.encode(&mut ctx, &frames, &[4]).unwrap();
        (model, enc)
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in [1u64, 2, 3, 4] {
            let (model, enc) = tiny_setup(seed);
            let greedy = greedy_decode(&model, &enc, 4, 8).unwrap();
            let beam = beam_decode(
                &model,
                &enc,
                4,
                &BeamConfig {
                    width: 1,
                    max_len: 8,
                    length_norm: false,
                },
            )
            .unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].tokens, greedy.tokens, "seed {seed}");
            assert!((beam[0].score - greedy.score).abs() < 1e-5);
            assert_eq!(beam[0].truncated, greedy.truncated);
        }
    }

    #[test]
    fn beam_scores_non_increasing() {
        let (model, enc) = tiny_setup(9);
        let results = beam_decode(
            &model,
            &enc,
            4,
            &BeamConfig {
                width: 5,
                max_len: 6,
                length_norm: false,
            },
        )
        .unwrap();
        assert!(!results.is_empty());
        for pair in results.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn wider_beam_never_lowers_top_score() {
        for seed in [11u64, 12, 13] {
            let (model, enc) = tiny_setup(seed);
            let mut last = f32::NEG_INFINITY;
            for width in [1usize, 2, 3, 5, 8] {
                let results = beam_decode(
                    &model,
                    &enc,
                    4,
                    &BeamConfig {
                        width,
                        max_len: 5,
                        length_norm: false,
                    },
                )
                .unwrap();
                assert!(
                    results[0].score >= last - 1e-6,
                    "seed {seed} width {width}: {} < {last}",
                    results[0].score
                );
                last = results[0].score;
            }
        }
    }

    #[test]
    fn max_len_one_truncates() {
        let (model, enc) = tiny_setup(20);
        let r = greedy_decode(&model, &enc, 4, 1).unwrap();
        // Either a single emitted token with the truncation flag, or an
        // immediate EOS.
        if r.truncated {
            assert_eq!(r.tokens.len(), 1);
        } else {
            assert!(r.tokens.is_empty());
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (model, enc) = tiny_setup(21);
        let a = greedy_decode(&model, &enc, 4, 8).unwrap();
        let b = greedy_decode(&model, &enc, 4, 8).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn tile_rows_replicates() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tiled = tile_rows(&t, 3).unwrap();
        assert_eq!(tiled.shape(), vec![3, 2, 2]);
        assert_eq!(&tiled.to_vec()[4..8], &[1.0, 2.0, 3.0, 4.0]);
    }
}
