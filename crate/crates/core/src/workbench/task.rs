//! Synthetic frame-emission tasks: each reference token emits a fixed
//! per-token prototype vector for `frames_per_token` frames plus Gaussian
//! noise. A pseudo-acoustic stand-in that trains in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// References are uniform random token strings.
    Copy,
    /// Like `Copy`, but every utterance carries one sub-span planted at
    /// two or more distinct positions (the internal-deletion trigger).
    RepeatedSegment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketSpec {
    pub name: String,
    /// Inclusive token-length range `[min, max]`.
    pub len: [usize; 2],
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Total vocabulary including the reserved ids.
    pub vocab_size: usize,
    /// Frames emitted per reference token (stand-in for acoustic duration).
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub frame_noise_std: f32,
    /// Inclusive token-length range for training utterances.
    pub train_len: [usize; 2],
    pub n_train: usize,
    /// Test buckets by token-length range.
    pub buckets: Vec<BucketSpec>,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Copy,
            vocab_size: 16,
            frames_per_token: 3,
            frame_dim: 16,
            frame_noise_std: 0.1,
            train_len: [3, 10],
            n_train: 2000,
            buckets: vec![
                BucketSpec {
                    name: "short".into(),
                    len: [3, 10],
                    n: 100,
                },
                BucketSpec {
                    name: "long".into(),
                    len: [30, 60],
                    n: 60,
                },
            ],
            seed: 17,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= vocab::NUM_SPECIAL + 1 {
            return Err(Error::config(format!(
                "vocab_size {} leaves fewer than 2 real tokens",
                self.vocab_size
            )));
        }
        if self.frames_per_token == 0 || self.frame_dim == 0 || self.n_train == 0 {
            return Err(Error::config(
                "frames_per_token, frame_dim and n_train must be positive",
            ));
        }
        if self.frame_noise_std < 0.0 {
            return Err(Error::config("frame_noise_std must be non-negative"));
        }
        let check_range = |name: &str, r: [usize; 2]| -> Result<()> {
            if r[0] == 0 || r[0] > r[1] {
                return Err(Error::config(format!(
                    "{name} length range [{}, {}] is invalid",
                    r[0], r[1]
                )));
            }
            if self.kind == TaskKind::RepeatedSegment && r[0] < 4 {
                return Err(Error::config(format!(
                    "{name}: repeated_segment needs length >= 4 to plant two spans"
                )));
            }
            Ok(())
        };
        check_range("train_len", self.train_len)?;
        for b in &self.buckets {
            check_range(&b.name, b.len)?;
            if b.n == 0 {
                return Err(Error::config(format!("bucket '{}' has n = 0", b.name)));
            }
        }
        Ok(())
    }

    pub fn n_real_tokens(&self) -> u32 {
        self.vocab_size as u32 - vocab::FIRST_REAL
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetMeta {
    pub frame_dim: usize,
    pub frames_per_token: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Row-major `[n_frames, frame_dim]`.
    pub frames: Vec<f32>,
    pub n_frames: usize,
    /// Reference token string (real tokens only, no SOS/EOS).
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub utts: Vec<Utterance>,
}

impl Dataset {
    pub fn max_token_len(&self) -> usize {
        self.utts.iter().map(|u| u.tokens.len()).max().unwrap_or(0)
    }

    pub fn max_frame_len(&self) -> usize {
        self.utts.iter().map(|u| u.n_frames).max().unwrap_or(0)
    }
}

pub struct GeneratedTask {
    pub train: Dataset,
    pub buckets: Vec<(String, Dataset)>,
}

/// Per-token prototype vectors, a pure function of (config.seed, vocab,
/// frame_dim). Reserved ids get prototypes too (never emitted).
fn prototypes(cfg: &TaskConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0xA0);
    Tensor::randn(&[cfg.vocab_size, cfg.frame_dim], 1.0, &mut rng).to_vec()
}

fn sample_tokens(cfg: &TaskConfig, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n_real = cfg.n_real_tokens();
    let mut tokens: Vec<u32> = (0..len)
        .map(|_| vocab::FIRST_REAL + rng.gen_range(0..n_real))
        .collect();
    if cfg.kind == TaskKind::RepeatedSegment {
        // Plant one shared sub-span at two distinct, non-overlapping spots.
        let seg = (len / 4).clamp(2, 6);
        let p1 = rng.gen_range(0..=len - 2 * seg);
        let p2 = rng.gen_range(p1 + seg..=len - seg);
        let span: Vec<u32> = tokens[p1..p1 + seg].to_vec();
        tokens[p2..p2 + seg].copy_from_slice(&span);
    }
    tokens
}

fn emit_frames(cfg: &TaskConfig, protos: &[f32], tokens: &[u32], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let d = cfg.frame_dim;
    let mut frames = Vec::with_capacity(tokens.len() * cfg.frames_per_token * d);
    for &tok in tokens {
        let proto = &protos[tok as usize * d..(tok as usize + 1) * d];
        for _ in 0..cfg.frames_per_token {
            for &p in proto {
                let noise = if cfg.frame_noise_std > 0.0 {
                    cfg.frame_noise_std * gauss(rng)
                } else {
                    0.0
                };
                frames.push(p + noise);
            }
        }
    }
    frames
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn generate_split(
    cfg: &TaskConfig,
    protos: &[f32],
    prefix: &str,
    len_range: [usize; 2],
    n: usize,
    stream: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut utts = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(len_range[0]..=len_range[1]);
        let tokens = sample_tokens(cfg, len, &mut rng);
        let frames = emit_frames(cfg, protos, &tokens, &mut rng);
        utts.push(Utterance {
            id: format!("{prefix}{i:05}"),
            n_frames: tokens.len() * cfg.frames_per_token,
            frames,
            tokens,
        });
    }
    Dataset {
        meta: DatasetMeta {
            frame_dim: cfg.frame_dim,
            frames_per_token: cfg.frames_per_token,
            vocab_size: cfg.vocab_size,
        },
        utts,
    }
}

/// Generate the train split and every test bucket. Pure in (config, seed):
/// each split draws from its own RNG stream, so bucket contents do not
/// depend on `n_train`.
pub fn generate_task(cfg: &TaskConfig) -> Result<GeneratedTask> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let train = generate_split(cfg, &protos, "train", cfg.train_len, cfg.n_train, 1);
    let buckets = cfg
        .buckets
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let prefix = format!("{}_", b.name);
            (
                b.name.clone(),
                generate_split(cfg, &protos, &prefix, b.len, b.n, 2 + i as u64),
            )
        })
        .collect();
    Ok(GeneratedTask { train, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emission_arithmetic() {
        let cfg = TaskConfig {
            frames_per_token: 3,
            train_len: [5, 5],
            n_train: 4,
            ..TaskConfig::default()
        };
        let task = generate_task(&cfg).unwrap();
        for u in &task.train.utts {
            assert_eq!(u.tokens.len(), 5);
            assert_eq!(u.n_frames, 15);
            assert_eq!(u.frames.len(), 15 * cfg.frame_dim);
        }
    }

    #[test]
    fn determinism_per_seed() {
        let cfg = TaskConfig {
            n_train: 20,
            ..TaskConfig::default()
        };
        let a = generate_task(&cfg).unwrap();
        let b = generate_task(&cfg).unwrap();
        for (x, y) in a.train.utts.iter().zip(&b.train.utts) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.frames, y.frames);
        }
        let different = generate_task(&TaskConfig {
            seed: cfg.seed + 1,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(a.train.utts[0].tokens, different.train.utts[0].tokens);
    }

    #[test]
    fn bucket_content_independent_of_train_size() {
        let small = generate_task(&TaskConfig {
            n_train: 5,
            ..TaskConfig::default()
        })
        .unwrap();
        let large = generate_task(&TaskConfig {
            n_train: 50,
            ..TaskConfig::default()
        })
        .unwrap();
        assert_eq!(
            small.buckets[0].1.utts[0].tokens,
            large.buckets[0].1.utts[0].tokens
        );
    }

    #[test]
    fn repeated_segment_plants_identical_spans() {
        let cfg = TaskConfig {
            kind: TaskKind::RepeatedSegment,
            frame_noise_std: 0.0,
            train_len: [8, 12],
            n_train: 30,
            buckets: vec![],
            ..TaskConfig::default()
        };
        let task = generate_task(&cfg).unwrap();
        let d = cfg.frame_dim;
        let fpt = cfg.frames_per_token;
        for u in &task.train.utts {
            // Find two identical non-overlapping token sub-spans of len >= 2.
            let len = u.tokens.len();
            let seg = (len / 4).clamp(2, 6);
            let mut found = None;
            'outer: for a in 0..len - seg {
                for b in a + seg..=len - seg {
                    if u.tokens[a..a + seg] == u.tokens[b..b + seg] {
                        found = Some((a, b));
                        break 'outer;
                    }
                }
            }
            let (a, b) = found.expect("planted span must exist");
            // With zero noise the planted frames are bit-identical.
            let fa = &u.frames[a * fpt * d..(a + seg) * fpt * d];
            let fb = &u.frames[b * fpt * d..(b + seg) * fpt * d];
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        let cfg = TaskConfig {
            train_len: [7, 3],
            ..TaskConfig::default()
        };
        assert!(generate_task(&cfg).is_err());
        let cfg = TaskConfig {
            kind: TaskKind::RepeatedSegment,
            train_len: [2, 6],
            buckets: vec![],
            ..TaskConfig::default()
        };
        assert!(generate_task(&cfg).is_err());
    }
}
