//! Evaluation: decode every utterance, align against the reference,
//! aggregate CER and deletion-taxonomy counts per length bucket, and
//! render text and machine-readable reports.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{align, detect_self_loop};
use crate::decode::{beam_decode, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{FwdCtx, TransformerModel};
use crate::tensor::{Graph, Tensor};

use super::task::Dataset;

#[derive(Debug, Clone, Serialize)]
pub struct UttResult {
    pub id: String,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub cer: f32,
    pub n_sub: usize,
    pub n_del: usize,
    pub n_ins: usize,
    pub n_tail_del: usize,
    pub n_internal_del: usize,
    pub truncated: bool,
    pub self_loop_spans: usize,
    pub bucket: String,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct ErrorCounts {
    pub n_hit: usize,
    pub n_sub: usize,
    pub n_del: usize,
    pub n_ins: usize,
    pub n_tail_del: usize,
    pub n_internal_del: usize,
}

impl ErrorCounts {
    fn absorb(&mut self, r: &crate::align::AlignmentReport) {
        self.n_hit += r.n_hit;
        self.n_sub += r.n_sub;
        self.n_del += r.n_del;
        self.n_ins += r.n_ins;
        self.n_tail_del += r.n_tail_del;
        self.n_internal_del += r.n_internal_del;
    }

    pub fn errors(&self) -> usize {
        self.n_sub + self.n_del + self.n_ins
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub name: String,
    pub n_utts: usize,
    pub ref_tokens: usize,
    pub cer: f32,
    #[serde(flatten)]
    pub counts: ErrorCounts,
    pub n_truncated: usize,
    pub n_self_loop: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub buckets: Vec<BucketReport>,
    pub corpus: BucketReport,
    pub per_utt: Vec<UttResult>,
}

impl EvalReport {
    pub fn bucket(&self, name: &str) -> Option<&BucketReport> {
        self.buckets.iter().find(|b| b.name == name)
    }

    /// Line-oriented text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:>6} {:>10} {:>8} {:>6} {:>6} {:>6} {:>9} {:>13} {:>6} {:>6}",
            "bucket", "utts", "ref_tokens", "cer%", "sub", "del", "ins", "tail_del", "internal_del", "trunc", "loops"
        )
        .expect("string write");
        for b in self.buckets.iter().chain(std::iter::once(&self.corpus)) {
            writeln!(
                out,
                "{:<12} {:>6} {:>10} {:>8.2} {:>6} {:>6} {:>6} {:>9} {:>13} {:>6} {:>6}",
                b.name,
                b.n_utts,
                b.ref_tokens,
                b.cer * 100.0,
                b.counts.n_sub,
                b.counts.n_del,
                b.counts.n_ins,
                b.counts.n_tail_del,
                b.counts.n_internal_del,
                b.n_truncated,
                b.n_self_loop
            )
            .expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn summarize(name: &str, utts: &[UttResult]) -> BucketReport {
    let mut counts = ErrorCounts::default();
    let mut ref_tokens = 0usize;
    let mut n_truncated = 0usize;
    let mut n_self_loop = 0usize;
    for u in utts {
        counts.n_sub += u.n_sub;
        counts.n_del += u.n_del;
        counts.n_ins += u.n_ins;
        counts.n_tail_del += u.n_tail_del;
        counts.n_internal_del += u.n_internal_del;
        counts.n_hit += u.ref_len - u.n_sub - u.n_del;
        ref_tokens += u.ref_len;
        n_truncated += u.truncated as usize;
        n_self_loop += (u.self_loop_spans > 0) as usize;
    }
    BucketReport {
        name: name.to_string(),
        n_utts: utts.len(),
        ref_tokens,
        cer: counts.errors() as f32 / ref_tokens.max(1) as f32,
        counts,
        n_truncated,
        n_self_loop,
    }
}

/// Decode with beam search and score every bucket.
pub fn evaluate(
    model: &TransformerModel,
    buckets: &[(String, Dataset)],
    beam: &BeamConfig,
) -> Result<EvalReport> {
    beam.validate()?;
    let mut per_utt = Vec::new();
    for (name, ds) in buckets {
        if ds.meta.vocab_size != model.config().vocab_size {
            return Err(Error::config(format!(
                "bucket '{name}': dataset vocab {} != model vocab {}",
                ds.meta.vocab_size,
                model.config().vocab_size
            )));
        }
        for u in &ds.utts {
            let frames =
                Tensor::from_vec(&[1, u.n_frames, ds.meta.frame_dim], u.frames.clone())?;
            let mut graph = Graph::inference();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = FwdCtx::new(&mut graph, &mut rng, false);
            let enc = model.encode(&mut ctx, &frames, &[u.n_frames])?;
            let results = beam_decode(model, &enc, u.n_frames, beam)?;
            let best = results
                .first()
                .ok_or_else(|| Error::data("beam returned no hypotheses"))?;
            per_utt.push(score_one(name, &u.id, &u.tokens, &best.tokens, best.truncated));
        }
    }
    Ok(build_report(per_utt))
}

/// Score pre-computed hypotheses instead of decoding (the perfect-oracle
/// test hook, and the scorer behind external transcript evaluation).
pub fn evaluate_hypotheses(
    buckets: &[(String, Dataset)],
    hyp_for: impl Fn(&str) -> Option<Vec<u32>>,
) -> Result<EvalReport> {
    let mut per_utt = Vec::new();
    for (name, ds) in buckets {
        for u in &ds.utts {
            let hyp = hyp_for(&u.id)
                .ok_or_else(|| Error::data(format!("no hypothesis for utterance '{}'", u.id)))?;
            per_utt.push(score_one(name, &u.id, &u.tokens, &hyp, false));
        }
    }
    Ok(build_report(per_utt))
}

fn score_one(bucket: &str, id: &str, reference: &[u32], hyp: &[u32], truncated: bool) -> UttResult {
    let report = align(reference, hyp);
    let loops = detect_self_loop(hyp, 3);
    UttResult {
        id: id.to_string(),
        ref_len: reference.len(),
        hyp_len: hyp.len(),
        cer: report.cer,
        n_sub: report.n_sub,
        n_del: report.n_del,
        n_ins: report.n_ins,
        n_tail_del: report.n_tail_del,
        n_internal_del: report.n_internal_del,
        truncated,
        self_loop_spans: loops.len(),
        bucket: bucket.to_string(),
    }
}

fn build_report(per_utt: Vec<UttResult>) -> EvalReport {
    let mut bucket_names: Vec<String> = Vec::new();
    for u in &per_utt {
        if !bucket_names.contains(&u.bucket) {
            bucket_names.push(u.bucket.clone());
        }
    }
    let buckets: Vec<BucketReport> = bucket_names
        .iter()
        .map(|name| {
            let members: Vec<UttResult> = per_utt
                .iter()
                .filter(|u| &u.bucket == name)
                .cloned()
                .collect();
            summarize(name, &members)
        })
        .collect();
    let corpus = summarize("corpus", &per_utt);
    EvalReport {
        buckets,
        corpus,
        per_utt,
    }
}
