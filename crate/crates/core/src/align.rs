//! Levenshtein alignment, character-error-rate accounting, the
//! tail/internal deletion taxonomy, and self-loop (repeated n-gram)
//! detection over decoded sequences.

use serde::Serialize;

/// One step of an alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignOp {
    Hit,
    Sub,
    Del,
    Ins,
}

/// Alignment step with the reference/hypothesis positions it consumes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlignStep {
    pub op: AlignOp,
    pub ref_pos: Option<usize>,
    pub hyp_pos: Option<usize>,
}

/// Full alignment outcome between a reference and a hypothesis.
///
/// Accounting identities: `n_sub + n_del + n_hit == ref_len`,
/// `n_sub + n_ins + n_hit == hyp_len`, and
/// `n_tail_del + n_internal_del == n_del`.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub cer: f32,
    pub n_hit: usize,
    pub n_sub: usize,
    pub n_del: usize,
    pub n_ins: usize,
    /// Deletions whose run reaches the end of the reference with no later
    /// hit or substitution.
    pub n_tail_del: usize,
    /// Every other deletion (typically between similar segments).
    pub n_internal_del: usize,
    pub ref_len: usize,
    pub hyp_len: usize,
    pub alignment: Vec<AlignStep>,
}

/// Unit-cost Levenshtein alignment with deterministic backtrace.
///
/// Ties prefer hit > substitution > deletion > insertion. CER is
/// `(sub + del + ins) / ref_len`; an empty reference divides by one
/// instead.
pub fn align(ref_toks: &[u32], hyp_toks: &[u32]) -> AlignmentReport {
    let r = ref_toks.len();
    let h = hyp_toks.len();
    // dist[i][j]: distance between ref[..i] and hyp[..j].
    let mut dist = vec![0u32; (r + 1) * (h + 1)];
    let idx = |i: usize, j: usize| i * (h + 1) + j;
    for i in 0..=r {
        dist[idx(i, 0)] = i as u32;
    }
    for j in 0..=h {
        dist[idx(0, j)] = j as u32;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub_cost = if ref_toks[i - 1] == hyp_toks[j - 1] { 0 } else { 1 };
            let best = (dist[idx(i - 1, j - 1)] + sub_cost)
                .min(dist[idx(i - 1, j)] + 1)
                .min(dist[idx(i, j - 1)] + 1);
            dist[idx(i, j)] = best;
        }
    }

    let mut steps = Vec::with_capacity(r.max(h));
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let d = dist[idx(i, j)];
        if i > 0 && j > 0 && ref_toks[i - 1] == hyp_toks[j - 1] && d == dist[idx(i - 1, j - 1)] {
            steps.push(AlignStep {
                op: AlignOp::Hit,
                ref_pos: Some(i - 1),
                hyp_pos: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d == dist[idx(i - 1, j - 1)] + 1 {
            steps.push(AlignStep {
                op: AlignOp::Sub,
                ref_pos: Some(i - 1),
                hyp_pos: Some(j - 1),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && d == dist[idx(i - 1, j)] + 1 {
            steps.push(AlignStep {
                op: AlignOp::Del,
                ref_pos: Some(i - 1),
                hyp_pos: None,
            });
            i -= 1;
        } else {
            steps.push(AlignStep {
                op: AlignOp::Ins,
                ref_pos: None,
                hyp_pos: Some(j - 1),
            });
            j -= 1;
        }
    }
    steps.reverse();

    let mut n_hit = 0;
    let mut n_sub = 0;
    let mut n_del = 0;
    let mut n_ins = 0;
    for s in &steps {
        match s.op {
            AlignOp::Hit => n_hit += 1,
            AlignOp::Sub => n_sub += 1,
            AlignOp::Del => n_del += 1,
            AlignOp::Ins => n_ins += 1,
        }
    }
    // A deletion is a tail deletion iff no hit or substitution follows it:
    // its run then necessarily consumes through the final reference token.
    let last_content = steps
        .iter()
        .rposition(|s| matches!(s.op, AlignOp::Hit | AlignOp::Sub));
    let n_tail_del = steps
        .iter()
        .enumerate()
        .filter(|(pos, s)| {
            s.op == AlignOp::Del && last_content.map_or(true, |lc| *pos > lc)
        })
        .count();

    AlignmentReport {
        cer: (n_sub + n_del + n_ins) as f32 / r.max(1) as f32,
        n_hit,
        n_sub,
        n_del,
        n_ins,
        n_tail_del,
        n_internal_del: n_del - n_tail_del,
        ref_len: r,
        hyp_len: h,
        alignment: steps,
    }
}

/// A maximal span where a primitive n-gram repeats consecutively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RepeatSpan {
    pub start: usize,
    pub unit_len: usize,
    pub repeats: usize,
}

impl RepeatSpan {
    pub fn covered_len(&self) -> usize {
        self.unit_len * self.repeats
    }
}

/// Report every maximal span where an n-gram (n >= 1) repeats at least
/// `min_repeat` times consecutively. Units that are themselves periodic
/// are skipped so a span is reported once, at its shortest period.
pub fn detect_self_loop(hyp: &[u32], min_repeat: usize) -> Vec<RepeatSpan> {
    assert!(min_repeat >= 2, "min_repeat must be at least 2");
    let len = hyp.len();
    let mut spans = Vec::new();
    for unit_len in 1..=len / min_repeat {
        for start in 0..len.saturating_sub(unit_len * min_repeat - 1) {
            let unit = &hyp[start..start + unit_len];
            if !is_primitive(unit) {
                continue;
            }
            // Skip non-leftmost phases of the same span.
            if start >= unit_len && &hyp[start - unit_len..start] == unit {
                continue;
            }
            let mut repeats = 1;
            while start + (repeats + 1) * unit_len <= len
                && &hyp[start + repeats * unit_len..start + (repeats + 1) * unit_len] == unit
            {
                repeats += 1;
            }
            if repeats >= min_repeat {
                spans.push(RepeatSpan {
                    start,
                    unit_len,
                    repeats,
                });
            }
        }
    }
    spans.sort_by_key(|s| (s.start, s.unit_len));
    spans
}

/// True if the slice is not a whole-number repetition of a shorter period.
fn is_primitive(unit: &[u32]) -> bool {
    let n = unit.len();
    for p in 1..n {
        if n % p == 0 && (p..n).all(|i| unit[i] == unit[i - p]) {
            return false;
        }
    }
    true
}
