//! Scaled dot-product and multi-head attention with optional clipped
//! relative positional embeddings on the keys.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::positional::RpeTable;
use crate::tensor::{Graph, Tensor};

/// Additive mask sentinel: masked logits receive this before softmax, so
/// their post-softmax weight underflows to zero.
pub const MASK_SENTINEL: f32 = -1e9;

/// Attention mask over `(query, key)` pairs.
///
/// `Padding` masks keys at or beyond each batch element's valid length;
/// `Causal` forbids query `i` from attending key `j > i`.
#[derive(Debug, Clone)]
pub enum AttentionMask {
    None,
    Causal,
    Padding { key_lens: Vec<usize> },
    CausalPadding { key_lens: Vec<usize> },
}

impl AttentionMask {
    /// Materialize as an additive no-grad tensor, or `None` for the
    /// unmasked case. Shape is `[n_q, n_k]` for `Causal` and
    /// `[b, 1, n_q, n_k]` when padding is involved (broadcast over heads).
    ///
    /// Errors if any query row would have every key masked.
    pub fn additive(&self, batch: usize, n_q: usize, n_k: usize) -> Result<Option<Tensor>> {
        match self {
            AttentionMask::None => Ok(None),
            AttentionMask::Causal => {
                let mut data = vec![0.0f32; n_q * n_k];
                for i in 0..n_q {
                    for j in (i + 1)..n_k {
                        data[i * n_k + j] = MASK_SENTINEL;
                    }
                }
                // Query row i always keeps key 0 (j = 0 <= i).
                Ok(Some(Tensor::from_vec(&[n_q, n_k], data)?))
            }
            AttentionMask::Padding { key_lens } | AttentionMask::CausalPadding { key_lens } => {
                if key_lens.len() != batch {
                    return Err(Error::shape(format!(
                        "mask has {} key lengths for batch of {batch}",
                        key_lens.len()
                    )));
                }
                let causal = matches!(self, AttentionMask::CausalPadding { .. });
                let mut data = vec![0.0f32; batch * n_q * n_k];
                for (b, &len) in key_lens.iter().enumerate() {
                    if len == 0 {
                        return Err(Error::shape(format!(
                            "batch element {b}: all keys masked (valid length 0)"
                        )));
                    }
                    if len > n_k {
                        return Err(Error::shape(format!(
                            "batch element {b}: valid length {len} exceeds {n_k} keys"
                        )));
                    }
                    for i in 0..n_q {
                        let row = &mut data[(b * n_q + i) * n_k..(b * n_q + i + 1) * n_k];
                        for (j, slot) in row.iter_mut().enumerate() {
                            if j >= len || (causal && j > i) {
                                *slot = MASK_SENTINEL;
                            }
                        }
                        // Causal+padding keeps key 0 for every query since
                        // len >= 1, so no degenerate row is possible here.
                    }
                }
                Ok(Some(Tensor::from_vec(&[batch, 1, n_q, n_k], data)?))
            }
        }
    }
}

/// One multi-head attention layer: fused per-head projections plus an
/// optional relative-position table shared across its heads.
///
/// Head split layout is fixed so checkpoints stay portable:
/// `[b, n, h*d_k]` reshapes to `[b, n, h, d_k]` and transposes to
/// `[b, h, n, d_k]`.
pub struct MhaLayer {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub heads: usize,
    pub rpe: Option<RpeTable>,
    /// When true, forward copies its attention weights into `last_weights`
    /// for offline inspection.
    probe: RefCell<bool>,
    last_weights: RefCell<Option<(Vec<usize>, Vec<f32>)>>,
}

impl MhaLayer {
    pub fn new(
        d_m: usize,
        heads: usize,
        rpe: Option<RpeTable>,
        rng: &mut impl Rng,
    ) -> Result<MhaLayer> {
        if heads == 0 || d_m % heads != 0 {
            return Err(Error::config(format!(
                "model dim {d_m} not divisible by {heads} heads"
            )));
        }
        if let Some(table) = &rpe {
            if table.d_k() != d_m / heads {
                return Err(Error::config(format!(
                    "relative table dim {} != head dim {}",
                    table.d_k(),
                    d_m / heads
                )));
            }
        }
        let mut proj = || {
            let t = Tensor::xavier(d_m, d_m, rng);
            t.set_requires_grad(true);
            t
        };
        let w_q = proj();
        let w_k = proj();
        let w_v = proj();
        let w_o = proj();
        let zero = || {
            let t = Tensor::zeros(&[d_m]);
            t.set_requires_grad(true);
            t
        };
        Ok(MhaLayer {
            w_q,
            b_q: zero(),
            w_k,
            b_k: zero(),
            w_v,
            b_v: zero(),
            w_o,
            b_o: zero(),
            heads,
            rpe,
            probe: RefCell::new(false),
            last_weights: RefCell::new(None),
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.dim(0) / self.heads
    }

    pub fn set_probe(&self, on: bool) {
        *self.probe.borrow_mut() = on;
        if !on {
            *self.last_weights.borrow_mut() = None;
        }
    }

    /// Attention weights captured by the most recent forward pass, as
    /// `(shape [b, h, n_q, n_k], row-major data)`.
    pub fn probed_weights(&self) -> Option<(Vec<usize>, Vec<f32>)> {
        self.last_weights.borrow().clone()
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.b_q"), self.b_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.b_k"), self.b_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.b_v"), self.b_v.clone()));
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
        out.push((format!("{prefix}.b_o"), self.b_o.clone()));
        if let Some(table) = &self.rpe {
            out.push((format!("{prefix}.rpe"), table.weights().clone()));
        }
    }
}

/// Unscaled attention logits `q @ k^T` for `[b, h, n, d_k]` inputs.
fn plain_logits(g: &mut Graph, q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let kt = g.transpose_last2(k)?;
    g.matmul(q, &kt)
}

/// Attention logits with relative positional rows added to the keys,
/// computed in the two-term split form and scaled by `1/sqrt(d_k)`.
///
/// The content term is `q @ k^T`. The position term gathers the relative
/// rows `[n_q, n_k, d_k]`, regroups the queries into one `(b*h) x d_k`
/// matrix per query position, runs a batched product against the
/// transposed rows, and reshapes back to `[b, h, n_q, n_k]`.
pub fn rpe_logits(g: &mut Graph, q: &Tensor, k: &Tensor, table: &RpeTable) -> Result<Tensor> {
    let qsh = q.shape();
    if qsh.len() != 4 {
        return Err(Error::shape(format!(
            "rpe_logits expects [b, h, n_q, d_k] queries, got {qsh:?}"
        )));
    }
    let (b, h, n_q, d_k) = (qsh[0], qsh[1], qsh[2], qsh[3]);
    let n_k = k.dim(2);
    if table.d_k() != d_k {
        return Err(Error::shape(format!(
            "relative table dim {} != head dim {d_k}",
            table.d_k()
        )));
    }
    let content = plain_logits(g, q, k)?;

    let rel = table.relative_rows(g, n_q, n_k)?; // [n_q, n_k, d_k]
    let rel_t = g.transpose_last2(&rel)?; // [n_q, d_k, n_k]
    let q_by_pos = g.permute(q, &[2, 0, 1, 3])?; // [n_q, b, h, d_k]
    let q_flat = g.reshape(&q_by_pos, &[n_q, b * h, d_k])?;
    let pos = g.matmul(&q_flat, &rel_t)?; // [n_q, b*h, n_k]
    let pos = g.reshape(&pos, &[n_q, b, h, n_k])?;
    let pos = g.permute(&pos, &[1, 2, 0, 3])?; // [b, h, n_q, n_k]

    let sum = g.add(&content, &pos)?;
    Ok(g.scale(&sum, 1.0 / (d_k as f32).sqrt()))
}

/// Core attention: logits (plain or relative-augmented), masking, softmax,
/// weighted sum over values. Returns `(output, attention weights)`.
fn attention_core(
    g: &mut Graph,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    rpe: Option<&RpeTable>,
) -> Result<(Tensor, Tensor)> {
    let qsh = q.shape();
    let ksh = k.shape();
    let vsh = v.shape();
    if qsh.len() != 4 || ksh.len() != 4 || vsh.len() != 4 {
        return Err(Error::shape(format!(
            "attention expects [b, h, n, d] inputs, got q {qsh:?} k {ksh:?} v {vsh:?}"
        )));
    }
    if qsh[3] != ksh[3] {
        return Err(Error::shape(format!(
            "query dim {} != key dim {}",
            qsh[3], ksh[3]
        )));
    }
    if ksh[2] != vsh[2] {
        return Err(Error::shape(format!(
            "key count {} != value count {}",
            ksh[2], vsh[2]
        )));
    }
    if qsh[0] != ksh[0] || qsh[1] != ksh[1] || ksh[0] != vsh[0] || ksh[1] != vsh[1] {
        return Err(Error::shape(format!(
            "attention batch/head dims disagree: q {qsh:?} k {ksh:?} v {vsh:?}"
        )));
    }
    let (b, n_q, n_k) = (qsh[0], qsh[2], ksh[2]);
    let logits = match rpe {
        Some(table) => rpe_logits(g, q, k, table)?,
        None => {
            let l = plain_logits(g, q, k)?;
            g.scale(&l, 1.0 / (qsh[3] as f32).sqrt())
        }
    };
    let logits = match mask.additive(b, n_q, n_k)? {
        Some(m) => g.add(&logits, &m)?,
        None => logits,
    };
    let weights = g.softmax(&logits, 3)?;
    let out = g.matmul(&weights, v)?;
    Ok((out, weights))
}

/// Scaled dot-product attention over `[b, h, n, d]` tensors:
/// `softmax(q k^T / sqrt(d_k)) v` after masking.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    attention_core(g, q, k, v, mask, None).map(|(out, _)| out)
}

/// Split `[b, n, h*d_k]` into heads as `[b, h, n, d_k]`.
fn split_heads(g: &mut Graph, x: &Tensor, heads: usize) -> Result<Tensor> {
    let sh = x.shape();
    let (b, n, d_m) = (sh[0], sh[1], sh[2]);
    let d_k = d_m / heads;
    let r = g.reshape(x, &[b, n, heads, d_k])?;
    g.permute(&r, &[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
fn merge_heads(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    let (b, h, n, d_k) = (sh[0], sh[1], sh[2], sh[3]);
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(&p, &[b, n, h * d_k])
}

/// Full multi-head attention: project, split into heads, attend (with the
/// layer's relative table when attached), merge, output-project.
///
/// Self-attention passes `q_in == kv_in`; decoder source attention passes
/// the encoder output as `kv_in`.
pub fn mha(
    g: &mut Graph,
    layer: &MhaLayer,
    q_in: &Tensor,
    kv_in: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let qsh = q_in.shape();
    if qsh.len() != 3 || qsh[2] != layer.w_q.dim(0) {
        return Err(Error::shape(format!(
            "mha expects [b, n, {}] queries, got {qsh:?}",
            layer.w_q.dim(0)
        )));
    }
    let q = g.matmul(q_in, &layer.w_q)?;
    let q = g.add(&q, &layer.b_q)?;
    let k = g.matmul(kv_in, &layer.w_k)?;
    let k = g.add(&k, &layer.b_k)?;
    let v = g.matmul(kv_in, &layer.w_v)?;
    let v = g.add(&v, &layer.b_v)?;

    let q = split_heads(g, &q, layer.heads)?;
    let k = split_heads(g, &k, layer.heads)?;
    let v = split_heads(g, &v, layer.heads)?;

    let (ctx, weights) = attention_core(g, &q, &k, &v, mask, layer.rpe.as_ref())?;
    if *layer.probe.borrow() {
        *layer.last_weights.borrow_mut() = Some((weights.shape(), weights.to_vec()));
    }

    let merged = merge_heads(g, &ctx)?;
    let out = g.matmul(&merged, &layer.w_o)?;
    g.add(&out, &layer.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::inference();
        let q = t(&[1, 1, 2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1]);
        let k = t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]);
        let v = t(&[1, 1, 1, 4], &[9.0, -2.0, 0.5, 7.0]);
        let out = scaled_dot_attention(&mut g, &q, &k, &v, &AttentionMask::None).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 2, 4]);
        assert_eq!(&out.to_vec()[0..4], &[9.0, -2.0, 0.5, 7.0]);
        assert_eq!(&out.to_vec()[4..8], &[9.0, -2.0, 0.5, 7.0]);
    }

    #[test]
    fn identical_logits_average_values() {
        let mut g = Graph::inference();
        // Two identical keys: weights 1/2 each, output is the value mean.
        let q = t(&[1, 1, 1, 2], &[1.0, -0.5]);
        let k = t(&[1, 1, 2, 2], &[0.7, 0.2, 0.7, 0.2]);
        let v = t(&[1, 1, 2, 2], &[2.0, 4.0, 6.0, 10.0]);
        let out = scaled_dot_attention(&mut g, &q, &k, &v, &AttentionMask::None).unwrap();
        assert!((out.to_vec()[0] - 4.0).abs() < 1e-6);
        assert!((out.to_vec()[1] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        // Explicit per-element oracle on random 1x1x2x2 inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let mut g = Graph::inference();
        let out = scaled_dot_attention(&mut g, &q, &k, &v, &AttentionMask::None).unwrap();

        let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
        let scale = 1.0 / (2f64).sqrt();
        for i in 0..2 {
            let mut e = [0.0f64; 2];
            for (j, ej) in e.iter_mut().enumerate() {
                let mut dot = 0.0f64;
                for d in 0..2 {
                    dot += qd[i * 2 + d] as f64 * kd[j * 2 + d] as f64;
                }
                *ej = dot * scale;
            }
            let m = e[0].max(e[1]);
            let w0 = (e[0] - m).exp();
            let w1 = (e[1] - m).exp();
            let z = w0 + w1;
            for d in 0..2 {
                let want = (w0 / z) * vd[d] as f64 + (w1 / z) * vd[2 + d] as f64;
                let got = out.to_vec()[i * 2 + d] as f64;
                assert!((got - want).abs() < 1e-6, "i={i} d={d}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn masked_rows_get_negligible_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::inference();
        let q = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 2, 5, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 2, 5, 3], 1.0, &mut rng);
        let mask = AttentionMask::Padding {
            key_lens: vec![3, 5],
        };
        let (_, w) = attention_core(&mut g, &q, &k, &v, &mask, None).unwrap();
        let wd = w.to_vec();
        // batch 0: keys 3 and 4 masked for every head/query.
        for h in 0..2 {
            for i in 0..4 {
                let row = &wd[(h * 4 + i) * 5..(h * 4 + i + 1) * 5];
                assert!(row[3] < 1e-6 && row[4] < 1e-6);
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_error() {
        let mask = AttentionMask::Padding { key_lens: vec![0] };
        assert!(mask.additive(1, 2, 3).is_err());
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::Causal.additive(1, 3, 3).unwrap().unwrap();
        let d = m.to_vec();
        assert_eq!(d[1], MASK_SENTINEL);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[2 * 3 + 2], 0.0);
        assert_eq!(d[2 * 3], 0.0);
    }

    #[test]
    fn zero_rpe_table_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 2, 5, 4], 1.0, &mut rng);
        let table = RpeTable::new(2, 4, &mut rng);
        table
            .weights()
            .copy_from(&vec![0.0; table.weights().numel()])
            .unwrap();
        let mut g = Graph::inference();
        let with_rpe = rpe_logits(&mut g, &q, &k, &table).unwrap();
        let plain = {
            let l = plain_logits(&mut g, &q, &k).unwrap();
            g.scale(&l, 1.0 / 2.0)
        };
        for (x, y) in with_rpe.to_vec().iter().zip(plain.to_vec().iter()) {
            assert_eq!(x, y);
        }
    }

    /// Literal per-pair form: for every (i, j), add the relative row to the
    /// key before the dot product.
    fn direct_logits_oracle(q: &Tensor, k: &Tensor, table: &RpeTable) -> Vec<f32> {
        let qsh = q.shape();
        let (b, h, n_q, d_k) = (qsh[0], qsh[1], qsh[2], qsh[3]);
        let n_k = k.dim(2);
        let qd = q.to_vec();
        let kd = k.to_vec();
        let wd = table.weights().to_vec();
        let scale = 1.0 / (d_k as f32).sqrt();
        let mut out = vec![0.0f32; b * h * n_q * n_k];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..n_q {
                    for j in 0..n_k {
                        let row = table.row_index(j as isize - i as isize);
                        let mut dot = 0.0f32;
                        for d in 0..d_k {
                            let qv = qd[((bi * h + hi) * n_q + i) * d_k + d];
                            let kv = kd[((bi * h + hi) * n_k + j) * d_k + d];
                            dot += qv * (kv + wd[row * d_k + d]);
                        }
                        out[((bi * h + hi) * n_q + i) * n_k + j] = dot * scale;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn split_form_matches_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..20 {
            let (b, h, n_q, n_k, d_k, k) = match trial % 4 {
                0 => (1, 1, 3, 3, 2, 1),
                1 => (2, 3, 4, 6, 5, 2),
                2 => (1, 2, 7, 2, 3, 4),
                _ => (3, 1, 5, 5, 4, 10),
            };
            let q = Tensor::randn(&[b, h, n_q, d_k], 1.0, &mut rng);
            let kk = Tensor::randn(&[b, h, n_k, d_k], 1.0, &mut rng);
            let table = RpeTable::new(k, d_k, &mut rng);
            let mut g = Graph::inference();
            let split = rpe_logits(&mut g, &q, &kk, &table).unwrap();
            let want = direct_logits_oracle(&q, &kk, &table);
            for (got, want) in split.to_vec().iter().zip(&want) {
                assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn single_head_identity_projection_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let layer = MhaLayer::new(d, 1, None, &mut rng).unwrap();
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        for w in [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o] {
            w.copy_from(&eye).unwrap();
        }
        let x = Tensor::randn(&[1, 3, d], 1.0, &mut rng);
        let mut g = Graph::inference();
        let out = mha(&mut g, &layer, &x, &x, &AttentionMask::None).unwrap();
        let q = g.reshape(&x, &[1, 1, 3, d]).unwrap();
        let want = scaled_dot_attention(&mut g, &q, &q, &q, &AttentionMask::None).unwrap();
        for (a, b) in out.to_vec().iter().zip(want.to_vec().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mha_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = MhaLayer::new(8, 2, None, &mut rng).unwrap();
        let q = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[3, 7, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        let out = mha(&mut g, &layer, &q, &kv, &AttentionMask::None).unwrap();
        assert_eq!(out.shape(), vec![3, 5, 8]);
    }

    #[test]
    fn causal_mha_prefix_is_perturbation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = MhaLayer::new(8, 2, None, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        let base = mha(&mut g, &layer, &x, &x, &AttentionMask::Causal).unwrap();

        let t = 3usize;
        let mut perturbed = x.to_vec();
        for v in perturbed[(t + 1) * 8..].iter_mut() {
            *v += 5.0;
        }
        let xp = Tensor::from_vec(&[1, 6, 8], perturbed).unwrap();
        let out = mha(&mut g, &layer, &xp, &xp, &AttentionMask::Causal).unwrap();
        assert_eq!(
            base.to_vec()[..(t + 1) * 8],
            out.to_vec()[..(t + 1) * 8],
            "outputs at positions <= t must be bit-identical"
        );
        assert_ne!(base.to_vec()[(t + 1) * 8..], out.to_vec()[(t + 1) * 8..]);
    }

    #[test]
    fn key_permutation_invariance_without_positions() {
        // Attention is a weighted bag over keys: permuting key/value rows
        // leaves per-query outputs unchanged (up to summation order)...
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = Tensor::randn(&[1, 1, 3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 5, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 1, 5, 4], 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor| {
            let d = t.to_vec();
            let mut out = vec![0.0f32; d.len()];
            for (to, &from) in perm.iter().enumerate() {
                out[to * 4..(to + 1) * 4].copy_from_slice(&d[from * 4..(from + 1) * 4]);
            }
            Tensor::from_vec(&[1, 1, 5, 4], out).unwrap()
        };
        let kp = permute_rows(&k);
        let vp = permute_rows(&v);
        let mut g = Graph::inference();
        let base = scaled_dot_attention(&mut g, &q, &k, &v, &AttentionMask::None).unwrap();
        let permuted = scaled_dot_attention(&mut g, &q, &kp, &vp, &AttentionMask::None).unwrap();
        for (a, b) in base.to_vec().iter().zip(permuted.to_vec().iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        // ...but with a relative table attached the same permutation must
        // change some output (position-awareness).
        let table = RpeTable::new(2, 4, &mut rng);
        let with = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::inference();
            let (out, _) =
                attention_core(&mut g, &q, k, v, &AttentionMask::None, Some(&table)).unwrap();
            out.to_vec()
        };
        let a = with(&k, &v);
        let b = with(&kp, &vp);
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-4, "relative table must break bag symmetry");
    }

    #[test]
    fn probe_captures_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = MhaLayer::new(8, 2, None, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        assert!(layer.probed_weights().is_none());
        layer.set_probe(true);
        mha(&mut g, &layer, &x, &x, &AttentionMask::None).unwrap();
        let (shape, data) = layer.probed_weights().unwrap();
        assert_eq!(shape, vec![1, 2, 4, 4]);
        let row: f32 = data[..4].iter().sum();
        assert!((row - 1.0).abs() < 1e-6);
        layer.set_probe(false);
        assert!(layer.probed_weights().is_none());
    }
}
