//! Forward ops on [`Graph`] and their backward rules.
//!
//! Every op allocates a fresh output tensor (no views). Shapes are checked
//! at every boundary and errors name the offending dimensions.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::TapeOp;
use super::{strides_of, Graph, Tensor};

impl Graph {
    /// Batched matrix product `a[..., m, p] @ b[..., p, n] -> [..., m, n]`.
    ///
    /// Leading batch dimensions must agree or be broadcastable from 1
    /// (right-aligned). Gradients reduce over broadcast dimensions.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ash = a.shape();
        let bsh = b.shape();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape(format!(
                "matmul requires rank >= 2 operands, got {ash:?} and {bsh:?}"
            )));
        }
        let (m, p) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (p2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if p != p2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: lhs {ash:?} ends in {m}x{p}, rhs {bsh:?} ends in {p2}x{n}"
            )));
        }
        let alead = &ash[..ash.len() - 2];
        let blead = &bsh[..bsh.len() - 2];
        let olead = broadcast_lead(alead, blead).ok_or_else(|| {
            Error::shape(format!(
                "matmul batch dimensions incompatible: lhs {ash:?} vs rhs {bsh:?}"
            ))
        })?;
        let mut oshape = olead.clone();
        oshape.push(m);
        oshape.push(n);

        let nbatch: usize = olead.iter().product();
        let amap = batch_index_map(&olead, alead);
        let bmap = batch_index_map(&olead, blead);
        let mut odata = vec![0.0f32; nbatch * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for batch in 0..nbatch {
                let asl = &ad[amap[batch] * m * p..(amap[batch] + 1) * m * p];
                let bsl = &bd[bmap[batch] * p * n..(bmap[batch] + 1) * p * n];
                let osl = &mut odata[batch * m * n..(batch + 1) * m * n];
                matmul2d(asl, bsl, m, p, n, osl);
            }
        }
        let out = Tensor::from_vec(&oshape, odata)?;
        if self.recording && (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            self.push(TapeOp::Matmul {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Elementwise `a + b` with `b` broadcastable into `a`'s shape
    /// (right-aligned; each dim equal or 1). Output has `a`'s shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ash = a.shape();
        let bsh = b.shape();
        let mut odata = a.to_vec();
        {
            let bd = b.data();
            if ash == bsh {
                for (o, &bv) in odata.iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            } else {
                let strides = broadcast_strides(&ash, &bsh).ok_or_else(|| {
                    Error::shape(format!("add: cannot broadcast {bsh:?} into {ash:?}"))
                })?;
                let last = *ash.last().unwrap();
                let last_stride = *strides.last().unwrap();
                for_each_row(&ash, &strides, |row_start, in_base| {
                    let orow = &mut odata[row_start..row_start + last];
                    if last_stride == 1 {
                        for (o, &bv) in orow.iter_mut().zip(&bd[in_base..in_base + last]) {
                            *o += bv;
                        }
                    } else {
                        let bv = bd[in_base];
                        for o in orow.iter_mut() {
                            *o += bv;
                        }
                    }
                });
            }
        }
        let out = Tensor::from_vec(&ash, odata)?;
        if self.recording && (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            self.push(TapeOp::Add {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: &Tensor, factor: f32) -> Tensor {
        let odata: Vec<f32> = a.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(&a.shape(), odata).expect("scale: shape preserved");
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Scale {
                a: a.clone(),
                factor,
                out: out.clone(),
            });
        }
        out
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let odata: Vec<f32> = a.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(&a.shape(), odata).expect("relu: shape preserved");
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Relu {
                a: a.clone(),
                out: out.clone(),
            });
        }
        out
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut odata = a.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(odata[base + k * inner]);
                }
                let mut sum = 0.0f32;
                for k in 0..len {
                    let e = (odata[base + k * inner] - max).exp();
                    odata[base + k * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for k in 0..len {
                    odata[base + k * inner] *= inv;
                }
            }
        }
        let out = Tensor::from_vec(&shape, odata)?;
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Softmax {
                axis,
                out: out.clone(),
                input: a.clone(),
            });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis followed by an elementwise
    /// affine transform with `gain` and `bias` (both shaped `[d]`).
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let shape = x.shape();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.numel() / d;
        let mut x_hat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; rows];
        let mut odata = vec![0.0f32; x.numel()];
        {
            let xd = x.data();
            let gd = gain.data();
            let bd = bias.data();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..d {
                    let xh = (row[j] - mean) * istd;
                    x_hat[r * d + j] = xh;
                    odata[r * d + j] = gd[j] * xh + bd[j];
                }
            }
        }
        let out = Tensor::from_vec(&shape, odata)?;
        if self.recording && (x.requires_grad() || gain.requires_grad() || bias.requires_grad()) {
            out.set_requires_grad(true);
            self.push(TapeOp::LayerNorm {
                x: x.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                x_hat,
                inv_std,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Mean label-smoothed cross entropy over non-pad positions.
    ///
    /// `logits` is `[..., V]` with one leading position per target. The
    /// smoothed target puts `1 - epsilon` on the true class and spreads
    /// `epsilon / (V - 1)` over the others. Pad positions are excluded from
    /// the mean; a target consisting only of pads is an error.
    pub fn cross_entropy_ls(
        &mut self,
        logits: &Tensor,
        targets: &[u32],
        epsilon: f32,
        pad_id: u32,
    ) -> Result<Tensor> {
        let shape = logits.shape();
        let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy_ls on rank-0 tensor"))?;
        if v < 2 {
            return Err(Error::shape("cross_entropy_ls requires at least 2 classes"));
        }
        let n = logits.numel() / v;
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy_ls: {n} logit positions vs {} targets",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::config(format!(
                "label smoothing epsilon must be in [0, 1), got {epsilon}"
            )));
        }
        let mut probs = vec![0.0f32; logits.numel()];
        let mut total = 0.0f64;
        let mut n_valid = 0usize;
        {
            let ld = logits.data();
            let off_weight = epsilon / (v as f32 - 1.0);
            for i in 0..n {
                let t = targets[i];
                if t == pad_id {
                    continue;
                }
                if t as usize >= v {
                    return Err(Error::shape(format!(
                        "cross_entropy_ls: target id {t} out of range for {v} classes"
                    )));
                }
                n_valid += 1;
                let row = &ld[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for &x in row {
                    sum += ((x - max) as f64).exp();
                }
                let lse = max as f64 + sum.ln();
                let prow = &mut probs[i * v..(i + 1) * v];
                for (j, &x) in row.iter().enumerate() {
                    prow[j] = (((x - max) as f64).exp() / sum) as f32;
                }
                let mut target_term = 0.0f64;
                for (j, &x) in row.iter().enumerate() {
                    let q = if j == t as usize {
                        1.0 - epsilon
                    } else {
                        off_weight
                    };
                    target_term += q as f64 * x as f64;
                }
                total += lse - target_term;
            }
        }
        if n_valid == 0 {
            return Err(Error::data(
                "cross_entropy_ls: every target position is pad; no valid positions",
            ));
        }
        let loss = (total / n_valid as f64) as f32;
        let out = Tensor::scalar(loss);
        if self.recording && logits.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::CrossEntropyLs {
                logits: logits.clone(),
                probs,
                targets: targets.to_vec(),
                pad_id,
                epsilon,
                n_valid,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "transpose_last2 requires rank >= 2, got {shape:?}"
            )));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let nbatch = a.numel() / (r * c);
        let mut oshape = shape.clone();
        let l = oshape.len();
        oshape.swap(l - 2, l - 1);
        let mut odata = vec![0.0f32; a.numel()];
        {
            let ad = a.data();
            for bidx in 0..nbatch {
                let base = bidx * r * c;
                for i in 0..r {
                    for j in 0..c {
                        odata[base + j * r + i] = ad[base + i * c + j];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&oshape, odata)?;
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::TransposeLast2 {
                a: a.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = a.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape(format!(
                "permute: axes {axes:?} is not a permutation of 0..{nd}"
            )));
        }
        let oshape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let odata = permute_copy(&a.data(), &shape, axes);
        let out = Tensor::from_vec(&oshape, odata)?;
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Permute {
                a: a.clone(),
                axes: axes.to_vec(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != a.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} as {new_shape:?}",
                a.shape()
            )));
        }
        let out = Tensor::from_vec(new_shape, a.to_vec())?;
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Reshape {
                a: a.clone(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Concatenate along the last axis; all other dims must agree.
    pub fn concat_last(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_last of zero tensors"));
        }
        let first = parts[0].shape();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0usize;
        for p in parts {
            let sh = p.shape();
            if sh.len() != first.len() || &sh[..sh.len() - 1] != lead {
                return Err(Error::shape(format!(
                    "concat_last: incompatible shapes {first:?} vs {sh:?}"
                )));
            }
            total_last += sh[sh.len() - 1];
        }
        let nrows: usize = lead.iter().product();
        let mut odata = vec![0.0f32; nrows * total_last];
        let mut offset = 0usize;
        for p in parts {
            let w = *p.shape().last().unwrap();
            let pd = p.data();
            for r in 0..nrows {
                odata[r * total_last + offset..r * total_last + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut oshape = lead.to_vec();
        oshape.push(total_last);
        let out = Tensor::from_vec(&oshape, odata)?;
        if self.recording && parts.iter().any(|p| p.requires_grad()) {
            out.set_requires_grad(true);
            self.push(TapeOp::ConcatLast {
                parts: parts.to_vec(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Gather rows of `table[V, d]` by id; output is `[prefix..., d]`.
    /// Gradients scatter-add back into the selected rows.
    pub fn embedding_lookup(
        &mut self,
        table: &Tensor,
        ids: &[u32],
        prefix_shape: &[usize],
    ) -> Result<Tensor> {
        let tsh = table.shape();
        if tsh.len() != 2 {
            return Err(Error::shape(format!(
                "embedding_lookup: table must be rank 2, got {tsh:?}"
            )));
        }
        let (v, d) = (tsh[0], tsh[1]);
        let n: usize = prefix_shape.iter().product();
        if n != ids.len() {
            return Err(Error::shape(format!(
                "embedding_lookup: prefix shape {prefix_shape:?} implies {n} ids, got {}",
                ids.len()
            )));
        }
        let mut odata = vec![0.0f32; n * d];
        {
            let td = table.data();
            for (i, &id) in ids.iter().enumerate() {
                if id as usize >= v {
                    return Err(Error::shape(format!(
                        "embedding_lookup: id {id} out of range for table with {v} rows"
                    )));
                }
                odata[i * d..(i + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
            }
        }
        let mut oshape = prefix_shape.to_vec();
        oshape.push(d);
        let out = Tensor::from_vec(&oshape, odata)?;
        if self.recording && table.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::EmbeddingLookup {
                table: table.clone(),
                ids: ids.to_vec(),
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Inverted dropout: at train time each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so
    /// inference is a pure forward pass. Identity when `rate == 0` or
    /// `train == false`.
    pub fn dropout(
        &mut self,
        a: &Tensor,
        rate: f32,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a.clone());
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..a.numel())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep_scale })
            .collect();
        let odata: Vec<f32> = a.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(&a.shape(), odata)?;
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::Dropout {
                a: a.clone(),
                mask,
                out: out.clone(),
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        if self.recording && a.requires_grad() {
            out.set_requires_grad(true);
            self.push(TapeOp::SumAll {
                a: a.clone(),
                out: out.clone(),
            });
        }
        out
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel();
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n as f32)
    }
}

impl TapeOp {
    pub(crate) fn backward(&self) {
        match self {
            TapeOp::Matmul { a, b, out } => {
                let Some(g) = out.grad() else { return };
                let ash = a.shape();
                let bsh = b.shape();
                let (m, p) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let alead = &ash[..ash.len() - 2];
                let blead = &bsh[..bsh.len() - 2];
                let olead = broadcast_lead(alead, blead).expect("checked in forward");
                let nbatch: usize = olead.iter().product();
                let amap = batch_index_map(&olead, alead);
                let bmap = batch_index_map(&olead, blead);
                if a.requires_grad() {
                    let mut da = vec![0.0f32; a.numel()];
                    let bd = b.data();
                    for batch in 0..nbatch {
                        let gsl = &g[batch * m * n..(batch + 1) * m * n];
                        let bsl = &bd[bmap[batch] * p * n..(bmap[batch] + 1) * p * n];
                        let dsl = &mut da[amap[batch] * m * p..(amap[batch] + 1) * m * p];
                        matmul2d_gbt(gsl, bsl, m, n, p, dsl);
                    }
                    drop(bd);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0f32; b.numel()];
                    let ad = a.data();
                    for batch in 0..nbatch {
                        let gsl = &g[batch * m * n..(batch + 1) * m * n];
                        let asl = &ad[amap[batch] * m * p..(amap[batch] + 1) * m * p];
                        let dsl = &mut db[bmap[batch] * p * n..(bmap[batch] + 1) * p * n];
                        matmul2d_atg(asl, gsl, m, p, n, dsl);
                    }
                    drop(ad);
                    b.accumulate_grad(&db);
                }
            }
            TapeOp::Add { a, b, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let ash = out.shape();
                    let bsh = b.shape();
                    if ash == bsh {
                        b.accumulate_grad(&g);
                    } else {
                        let strides = broadcast_strides(&ash, &bsh).expect("checked in forward");
                        let mut db = vec![0.0f32; b.numel()];
                        let last = *ash.last().unwrap();
                        let last_stride = *strides.last().unwrap();
                        for_each_row(&ash, &strides, |row_start, in_base| {
                            let grow = &g[row_start..row_start + last];
                            if last_stride == 1 {
                                for (d, &gv) in db[in_base..in_base + last].iter_mut().zip(grow) {
                                    *d += gv;
                                }
                            } else {
                                db[in_base] += grow.iter().sum::<f32>();
                            }
                        });
                        b.accumulate_grad(&db);
                    }
                }
            }
            TapeOp::Scale { a, factor, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let da: Vec<f32> = g.iter().map(|&gv| gv * factor).collect();
                    a.accumulate_grad(&da);
                }
            }
            TapeOp::Relu { a, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let ad = a.data();
                    let da: Vec<f32> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&da);
                }
            }
            TapeOp::Softmax { axis, out, input } => {
                let Some(g) = out.grad() else { return };
                if !input.requires_grad() {
                    return;
                }
                let shape = out.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let yd = out.data();
                let mut dx = vec![0.0f32; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0f32;
                        for k in 0..len {
                            dot += g[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..len {
                            let idx = base + k * inner;
                            dx[idx] = yd[idx] * (g[idx] - dot);
                        }
                    }
                }
                drop(yd);
                input.accumulate_grad(&dx);
            }
            TapeOp::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
                out,
            } => {
                let Some(g) = out.grad() else { return };
                let d = *out.shape().last().unwrap();
                let rows = g.len() / d;
                if gain.requires_grad() {
                    let mut dgain = vec![0.0f32; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dgain[j] += g[r * d + j] * x_hat[r * d + j];
                        }
                    }
                    gain.accumulate_grad(&dgain);
                }
                if bias.requires_grad() {
                    let mut dbias = vec![0.0f32; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dbias[j] += g[r * d + j];
                        }
                    }
                    bias.accumulate_grad(&dbias);
                }
                if x.requires_grad() {
                    let gd = gain.data();
                    let mut dx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let mut mean_dxh = 0.0f32;
                        let mut mean_dxh_xh = 0.0f32;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * x_hat[r * d + j];
                        }
                        mean_dxh /= d as f32;
                        mean_dxh_xh /= d as f32;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            dx[r * d + j] =
                                inv_std[r] * (dxh - mean_dxh - x_hat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    drop(gd);
                    x.accumulate_grad(&dx);
                }
            }
            TapeOp::CrossEntropyLs {
                logits,
                probs,
                targets,
                pad_id,
                epsilon,
                n_valid,
                out,
            } => {
                let Some(g) = out.grad() else { return };
                if !logits.requires_grad() {
                    return;
                }
                let gscale = g[0] / *n_valid as f32;
                let v = *logits.shape().last().unwrap();
                let off_weight = epsilon / (v as f32 - 1.0);
                let mut dl = vec![0.0f32; logits.numel()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == t as usize {
                            1.0 - epsilon
                        } else {
                            off_weight
                        };
                        dl[i * v + j] = gscale * (probs[i * v + j] - q);
                    }
                }
                logits.accumulate_grad(&dl);
            }
            TapeOp::TransposeLast2 { a, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let osh = out.shape();
                    let (r, c) = (osh[osh.len() - 2], osh[osh.len() - 1]);
                    let nbatch = g.len() / (r * c);
                    let mut da = vec![0.0f32; g.len()];
                    for bidx in 0..nbatch {
                        let base = bidx * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                da[base + j * r + i] = g[base + i * c + j];
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            TapeOp::Permute { a, axes, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let mut inverse = vec![0usize; axes.len()];
                    for (d, &ax) in axes.iter().enumerate() {
                        inverse[ax] = d;
                    }
                    let da = permute_copy(&g, &out.shape(), &inverse);
                    a.accumulate_grad(&da);
                }
            }
            TapeOp::Reshape { a, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
            }
            TapeOp::ConcatLast { parts, out } => {
                let Some(g) = out.grad() else { return };
                let osh = out.shape();
                let total_last = *osh.last().unwrap();
                let nrows = g.len() / total_last;
                let mut offset = 0usize;
                for p in parts {
                    let w = *p.shape().last().unwrap();
                    if p.requires_grad() {
                        let mut dp = vec![0.0f32; p.numel()];
                        for r in 0..nrows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &g[r * total_last + offset..r * total_last + offset + w],
                            );
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += w;
                }
            }
            TapeOp::EmbeddingLookup { table, ids, out } => {
                let Some(g) = out.grad() else { return };
                if table.requires_grad() {
                    let d = *out.shape().last().unwrap();
                    let mut dt = vec![0.0f32; table.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let row = &g[i * d..(i + 1) * d];
                        let trow = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (t, &gv) in trow.iter_mut().zip(row) {
                            *t += gv;
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }
            TapeOp::Dropout { a, mask, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let da: Vec<f32> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    a.accumulate_grad(&da);
                }
            }
            TapeOp::SumAll { a, out } => {
                let Some(g) = out.grad() else { return };
                if a.requires_grad() {
                    let da = vec![g[0]; a.numel()];
                    a.accumulate_grad(&da);
                }
            }
        }
    }
}

// ── broadcast and layout helpers ─────────────────────────────────────────

/// Broadcast two leading-dim shapes (each dim equal or 1). None on mismatch.
fn broadcast_lead(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let ad = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let bd = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if ad == bd || bd == 1 {
            out[i] = ad.max(bd);
        } else if ad == 1 {
            out[i] = bd;
        } else {
            return None;
        }
    }
    Some(out)
}

/// For every linear index into `out_lead`, the linear index into `in_lead`
/// (broadcast dims pinned to 0).
fn batch_index_map(out_lead: &[usize], in_lead: &[usize]) -> Vec<usize> {
    let total: usize = out_lead.iter().product();
    let in_strides = strides_of(in_lead);
    let offset = out_lead.len() - in_lead.len();
    let mut map = vec![0usize; total];
    let mut idx = vec![0usize; out_lead.len()];
    for (lin, slot) in map.iter_mut().enumerate() {
        if lin > 0 {
            for d in (0..out_lead.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_lead[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut off = 0usize;
        for d in offset..out_lead.len() {
            let id = d - offset;
            if in_lead[id] != 1 {
                off += idx[d] * in_strides[id];
            }
        }
        *slot = off;
    }
    map
}

/// Per-out-dim strides of `in_shape` right-aligned into `out_shape`
/// (0 where broadcast). None if not broadcastable.
fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let offset = out_shape.len() - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut s = vec![0usize; out_shape.len()];
    for d in 0..out_shape.len() {
        if d < offset {
            continue;
        }
        let id = d - offset;
        if in_shape[id] == out_shape[d] {
            s[d] = in_strides[id];
        } else if in_shape[id] == 1 {
            s[d] = 0;
        } else {
            return None;
        }
    }
    Some(s)
}

/// Visit each contiguous last-dim row of `out_shape`, passing the row start
/// in the output buffer and the mapped base offset in the broadcast input.
fn for_each_row(out_shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = out_shape.len();
    let last = out_shape[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    let mut in_base = 0usize;
    for row in 0..outer {
        f(row * last, in_base);
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            in_base += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_base -= in_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_copy(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    let in_strides = strides_of(shape);
    let oshape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![0.0f32; data.len()];
    let mut idx = vec![0usize; nd];
    let mut in_off = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_off];
        for d in (0..nd).rev() {
            idx[d] += 1;
            in_off += perm_strides[d];
            if idx[d] < oshape[d] {
                break;
            }
            in_off -= perm_strides[d] * oshape[d];
            idx[d] = 0;
        }
    }
    out
}

// ── matmul kernels (all accumulate into their target slice) ──────────────

/// C += A B with A `m x p`, B `p x n`.
fn matmul2d(a: &[f32], b: &[f32], m: usize, p: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA += G B^T with G `m x n`, B `p x n`.
fn matmul2d_gbt(g: &[f32], b: &[f32], m: usize, n: usize, p: usize, out: &mut [f32]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, o) in orow.iter_mut().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            let mut acc = 0.0f32;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// dB += A^T G with A `m x p`, G `m x n`.
fn matmul2d_atg(a: &[f32], g: &[f32], m: usize, p: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            let orow = &mut out[k * n..(k + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::inference();
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]);
        let y = g.matmul(&i2, &x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_dot() {
        let mut g = Graph::inference();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![1, 1]);
        assert_eq!(y.item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::inference();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = g.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("inner dimensions"), "got: {msg}");
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2,2,3] @ [3,2] — rhs broadcast over the leading batch dim.
        let mut g = Graph::inference();
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 2]);
        // row [1,2,3] -> [1+3, 2+3]
        assert_eq!(y.to_vec()[0..2], [4.0, 5.0]);
        assert_eq!(y.to_vec()[4..6], [16.0, 17.0]);
        assert_eq!(y.to_vec()[6..8], [22.0, 23.0]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g = Graph::inference();
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let y = g.softmax(&x, 0).unwrap();
        for &v in y.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = t(&[2], &[1000.0, 0.0]);
        let y = g.softmax(&x, 0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_log_ratios() {
        let mut g = Graph::inference();
        let x = t(&[3], &[1f32.ln(), 2f32.ln(), 3f32.ln()]);
        let y = g.softmax(&x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::inference();
        let x = Tensor::randn(&[4, 5, 7], 2.0, &mut rng);
        for axis in 0..3 {
            let y = g.softmax(&x, axis).unwrap();
            let shape = y.shape();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let yd = y.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0;
                    for k in 0..len {
                        let v = yd[o * len * inner + k * inner + i];
                        assert!(v > 0.0);
                        s += v;
                    }
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::inference();
        let x = t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]);
        let gain = t(&[4], &[1.0; 4]);
        let bias = t(&[4], &[0.0; 4]);
        let y = g.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for &v in y.data().iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::inference();
        let x = t(&[1, 2], &[1.0, -1.0]);
        let gain = t(&[2], &[1.0, 1.0]);
        let bias = t(&[2], &[0.0, 0.0]);
        let y = g.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4);
        assert!((y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[2, v]);
        for eps in [0.0f32, 0.1, 0.4] {
            let loss = g
                .cross_entropy_ls(&logits, &[3, 5], eps, crate::vocab::PAD)
                .unwrap();
            assert!((loss.item() - (v as f32).ln()).abs() < 1e-5, "eps={eps}");
        }
    }

    #[test]
    fn cross_entropy_peaked_goes_to_zero() {
        let mut g = Graph::inference();
        let mut data = vec![0.0f32; 5];
        data[2] = 50.0;
        let logits = t(&[1, 5], &data);
        let loss = g.cross_entropy_ls(&logits, &[2], 0.0, 0).unwrap();
        assert!(loss.item() < 1e-5);
    }

    #[test]
    fn cross_entropy_matches_bruteforce_smoothed() {
        // Independent summation oracle: -sum_c q_c * log softmax_c.
        let v = 5usize;
        let eps = 0.1f32;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[3, v], 1.5, &mut rng);
        // Class 0 is reserved for pad, so targets avoid it.
        let targets = [4u32, 1, 2];
        let ld = logits.to_vec();
        let mut want = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| ((x as f64) - max).exp()).sum();
            for (c, &x) in row.iter().enumerate() {
                let logp = (x as f64) - max - z.ln();
                let q = if c == t as usize {
                    (1.0 - eps) as f64
                } else {
                    (eps / (v as f32 - 1.0)) as f64
                };
                want -= q * logp;
            }
        }
        want /= targets.len() as f64;
        let mut g = Graph::inference();
        let loss = g.cross_entropy_ls(&logits, &targets, eps, 0).unwrap();
        assert!((loss.item() as f64 - want).abs() < 1e-6, "got {} want {want}", loss.item());
    }

    #[test]
    fn cross_entropy_all_pad_is_error() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[2, 4]);
        assert!(g.cross_entropy_ls(&logits, &[0, 0], 0.1, 0).is_err());
    }

    #[test]
    fn cross_entropy_excludes_pad_positions() {
        let mut g = Graph::inference();
        let logits = t(&[2, 3], &[0.0, 9.0, 0.0, 100.0, -100.0, 0.0]);
        // Second position is pad; loss must only see the first.
        let with_pad = g.cross_entropy_ls(&logits, &[1, 0], 0.0, 0).unwrap();
        let solo = g
            .cross_entropy_ls(&t(&[1, 3], &[0.0, 9.0, 0.0]), &[1], 0.0, 0)
            .unwrap();
        assert_eq!(with_pad.item(), solo.item());
    }

    #[test]
    fn transpose_and_permute_roundtrip() {
        let mut g = Graph::inference();
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = g.transpose_last2(&x).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
        let z = g.transpose_last2(&y).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let p = g.permute(&x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 5, 3]);
        let back = g.permute(&p, &[1, 3, 0, 2]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_last_splits_back() {
        let mut g = Graph::inference();
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[9., 8.]);
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.to_vec(), vec![1., 2., 9., 3., 4., 8.]);
    }

    #[test]
    fn embedding_lookup_bounds() {
        let mut g = Graph::inference();
        let table = t(&[3, 2], &[0., 0., 1., 1., 2., 2.]);
        let y = g.embedding_lookup(&table, &[2, 0], &[2]).unwrap();
        assert_eq!(y.to_vec(), vec![2., 2., 0., 0.]);
        assert!(g.embedding_lookup(&table, &[3], &[1]).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::recording();
        let x = Tensor::randn(&[100], 1.0, &mut rng);
        let y = g.dropout(&x, 0.0, true, &mut rng).unwrap();
        assert!(y.ptr_eq(&x));
        let y = g.dropout(&x, 0.5, false, &mut rng).unwrap();
        assert!(y.ptr_eq(&x));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::inference();
        let rate = 0.3f32;
        let n = 200_000usize;
        let x = Tensor::full(&[n], 1.0);
        let y = g.dropout(&x, rate, true, &mut rng).unwrap();
        let yd = y.data();
        let zeroed = yd.iter().filter(|&&v| v == 0.0).count();
        let frac = zeroed as f32 / n as f32;
        assert!((frac - rate).abs() < 0.02, "zeroed fraction {frac}");
        let survivor_scale = 1.0 / (1.0 - rate);
        for &v in yd.iter() {
            assert!(v == 0.0 || (v - survivor_scale).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_determinism_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let mut g = Graph::recording();
            let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[6, 3], 0.5, &mut rng);
            let h = g.matmul(&x, &w).unwrap();
            let h = g.relu(&h);
            let h = g.dropout(&h, 0.2, true, &mut rng).unwrap();
            let s = g.softmax(&h, 1).unwrap();
            s.to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds must give bit-identical outputs");
    }

    #[test]
    fn finite_outputs_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::inference();
        let x = Tensor::randn(&[8, 8], 30.0, &mut rng);
        let w = Tensor::randn(&[8, 8], 30.0, &mut rng);
        let y = g.matmul(&x, &w).unwrap();
        assert!(y.all_finite());
        let s = g.softmax(&y, 1).unwrap();
        assert!(s.all_finite());
        let gain = Tensor::full(&[8], 1.0);
        let bias = Tensor::zeros(&[8]);
        let l = g.layer_norm(&y, &gain, &bias, 1e-5).unwrap();
        assert!(l.all_finite());
    }
}
