//! The full encoder-decoder: input front-end FFN, a stack of
//! self-attention + FFN encoder blocks, a stack of self-attention +
//! source-attention + FFN decoder blocks, token embeddings and the output
//! projection. Sub-layer outputs follow dropout -> residual add -> layer
//! norm, in that order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha, AttentionMask, MhaLayer};
use crate::error::{Error, Result};
use crate::positional::{apply_ape, LearnedApe, PeMode, PeState, RpeTable, SinusoidalPe};
use crate::tensor::{Graph, Tensor};
use crate::vocab;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Complete architectural description of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub heads: usize,
    pub d_m: usize,
    pub d_ff: usize,
    /// Total vocabulary size including the reserved pad/sos/eos ids.
    /// Zero means "fill in from the task at build time".
    pub vocab_size: usize,
    /// Per-frame input feature dimension. Zero means "fill in from the
    /// task at build time".
    pub input_feature_dim: usize,
    /// Front FFN sizes `[hidden, out]`; `out` must equal `d_m`.
    pub frontend_dims: [usize; 2],
    pub enc_pe_mode: PeMode,
    pub dec_pe_mode: PeMode,
    /// Clipping distance for encoder self-attention relative embeddings.
    pub enc_rpe_k: Option<usize>,
    /// Clipping distance for decoder self-attention relative embeddings.
    /// Source attention never gets relative embeddings.
    pub dec_rpe_k: Option<usize>,
    pub dropout: f32,
    /// Max position for a learned encoder table; required with
    /// `enc_pe_mode = learned` and normally set to the longest training
    /// sequence.
    pub enc_learned_max_len: Option<usize>,
    pub dec_learned_max_len: Option<usize>,
    /// Multiply decoder token embeddings by sqrt(d_m) before adding
    /// absolute positions, keeping the two magnitudes comparable.
    pub scale_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: small extents, full structure.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            n_enc_blocks: 3,
            n_dec_blocks: 2,
            heads: 4,
            d_m: 64,
            d_ff: 128,
            vocab_size: 0,
            input_feature_dim: 0,
            frontend_dims: [128, 64],
            enc_pe_mode: PeMode::Sinusoidal,
            dec_pe_mode: PeMode::Sinusoidal,
            enc_rpe_k: None,
            dec_rpe_k: None,
            dropout: 0.1,
            enc_learned_max_len: None,
            dec_learned_max_len: None,
            scale_embedding: true,
        }
    }

    /// Full-scale configuration (constructible, not used by the tests).
    pub fn full_scale() -> ModelConfig {
        ModelConfig {
            n_enc_blocks: 5,
            n_dec_blocks: 3,
            heads: 16,
            d_m: 768,
            d_ff: 2048,
            frontend_dims: [2048, 768],
            ..ModelConfig::desk()
        }
    }

    /// Tiny model for gradient checks and oracle tests.
    pub fn micro(vocab_size: usize, input_feature_dim: usize) -> ModelConfig {
        ModelConfig {
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            heads: 2,
            d_m: 8,
            d_ff: 16,
            vocab_size,
            input_feature_dim,
            frontend_dims: [16, 8],
            dropout: 0.0,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(Error::config(format!(
                "d_m {} must be divisible by heads {}",
                self.d_m, self.heads
            )));
        }
        for (name, v) in [
            ("n_enc_blocks", self.n_enc_blocks),
            ("n_dec_blocks", self.n_dec_blocks),
            ("d_m", self.d_m),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("input_feature_dim", self.input_feature_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= vocab::NUM_SPECIAL {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room for real tokens beyond the {} reserved ids",
                self.vocab_size,
                vocab::NUM_SPECIAL
            )));
        }
        if self.frontend_dims[1] != self.d_m {
            return Err(Error::config(format!(
                "frontend output dim {} must equal d_m {}",
                self.frontend_dims[1], self.d_m
            )));
        }
        if self.frontend_dims[0] == 0 {
            return Err(Error::config("frontend hidden dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.enc_pe_mode == PeMode::Learned && self.enc_learned_max_len.is_none() {
            return Err(Error::config(
                "enc_pe_mode = learned requires enc_learned_max_len (longest training sequence)",
            ));
        }
        if self.dec_pe_mode == PeMode::Learned && self.dec_learned_max_len.is_none() {
            return Err(Error::config(
                "dec_pe_mode = learned requires dec_learned_max_len (longest training sequence)",
            ));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_m / self.heads
    }
}

/// Closed-form parameter count for a config.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d_m = cfg.d_m;
    let d_ff = cfg.d_ff;
    let d_k = cfg.d_k();
    let linear = |din: usize, dout: usize| din * dout + dout;
    let mha_params = 4 * linear(d_m, d_m);
    let norm = 2 * d_m;
    let ffn = linear(d_m, d_ff) + linear(d_ff, d_m);

    let mut total = 0usize;
    total += linear(cfg.input_feature_dim, cfg.frontend_dims[0]);
    total += linear(cfg.frontend_dims[0], d_m);
    total += cfg.n_enc_blocks * (mha_params + ffn + 2 * norm);
    total += cfg.n_dec_blocks * (2 * mha_params + ffn + 3 * norm);
    if let Some(k) = cfg.enc_rpe_k {
        total += cfg.n_enc_blocks * (2 * k + 1) * d_k;
    }
    if let Some(k) = cfg.dec_rpe_k {
        total += cfg.n_dec_blocks * (2 * k + 1) * d_k;
    }
    if cfg.enc_pe_mode == PeMode::Learned {
        total += cfg.enc_learned_max_len.unwrap_or(0) * d_m;
    }
    if cfg.dec_pe_mode == PeMode::Learned {
        total += cfg.dec_learned_max_len.unwrap_or(0) * d_m;
    }
    total += cfg.vocab_size * d_m; // token embedding
    total += linear(d_m, cfg.vocab_size); // output projection
    total
}

/// Everything a forward pass threads through the stacks.
pub struct FwdCtx<'a> {
    pub graph: &'a mut Graph,
    pub rng: &'a mut ChaCha8Rng,
    pub train: bool,
}

impl<'a> FwdCtx<'a> {
    pub fn new(graph: &'a mut Graph, rng: &'a mut ChaCha8Rng, train: bool) -> FwdCtx<'a> {
        FwdCtx { graph, rng, train }
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Linear {
        let w = Tensor::xavier(din, dout, rng);
        w.set_requires_grad(true);
        let b = Tensor::zeros(&[dout]);
        b.set_requires_grad(true);
        Linear { w, b }
    }

    fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let y = g.matmul(x, &self.w)?;
        g.add(&y, &self.b)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

struct Norm {
    gain: Tensor,
    bias: Tensor,
}

impl Norm {
    fn new(d: usize) -> Norm {
        let gain = Tensor::full(&[d], 1.0);
        gain.set_requires_grad(true);
        let bias = Tensor::zeros(&[d]);
        bias.set_requires_grad(true);
        Norm { gain, bias }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new(d_m: usize, d_ff: usize, rng: &mut impl Rng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(d_m, d_ff, rng),
            lin2: Linear::new(d_ff, d_m, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let h = self.lin1.forward(g, x)?;
        let h = g.relu(&h);
        self.lin2.forward(g, &h)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.lin1.named(&format!("{prefix}.lin1"), out);
        self.lin2.named(&format!("{prefix}.lin2"), out);
    }
}

struct EncoderBlock {
    self_attn: MhaLayer,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

struct DecoderBlock {
    self_attn: MhaLayer,
    norm1: Norm,
    src_attn: MhaLayer,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

/// A constructed model. Parameter count and layout are a deterministic
/// function of the config; construction draws from the supplied RNG in a
/// fixed order.
pub struct TransformerModel {
    cfg: ModelConfig,
    frontend1: Linear,
    frontend2: Linear,
    enc_pe: PeState,
    dec_pe: PeState,
    enc_blocks: Vec<EncoderBlock>,
    dec_blocks: Vec<DecoderBlock>,
    tok_embed: Tensor,
    out_proj: Linear,
    decoder_passes: AtomicU64,
}

impl TransformerModel {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<TransformerModel> {
        cfg.validate()?;
        let d_m = cfg.d_m;
        let frontend1 = Linear::new(cfg.input_feature_dim, cfg.frontend_dims[0], rng);
        let frontend2 = Linear::new(cfg.frontend_dims[0], d_m, rng);

        let enc_pe = match cfg.enc_pe_mode {
            PeMode::None => PeState::None,
            PeMode::Sinusoidal => PeState::Sinusoidal(SinusoidalPe::new(d_m)),
            PeMode::Learned => {
                PeState::Learned(LearnedApe::new(cfg.enc_learned_max_len.unwrap(), d_m, rng))
            }
        };
        let dec_pe = match cfg.dec_pe_mode {
            PeMode::None => PeState::None,
            PeMode::Sinusoidal => PeState::Sinusoidal(SinusoidalPe::new(d_m)),
            PeMode::Learned => {
                PeState::Learned(LearnedApe::new(cfg.dec_learned_max_len.unwrap(), d_m, rng))
            }
        };

        let mut enc_blocks = Vec::with_capacity(cfg.n_enc_blocks);
        for _ in 0..cfg.n_enc_blocks {
            let rpe = cfg.enc_rpe_k.map(|k| RpeTable::new(k, cfg.d_k(), rng));
            enc_blocks.push(EncoderBlock {
                self_attn: MhaLayer::new(d_m, cfg.heads, rpe, rng)?,
                norm1: Norm::new(d_m),
                ffn: FeedForward::new(d_m, cfg.d_ff, rng),
                norm2: Norm::new(d_m),
            });
        }
        let mut dec_blocks = Vec::with_capacity(cfg.n_dec_blocks);
        for _ in 0..cfg.n_dec_blocks {
            let rpe = cfg.dec_rpe_k.map(|k| RpeTable::new(k, cfg.d_k(), rng));
            dec_blocks.push(DecoderBlock {
                self_attn: MhaLayer::new(d_m, cfg.heads, rpe, rng)?,
                norm1: Norm::new(d_m),
                src_attn: MhaLayer::new(d_m, cfg.heads, None, rng)?,
                norm2: Norm::new(d_m),
                ffn: FeedForward::new(d_m, cfg.d_ff, rng),
                norm3: Norm::new(d_m),
            });
        }

        let tok_embed = Tensor::randn(&[cfg.vocab_size, d_m], 0.02, rng);
        tok_embed.set_requires_grad(true);
        let out_proj = Linear::new(d_m, cfg.vocab_size, rng);

        Ok(TransformerModel {
            cfg,
            frontend1,
            frontend2,
            enc_pe,
            dec_pe,
            enc_blocks,
            dec_blocks,
            tok_embed,
            out_proj,
            decoder_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// How many decoder forward passes have run since construction or the
    /// last reset. The parallel-sampling contract is asserted against this.
    pub fn decoder_passes(&self) -> u64 {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_passes(&self) {
        self.decoder_passes.store(0, Ordering::Relaxed);
    }

    /// Turn attention-weight capture on or off for every layer.
    pub fn set_attn_probe(&self, on: bool) {
        for b in &self.enc_blocks {
            b.self_attn.set_probe(on);
        }
        for b in &self.dec_blocks {
            b.self_attn.set_probe(on);
            b.src_attn.set_probe(on);
        }
    }

    /// Attention maps captured by the most recent forward passes, as
    /// `(layer name, shape, weights)`.
    pub fn probed_attention(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc_blocks.iter().enumerate() {
            if let Some((shape, data)) = b.self_attn.probed_weights() {
                out.push((format!("enc.{i}.self_attn"), shape, data));
            }
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            if let Some((shape, data)) = b.self_attn.probed_weights() {
                out.push((format!("dec.{i}.self_attn"), shape, data));
            }
            if let Some((shape, data)) = b.src_attn.probed_weights() {
                out.push((format!("dec.{i}.src_attn"), shape, data));
            }
        }
        out
    }

    /// All trainable tensors with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.frontend1.named("frontend.lin1", &mut out);
        self.frontend2.named("frontend.lin2", &mut out);
        if let PeState::Learned(ape) = &self.enc_pe {
            out.push(("enc_pe.table".to_string(), ape.table().clone()));
        }
        if let PeState::Learned(ape) = &self.dec_pe {
            out.push(("dec_pe.table".to_string(), ape.table().clone()));
        }
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.self_attn
                .named_params(&format!("enc.{i}.self_attn"), &mut out);
            b.norm1.named(&format!("enc.{i}.norm1"), &mut out);
            b.ffn.named(&format!("enc.{i}.ffn"), &mut out);
            b.norm2.named(&format!("enc.{i}.norm2"), &mut out);
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.self_attn
                .named_params(&format!("dec.{i}.self_attn"), &mut out);
            b.norm1.named(&format!("dec.{i}.norm1"), &mut out);
            b.src_attn
                .named_params(&format!("dec.{i}.src_attn"), &mut out);
            b.norm2.named(&format!("dec.{i}.norm2"), &mut out);
            b.ffn.named(&format!("dec.{i}.ffn"), &mut out);
            b.norm3.named(&format!("dec.{i}.norm3"), &mut out);
        }
        out.push(("embed.tok".to_string(), self.tok_embed.clone()));
        self.out_proj.named("out_proj", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn sublayer(
        &self,
        ctx: &mut FwdCtx,
        residual: &Tensor,
        y: &Tensor,
        norm: &Norm,
    ) -> Result<Tensor> {
        let y = ctx.graph.dropout(y, self.cfg.dropout, ctx.train, ctx.rng)?;
        let sum = ctx.graph.add(residual, &y)?;
        ctx.graph
            .layer_norm(&sum, &norm.gain, &norm.bias, LAYER_NORM_EPS)
    }

    /// Encode `[b, n, input_feature_dim]` frames into `[b, n, d_m]`.
    ///
    /// `frame_lens` gives the valid frame count per batch element; padding
    /// frames beyond it are masked out of every attention step.
    pub fn encode(
        &self,
        ctx: &mut FwdCtx,
        frames: &Tensor,
        frame_lens: &[usize],
    ) -> Result<Tensor> {
        let sh = frames.shape();
        if sh.len() != 3 || sh[2] != self.cfg.input_feature_dim {
            return Err(Error::shape(format!(
                "encode expects [b, n, {}] frames, got {sh:?}",
                self.cfg.input_feature_dim
            )));
        }
        let (b, n) = (sh[0], sh[1]);
        if frame_lens.len() != b {
            return Err(Error::shape(format!(
                "{} frame lengths for batch of {b}",
                frame_lens.len()
            )));
        }
        for (i, &len) in frame_lens.iter().enumerate() {
            if len == 0 {
                return Err(Error::data(format!(
                    "zero-length utterance at batch index {i}"
                )));
            }
            if len > n {
                return Err(Error::shape(format!(
                    "frame length {len} exceeds padded length {n} at batch index {i}"
                )));
            }
        }

        let g = &mut *ctx.graph;
        let h = self.frontend1.forward(g, frames)?;
        let h = g.relu(&h);
        let h = self.frontend2.forward(g, &h)?;
        let mut h = apply_ape(ctx.graph, &h, &self.enc_pe)?;

        let mask = AttentionMask::Padding {
            key_lens: frame_lens.to_vec(),
        };
        for block in &self.enc_blocks {
            let a = mha(ctx.graph, &block.self_attn, &h, &h, &mask)?;
            h = self.sublayer(ctx, &h, &a, &block.norm1)?;
            let f = block.ffn.forward(ctx.graph, &h)?;
            h = self.sublayer(ctx, &h, &f, &block.norm2)?;
        }
        Ok(h)
    }

    /// One parallel decoder pass: logits `[b, u, vocab]` for the whole
    /// input token grid at once. Position `t` depends only on
    /// `dec_input[..=t]` and the encoder output (causal self-attention).
    ///
    /// Every row must start with the SOS id; rows are padded to a common
    /// length by the caller.
    pub fn decode_step_parallel(
        &self,
        ctx: &mut FwdCtx,
        enc_out: &Tensor,
        frame_lens: &[usize],
        dec_input: &[Vec<u32>],
    ) -> Result<Tensor> {
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
        let esh = enc_out.shape();
        if esh.len() != 3 || esh[2] != self.cfg.d_m {
            return Err(Error::shape(format!(
                "decode expects encoder output [b, n, {}], got {esh:?}",
                self.cfg.d_m
            )));
        }
        let b = esh[0];
        if dec_input.len() != b || frame_lens.len() != b {
            return Err(Error::shape(format!(
                "decoder got {} rows / {} frame lengths for encoder batch {b}",
                dec_input.len(),
                frame_lens.len()
            )));
        }
        let u = dec_input[0].len();
        if u == 0 {
            return Err(Error::shape("decoder input rows must be non-empty"));
        }
        let mut flat = Vec::with_capacity(b * u);
        for (i, row) in dec_input.iter().enumerate() {
            if row.len() != u {
                return Err(Error::shape(format!(
                    "decoder input rows have unequal lengths ({} vs {u} at row {i})",
                    row.len()
                )));
            }
            if row[0] != vocab::SOS {
                return Err(Error::data(format!(
                    "decoder input row {i} does not start with SOS"
                )));
            }
            for &id in row {
                if id as usize >= self.cfg.vocab_size {
                    return Err(Error::data(format!(
                        "token id {id} out of range for vocab of {}",
                        self.cfg.vocab_size
                    )));
                }
                flat.push(id);
            }
        }

        let g = &mut *ctx.graph;
        let x = g.embedding_lookup(&self.tok_embed, &flat, &[b, u])?;
        let x = if self.cfg.scale_embedding {
            g.scale(&x, (self.cfg.d_m as f32).sqrt())
        } else {
            x
        };
        let mut h = apply_ape(ctx.graph, &x, &self.dec_pe)?;

        let self_mask = AttentionMask::Causal;
        let src_mask = AttentionMask::Padding {
            key_lens: frame_lens.to_vec(),
        };
        for block in &self.dec_blocks {
            let a = mha(ctx.graph, &block.self_attn, &h, &h, &self_mask)?;
            h = self.sublayer(ctx, &h, &a, &block.norm1)?;
            let s = mha(ctx.graph, &block.src_attn, &h, enc_out, &src_mask)?;
            h = self.sublayer(ctx, &h, &s, &block.norm2)?;
            let f = block.ffn.forward(ctx.graph, &h)?;
            h = self.sublayer(ctx, &h, &f, &block.norm3)?;
        }
        self.out_proj.forward(ctx.graph, &h)
    }
}
