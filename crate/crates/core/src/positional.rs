//! Positional information: fixed sinusoidal absolute embeddings, a learned
//! token-ID absolute table, and clipped relative positional embeddings for
//! attention logits.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Which absolute positional scheme a stack applies to its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    Sinusoidal,
    Learned,
    None,
}

/// One fixed sinusoidal embedding entry.
///
/// Even dims carry `sin(pos / 10000^(i/d_m))`, odd dims carry
/// `cos(pos / 10000^((i-1)/d_m))`, so dims (2t, 2t+1) pair at equal
/// wavelength.
pub fn sinusoidal_pe(pos: usize, i: usize, d_m: usize) -> f32 {
    debug_assert!(i < d_m);
    let exponent = if i % 2 == 0 { i } else { i - 1 } as f32 / d_m as f32;
    let angle = pos as f32 / 10000f32.powf(exponent);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Sinusoidal position table, cached and extended on demand. Stateless
/// with respect to training: identical values for identical (pos, i, d_m).
pub struct SinusoidalPe {
    d_m: usize,
    rows: RefCell<Vec<f32>>,
}

impl SinusoidalPe {
    pub fn new(d_m: usize) -> SinusoidalPe {
        SinusoidalPe {
            d_m,
            rows: RefCell::new(Vec::new()),
        }
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn max_precomputed(&self) -> usize {
        self.rows.borrow().len() / self.d_m
    }

    /// First `n` position rows as a no-grad `[n, d_m]` tensor.
    pub fn matrix(&self, n: usize) -> Tensor {
        {
            let mut rows = self.rows.borrow_mut();
            let have = rows.len() / self.d_m;
            for pos in have..n {
                for i in 0..self.d_m {
                    rows.push(sinusoidal_pe(pos, i, self.d_m));
                }
            }
        }
        let rows = self.rows.borrow();
        Tensor::from_vec(&[n, self.d_m], rows[..n * self.d_m].to_vec())
            .expect("sinusoidal matrix shape")
    }
}

/// Learned per-position embedding table. Lookups beyond `max_len` fail
/// loudly instead of extrapolating.
pub struct LearnedApe {
    table: Tensor,
    max_len: usize,
}

impl LearnedApe {
    pub fn new(max_len: usize, d_m: usize, rng: &mut impl Rng) -> LearnedApe {
        let table = Tensor::randn(&[max_len, d_m], 0.02, rng);
        table.set_requires_grad(true);
        LearnedApe { table, max_len }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// First `n` position rows, with gradient flowing into the table.
    pub fn rows(&self, g: &mut Graph, n: usize) -> Result<Tensor> {
        if n > self.max_len {
            return Err(Error::shape(format!(
                "position overflow: sequence length {n} exceeds learned table max_len {}",
                self.max_len
            )));
        }
        let ids: Vec<u32> = (0..n as u32).collect();
        g.embedding_lookup(&self.table, &ids, &[n])
    }
}

/// Clipped relative positional embeddings: `2k+1` trainable rows of head
/// dimension, one table per attention layer, shared across the heads of
/// that layer. Relative offset `j - i` selects row `clip(j-i, -k, k) + k`.
pub struct RpeTable {
    k: usize,
    w: Tensor,
    d_k: usize,
}

impl RpeTable {
    pub fn new(k: usize, d_k: usize, rng: &mut impl Rng) -> RpeTable {
        let w = Tensor::randn(&[2 * k + 1, d_k], 0.02, rng);
        w.set_requires_grad(true);
        RpeTable { k, w, d_k }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    /// Row index for a relative offset, always in `[0, 2k]`.
    pub fn row_index(&self, offset: isize) -> usize {
        let k = self.k as isize;
        (offset.clamp(-k, k) + k) as usize
    }

    /// Gather `[n_q, n_k, d_k]` of relative rows: entry (i, j) is the table
    /// row for offset `j - i`. Gradients accumulate back into shared rows.
    pub fn relative_rows(&self, g: &mut Graph, n_q: usize, n_k: usize) -> Result<Tensor> {
        if n_q == 0 || n_k == 0 {
            return Err(Error::shape("relative_rows requires n_q, n_k >= 1"));
        }
        let mut ids = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q as isize {
            for j in 0..n_k as isize {
                ids.push(self.row_index(j - i) as u32);
            }
        }
        g.embedding_lookup(&self.w, &ids, &[n_q, n_k])
    }
}

/// Add the absolute positional matrix for `pe` onto `x[b, n, d_m]`
/// (broadcast over the batch). `None` mode is the identity.
pub fn apply_ape(g: &mut Graph, x: &Tensor, pe: &PeState) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "apply_ape expects [b, n, d_m], got {shape:?}"
        )));
    }
    let n = shape[1];
    match pe {
        PeState::None => Ok(x.clone()),
        PeState::Sinusoidal(table) => {
            let m = table.matrix(n);
            g.add(x, &m)
        }
        PeState::Learned(table) => {
            let rows = table.rows(g, n)?;
            g.add(x, &rows)
        }
    }
}

/// Concrete positional state owned by an encoder or decoder stack.
pub enum PeState {
    None,
    Sinusoidal(SinusoidalPe),
    Learned(LearnedApe),
}

impl PeState {
    pub fn mode(&self) -> PeMode {
        match self {
            PeState::None => PeMode::None,
            PeState::Sinusoidal(_) => PeMode::Sinusoidal,
            PeState::Learned(_) => PeMode::Learned,
        }
    }
}
