//! Desk-scale sequence-transduction workbench.
//!
//! A self-contained transformer encoder-decoder with a hand-rolled
//! reverse-mode autodiff core, three positional-embedding schemes
//! (sinusoidal, learned token-ID, clipped relative), parallel scheduled
//! sampling for the decoder, beam-search decoding and character-error-rate
//! analysis with tail/internal deletion classification. Everything trains
//! and evaluates on synthetic frame-emission tasks in minutes on a laptop.
//!
//! Layering, bottom to top:
//!
//! * [`tensor`] — dense f32 tensors + tape-based reverse-mode autodiff
//! * [`positional`] — sinusoidal / learned absolute PE, clipped relative PE
//! * [`attention`] — scaled dot-product and multi-head attention, masks
//! * [`model`] — the full encoder-decoder assembly
//! * [`sampling`] — teacher-force schedule and decoder-input mixing
//! * [`decode`], [`align`] — greedy/beam search, Levenshtein/CER reporting
//! * [`workbench`] — task generators, training loop, presets, CLI plumbing

pub mod align;
pub mod attention;
pub mod decode;
pub mod error;
pub mod model;
pub mod positional;
pub mod sampling;
pub mod tensor;
pub mod vocab;
pub mod workbench;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
