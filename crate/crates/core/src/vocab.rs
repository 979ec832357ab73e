//! Reserved token ids shared by every vocabulary in the workbench.
//!
//! Token sequences are plain `Vec<u32>` over `0..vocab_size`; the first
//! three ids are reserved and real symbols start at [`FIRST_REAL`].

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
/// First non-reserved token id.
pub const FIRST_REAL: u32 = 3;

/// Number of reserved ids at the bottom of every vocabulary.
pub const NUM_SPECIAL: usize = 3;

pub fn is_special(id: u32) -> bool {
    id < FIRST_REAL
}
