//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by pad/bos/eos.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]. Special ids carry no bytes and are skipped;
/// anything outside the vocabulary is an input error.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else if id >= VOCAB_SIZE {
            return Err(Error::input(format!("token id {id} out of vocab {VOCAB_SIZE}")));
        }
    }
    Ok(out)
}
