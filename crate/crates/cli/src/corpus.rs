//! Corpus loading and batching: byte-level tokenization, fixed-length
//! chunking, a contiguous 90/10 train/validation split, and per-domain
//! repetition factors to balance effective tokens.

use std::path::Path;

use anyhow::{bail, Context};
use sptx_core::tokenizer::{self, BOS};
use sptx_core::training::{LabeledDataset, LabeledSequence};
use sptx_core::Domain;

/// One domain's text with its token stream and split indices.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub domain: Domain,
    pub raw: Vec<u8>,
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
}

/// Fraction of chunks reserved for validation (contiguous tail split).
pub const VAL_FRACTION: f64 = 0.1;

impl Corpus {
    pub fn load(path: &Path, domain: Domain, context: usize) -> anyhow::Result<Self> {
        let raw = std::fs::read(path)
            .with_context(|| format!("reading corpus {}", path.display()))?;
        Self::from_bytes(raw, domain, context)
    }

    pub fn from_bytes(raw: Vec<u8>, domain: Domain, context: usize) -> anyhow::Result<Self> {
        let ids = tokenizer::tokenize(&raw);
        // Each chunk of `context` bytes becomes one sequence: inputs are
        // BOS + first context-1 bytes, targets are all context bytes.
        let chunks: Vec<&[usize]> =
            ids.chunks_exact(context).collect();
        if chunks.len() < 2 {
            bail!(
                "corpus too small: {} bytes yield {} chunks of {} tokens (need >= 2)",
                raw.len(),
                chunks.len(),
                context
            );
        }
        let sequences: Vec<LabeledSequence> = chunks
            .iter()
            .map(|chunk| {
                let mut tokens = Vec::with_capacity(context);
                tokens.push(BOS);
                tokens.extend_from_slice(&chunk[..context - 1]);
                LabeledSequence { tokens, targets: chunk.to_vec(), domain }
            })
            .collect();
        let n_val = ((sequences.len() as f64 * VAL_FRACTION).round() as usize)
            .clamp(1, sequences.len() - 1);
        let split = sequences.len() - n_val;
        let (train, val) = sequences.split_at(split);
        Ok(Corpus { domain, raw, train: train.to_vec(), val: val.to_vec() })
    }

    /// Training sequences repeated `factor` times (validation is never
    /// repeated).
    pub fn repeated_train(&self, factor: usize) -> Vec<LabeledSequence> {
        let mut out = Vec::with_capacity(self.train.len() * factor.max(1));
        for _ in 0..factor.max(1) {
            out.extend(self.train.iter().cloned());
        }
        out
    }
}

/// Combined two-domain dataset for superposition training: repeated train
/// streams concatenated (the trainer shuffles), validation unrepeated.
pub fn combined_dataset(
    a: &Corpus,
    b: &Corpus,
    repeat_a: usize,
    repeat_b: usize,
) -> LabeledDataset {
    let mut train = a.repeated_train(repeat_a);
    train.extend(b.repeated_train(repeat_b));
    let mut val = a.val.clone();
    val.extend(b.val.clone());
    LabeledDataset { train, val }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(n: usize) -> Vec<u8> {
        (0..n).map(|i| b'a' + (i % 23) as u8).collect()
    }

    #[test]
    fn split_is_contiguous_ninety_ten() {
        let corpus = Corpus::from_bytes(text(64 * 40), Domain::Base, 64).unwrap();
        assert_eq!(corpus.train.len(), 36);
        assert_eq!(corpus.val.len(), 4);
        // Contiguity: the first validation chunk continues where training
        // chunks ended.
        assert_eq!(corpus.train[35].targets[63], corpus.raw[36 * 64 - 1] as usize);
        assert_eq!(corpus.val[0].targets[0], corpus.raw[36 * 64] as usize);
    }

    #[test]
    fn sequences_round_trip_raw_bytes() {
        let raw = text(64 * 5);
        let corpus = Corpus::from_bytes(raw.clone(), Domain::Fine, 64).unwrap();
        let mut rebuilt = Vec::new();
        for seq in corpus.train.iter().chain(&corpus.val) {
            rebuilt.extend(tokenizer::detokenize(&seq.targets).unwrap());
        }
        assert_eq!(rebuilt, raw[..64 * 5]);
    }

    #[test]
    fn bos_prefix_and_shift() {
        let corpus = Corpus::from_bytes(text(64 * 3), Domain::Base, 64).unwrap();
        let seq = &corpus.train[0];
        assert_eq!(seq.tokens[0], BOS);
        assert_eq!(seq.tokens[1..], seq.targets[..63]);
        assert_eq!(seq.tokens.len(), 64);
        assert_eq!(seq.targets.len(), 64);
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        assert!(Corpus::from_bytes(text(64), Domain::Base, 64).is_err());
    }

    #[test]
    fn repetition_multiplies_train_only() {
        let a = Corpus::from_bytes(text(64 * 20), Domain::Base, 64).unwrap();
        let b = Corpus::from_bytes(text(64 * 10), Domain::Fine, 64).unwrap();
        let ds = combined_dataset(&a, &b, 1, 2);
        assert_eq!(ds.train.len(), a.train.len() + 2 * b.train.len());
        assert_eq!(ds.val.len(), a.val.len() + b.val.len());
    }
}
