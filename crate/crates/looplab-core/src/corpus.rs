//! Byte-level tokenization and corpus handling.
//!
//! The vocabulary is the 256 byte values plus BOS/EOS/PAD (V = 259).
//! Encoding is the identity map from bytes to ids, so round-trips are exact
//! for arbitrary byte strings.

use thiserror::Error;

pub const VOCAB_SIZE: usize = 259;
pub const BOS: u16 = 256;
pub const EOS: u16 = 257;
pub const PAD: u16 = 258;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("token id {0} is not a byte value and cannot be decoded")]
    NotAByte(u16),
    #[error("corpus too small: {have} tokens, need at least {need}")]
    TooSmall { have: usize, need: usize },
}

pub fn encode(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| b as u16).collect()
}

pub fn decode(ids: &[u16]) -> Result<Vec<u8>, CorpusError> {
    ids.iter()
        .map(|&id| if id < 256 { Ok(id as u8) } else { Err(CorpusError::NotAByte(id)) })
        .collect()
}

/// A token stream with document boundaries. Each document is delimited by
/// BOS ... EOS in the stream.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<u16>,
    doc_starts: Vec<usize>,
}

impl Corpus {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Self {
        let mut tokens = Vec::new();
        let mut doc_starts = Vec::with_capacity(docs.len());
        for d in docs {
            doc_starts.push(tokens.len());
            tokens.push(BOS);
            tokens.extend(encode(d.as_ref()));
            tokens.push(EOS);
        }
        Self { tokens, doc_starts }
    }

    pub fn from_bytes(text: &[u8]) -> Self {
        Self::from_documents(&[text])
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn doc_starts(&self) -> &[usize] {
        &self.doc_starts
    }

    /// Splits into train and validation views at a token boundary.
    pub fn split(&self, val_fraction: f64) -> (CorpusView<'_>, CorpusView<'_>) {
        let val_len = ((self.tokens.len() as f64) * val_fraction).round() as usize;
        let cut = self.tokens.len().saturating_sub(val_len.max(1));
        (CorpusView { tokens: &self.tokens[..cut] }, CorpusView { tokens: &self.tokens[cut..] })
    }

    pub fn view(&self) -> CorpusView<'_> {
        CorpusView { tokens: &self.tokens }
    }
}

/// Borrowed window of a corpus token stream.
#[derive(Debug, Clone, Copy)]
pub struct CorpusView<'a> {
    pub tokens: &'a [u16],
}

impl CorpusView<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// A (input, target) window of `seq_len` steps starting at `start`;
    /// targets are the inputs shifted by one.
    pub fn window(&self, start: usize, seq_len: usize) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
        let need = seq_len + 1;
        if start + need > self.tokens.len() {
            return Err(CorpusError::TooSmall { have: self.tokens.len(), need: start + need });
        }
        let input = self.tokens[start..start + seq_len].iter().map(|&t| t as usize).collect();
        let target = self.tokens[start + 1..start + need].iter().map(|&t| t as usize).collect();
        Ok((input, target))
    }

    /// Number of distinct window start positions for a given length.
    pub fn window_starts(&self, seq_len: usize) -> usize {
        self.tokens.len().saturating_sub(seq_len + 1) + usize::from(self.tokens.len() > seq_len)
    }
}
