//! Byte-level tokenizer: ids `0..=255` are bytes, [`EOT`] marks end of text.

/// End-of-text id.
pub const EOT: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|b| u32::from(*b)).collect()
}

/// Inverse of [`tokenize`]; [`EOT`] and other non-byte ids are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|t| u8::try_from(*t).ok())
        .collect()
}
