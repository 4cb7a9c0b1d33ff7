use crate::hashing::derive_seed;

/// Fixed token context length of the text encoder.
pub const CONTEXT_LENGTH: usize = 77;
/// Vocabulary size of the hashed vocabulary; id 0 is padding.
pub const VOCAB_SIZE: u32 = 49_408;
pub const PAD_ID: u32 = 0;

/// Whitespace tokenizer over a seeded hash vocabulary.
///
/// Only the shape and determinism of the token grid matter: embeddings come
/// from the text-encoder backend, not from these ids.
#[derive(Clone, Copy, Debug)]
pub struct Tokenizer {
    seed: u64,
}

impl Tokenizer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn token_id(&self, word: &str) -> u32 {
        let h = derive_seed(&[&self.seed.to_le_bytes(), word.as_bytes()]);
        1 + (h % u64::from(VOCAB_SIZE - 1)) as u32
    }

    /// Padded with [`PAD_ID`] or truncated to [`CONTEXT_LENGTH`].
    pub fn tokenize(&self, text: &str) -> [u32; CONTEXT_LENGTH] {
        let mut out = [PAD_ID; CONTEXT_LENGTH];
        for (slot, word) in out.iter_mut().zip(text.split_whitespace()) {
            *slot = self.token_id(&word.to_lowercase());
        }
        out
    }
}
