//! Tokenization and the shared vocabulary.
//!
//! Tokens are lowercase words: text is lowercased, every character that is
//! not alphanumeric or an apostrophe becomes a separator, and the result
//! is split on whitespace. The first five ids are reserved for control
//! tokens; everything else is assigned in first-seen order, which makes
//! vocabulary construction deterministic for a fixed corpus order.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Padding (unused positions).
pub const PAD: usize = 0;
/// Start of a generated sequence.
pub const BOS: usize = 1;
/// End of a generated sequence.
pub const EOS: usize = 2;
/// Field separator inside composed prompts.
pub const SEP: usize = 3;
/// Out-of-vocabulary words.
pub const UNK: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Split text into lowercase word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Token/id mapping with five reserved control ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Build from an iterator of texts, assigning ids in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::with_reserved();
        for text in texts {
            for tok in tokenize(text) {
                vocab.intern(tok);
            }
        }
        vocab
    }

    fn intern(&mut self, token: String) -> usize {
        if let Some(id) = self.index.get(&token) {
            return *id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Restore from an id-ordered token list (as stored in a model file).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens
                .iter()
                .take(RESERVED.len())
                .zip(RESERVED.iter())
                .any(|(a, b)| a != b)
        {
            return Err(Error::Data(
                "vocabulary does not start with the reserved control tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    /// Encode text to ids, mapping unknown words to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Decode ids back to a space-joined string, skipping control tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|id| **id >= RESERVED.len())
            .map(|id| self.token(*id))
            .collect();
        words.join(" ")
    }
}
