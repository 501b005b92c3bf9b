use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Whitespace word-level tokenizer. Special tokens occupy ids 0..4; every
/// sequence is wrapped as `[CLS] w.. [SEP]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    lowercase: bool,
    tokens: Vec<String>,
}

impl From<TokenizerFile> for Tokenizer {
    fn from(f: TokenizerFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens: f.tokens,
            index,
            lowercase: f.lowercase,
        }
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        Self {
            lowercase: t.lowercase,
            tokens: t.tokens,
        }
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.lowercase == other.lowercase
    }
}

impl Tokenizer {
    /// Builds a vocabulary from whitespace-split `texts`, in first-seen order.
    pub fn from_corpus<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        lowercase: bool,
    ) -> Result<Self> {
        let mut words = Vec::new();
        for text in texts {
            words.extend(text.split_whitespace().map(str::to_string));
        }
        if words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::from_tokens(words, lowercase))
    }

    /// Builds a vocabulary from an explicit token list. Duplicates and special tokens are skipped.
    pub fn from_tokens<S: AsRef<str>>(
        tokens: impl IntoIterator<Item = S>,
        lowercase: bool,
    ) -> Self {
        let mut tok = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            lowercase,
        };
        for s in SPECIAL_TOKENS {
            tok.insert(s.to_string());
        }
        for t in tokens {
            let t = tok.normalize(t.as_ref());
            tok.insert(t);
        }
        tok
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    fn normalize(&self, word: &str) -> String {
        if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(&self.normalize(word))
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// `[CLS] ids.. [SEP]`; unseen words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_words(text.split_whitespace(), usize::MAX)
    }

    /// Like [`encode`](Self::encode) but keeps at most `max_len` ids, `[SEP]` always last.
    pub fn encode_truncated(&self, text: &str, max_len: usize) -> Vec<usize> {
        self.encode_words(text.split_whitespace(), max_len)
    }

    pub fn encode_words<'a>(
        &self,
        words: impl IntoIterator<Item = &'a str>,
        max_len: usize,
    ) -> Vec<usize> {
        let body = max_len.max(2) - 2;
        let mut ids = vec![CLS_ID];
        ids.extend(words.into_iter().take(body).map(|w| self.id(w)));
        ids.push(SEP_ID);
        ids
    }

    /// Hex SHA-256 over the ordered token list (length-prefixed) and casing policy.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.lowercase as u8]);
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
