//! Corpus-derived vocabulary and sentence-pair encoding into the model input
//! layout `[CLS] + sentence 1 + [SEP] + sentence 2 + [SEP]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: usize = 4;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_size must be at least {RESERVED}, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase and split on whitespace and punctuation boundaries; punctuation
/// marks become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from corpus texts, keeping the `max_size - 4` most frequent
    /// tokens; ties break lexicographically.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED {
            return Err(VocabError::MaxSizeTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_text = false;
        for text in texts {
            saw_text = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token: Vec<String> = vec![
            "[PAD]".to_string(),
            "[CLS]".to_string(),
            "[SEP]".to_string(),
            "[UNK]".to_string(),
        ];
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let id = id_to_token.len() as u32;
            token_to_id.insert(tok.clone(), id);
            id_to_token.push(tok);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Map ids back to token strings (specials included, pads skipped).
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| self.token_of(id).to_string())
            .collect()
    }

    /// One token per line; line number equals id minus the reserved block.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let body = self.id_to_token[RESERVED..].join("\n");
        fs::write(path, if body.is_empty() { body } else { body + "\n" })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let content = fs::read_to_string(path)?;
        Ok(Self::from_tokens(
            content.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl EncodedPair {
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Encode a sentence pair with longest-first truncation and padding to
/// `max_len`. An empty second sentence degenerates to `[CLS] s1 [SEP]`.
pub fn encode_pair(vocab: &Vocabulary, s1: &str, s2: &str, max_len: usize) -> EncodedPair {
    assert!(max_len >= 8, "max_len must be at least 8");
    let mut toks1 = tokenize(s1);
    let mut toks2 = tokenize(s2);
    let specials = if toks2.is_empty() { 2 } else { 3 };
    while toks1.len() + toks2.len() + specials > max_len {
        if toks1.len() >= toks2.len() {
            toks1.pop();
        } else {
            toks2.pop();
        }
    }

    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS_ID);
    segment_ids.push(0);
    for tok in &toks1 {
        token_ids.push(vocab.id_of(tok));
        segment_ids.push(0);
    }
    token_ids.push(SEP_ID);
    segment_ids.push(0);
    if !toks2.is_empty() {
        for tok in &toks2 {
            token_ids.push(vocab.id_of(tok));
            segment_ids.push(1);
        }
        token_ids.push(SEP_ID);
        segment_ids.push(1);
    }

    let real = token_ids.len();
    let mut attention_mask = vec![1u8; real];
    token_ids.resize(max_len, PAD_ID);
    segment_ids.resize(max_len, 0);
    attention_mask.resize(max_len, 0);
    EncodedPair {
        token_ids,
        segment_ids,
        attention_mask,
    }
}
