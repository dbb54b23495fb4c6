use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNKNOWN_ID: u32 = 0;
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token to id map. Id 0 is reserved for tokens outside the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keep the `max_size - 1` most frequent tokens plus the unknown id.
    /// Frequency ties go to the token seen first.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 2 {
            return Err(Error::config(format!("vocabulary max_size must be >= 2, got {max_size}")));
        }
        // token -> (count, first position)
        let mut stats: HashMap<String, (u64, usize)> = HashMap::new();
        let mut seen = 0usize;
        for tok in corpus {
            let tok = tok.as_ref();
            if tok == UNKNOWN_TOKEN {
                continue;
            }
            let entry = stats.entry(tok.to_string()).or_insert((0, seen));
            entry.0 += 1;
            seen += 1;
        }
        if stats.is_empty() {
            return Err(Error::EmptyInput("vocabulary corpus has no tokens".into()));
        }
        let mut ranked: Vec<(String, u64, usize)> =
            stats.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 1);

        let mut tokens = Vec::with_capacity(ranked.len() + 1);
        tokens.push(UNKNOWN_TOKEN.to_string());
        tokens.extend(ranked.into_iter().map(|(t, _, _)| t));
        Ok(Vocabulary::from_tokens(tokens))
    }

    /// Whitespace-tokenized, lowercased lines.
    pub fn build_from_text<I, S>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let toks: Vec<String> = lines.into_iter().flat_map(|l| tokenize(l.as_ref())).collect();
        Vocabulary::build(toks, max_size)
    }

    /// Rebuild from an id-ordered token list whose first entry is the unknown token.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert!(!tokens.is_empty(), "vocabulary needs the unknown token");
        let index = tokens
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::data("vocabulary file must start with the unknown token"));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercase, look up, and keep the first `max_words` ids.
pub fn encode_behavior_text(text: &str, vocab: &Vocabulary, max_words: usize) -> Vec<u32> {
    text.split_whitespace()
        .take(max_words)
        .map(|w| vocab.id(&w.to_lowercase()))
        .collect()
}

/// Pre-tokenized input: tokens are looked up as given.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_words: usize) -> Vec<u32> {
    tokens.iter().take(max_words).map(|t| vocab.id(t.as_ref())).collect()
}
