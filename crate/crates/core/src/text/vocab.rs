use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[M]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Lower-cased word/punctuation tokens. Runs of alphanumerics form one
/// token; every other non-space character is a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Frequency-ranked word vocabulary with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keep the `size - 5` most frequent tokens of `texts`; ties are broken
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Self> {
        if size <= NUM_SPECIAL {
            return Err(Error::Usage(format!("vocabulary size must be at least {}, got {size}", NUM_SPECIAL + 1)));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut seen_text = false;
        for text in texts {
            seen_text = true;
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_text {
            return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> =
            counts.into_iter().filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(size - NUM_SPECIAL);
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary from an id-ordered token list whose first entries are the
    /// special tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() <= NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        if tokens.len() > u32::MAX as usize {
            return Err(Error::Format("vocabulary too large".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect::<Vec<_>>().join(" ")
    }

    /// `[CLS] tokens`, truncated to `max_len` positions.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(self.tokenize(text).into_iter().take(max_len.saturating_sub(1)));
        ids
    }

    /// `[CLS] a [SEP] b [SEP]`, trimming the longer side until it fits.
    pub fn encode_pair(&self, a: &str, b: &str, max_len: usize) -> Vec<u32> {
        let mut a = self.tokenize(a);
        let mut b = self.tokenize(b);
        let budget = max_len.saturating_sub(3);
        while a.len() + b.len() > budget {
            if a.len() > b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
        ids.push(CLS);
        ids.extend(a);
        ids.push(SEP);
        ids.extend(b);
        ids.push(SEP);
        ids
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}
