//! Tokenization, vocabulary and padded batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::StoryExample;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

fn is_split_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"' | '(' | ')')
}

/// Whitespace split with punctuation broken out as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_split_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary, ties broken lexicographically. Tokens
    /// spelled like a special symbol are never admitted.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, skipping PAD/BOS and stopping at the
    /// first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(
                    self.token(id)
                        .ok_or_else(|| Error::Data(format!("token id {id} out of range {}", self.len())))?,
                ),
            }
        }
        Ok(words.join(" "))
    }

    /// `{token: id}` in id order.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        for (i, t) in self.tokens.iter().enumerate() {
            let key = serde_json::to_string(t).expect("string serializes");
            s.push_str(&format!("  {key}: {i}"));
            s.push_str(if i + 1 < self.tokens.len() { ",\n" } else { "\n" });
        }
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("vocabulary id {i} is not dense")))?;
            *slot = t;
        }
        if tokens.iter().take(SPECIALS.len()).ne(SPECIALS.iter()) {
            return Err(Error::Data("vocabulary does not start with the reserved specials".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Context sentences joined by SEP, for the encoder.
    pub fn encode_context<S: AsRef<str>>(&self, context: &[S]) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, s) in context.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(self.encode(s.as_ref()));
        }
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    /// `BOS text EOS`, the decoder-side sequence.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    pub fn encode_story(&self, ex: &StoryExample) -> (Vec<usize>, Vec<usize>) {
        (self.encode_context(&ex.context), self.encode_target(&ex.ending))
    }
}

/// Row-major padded ids with a real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub max_len: usize,
}

impl Batch {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..(b + 1) * self.max_len]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_len..(b + 1) * self.max_len]
    }
}

/// Pads (or truncates) every sequence to exactly `max_len`. Truncation keeps
/// a trailing EOS in the last slot when the original ended with one.
pub fn pad_batch(sequences: &[Vec<usize>], max_len: usize) -> Batch {
    assert!(max_len >= 1);
    let mut ids = vec![PAD; sequences.len() * max_len];
    let mut mask = vec![false; sequences.len() * max_len];
    let mut lengths = Vec::with_capacity(sequences.len());
    for (b, seq) in sequences.iter().enumerate() {
        assert!(!seq.is_empty(), "empty sequence in batch");
        let n = seq.len().min(max_len);
        let row = &mut ids[b * max_len..b * max_len + n];
        row.copy_from_slice(&seq[..n]);
        if seq.len() > max_len && seq.last() == Some(&EOS) {
            row[n - 1] = EOS;
        }
        for m in &mut mask[b * max_len..b * max_len + n] {
            *m = true;
        }
        lengths.push(n);
    }
    Batch {
        ids,
        mask,
        lengths,
        batch: sequences.len(),
        max_len,
    }
}

/// Pads to the longest sequence, capped at `cap`.
pub fn pad_tight(sequences: &[Vec<usize>], cap: usize) -> Batch {
    let longest = sequences.iter().map(Vec::len).max().unwrap_or(1);
    pad_batch(sequences, longest.min(cap).max(1))
}
