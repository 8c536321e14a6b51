use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Referring expressions longer than this are truncated.
pub const DEFAULT_MAX_LEN: usize = 20;

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut v = Vocab::empty();
        for w in words {
            v.push(w);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn empty() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.push(PAD_TOKEN.to_string());
        v.push(UNK_TOKEN.to_string());
        v
    }

    /// Builds a vocabulary from `(token, id)` pairs; ids must be dense.
    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|&(_, id)| id);
        let mut v = Vocab::empty();
        for (tok, id) in sorted {
            if id != v.len() {
                return Err(Error::Config(format!(
                    "vocab ids must be dense from 2; `{tok}` has id {id}"
                )));
            }
            v.push(tok.to_string());
        }
        Ok(v)
    }

    fn push(&mut self, token: String) {
        if !self.ids.contains_key(&token) {
            self.ids.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases and splits on whitespace and punctuation (punctuation is dropped).
pub fn split_words(expression: &str) -> Vec<String> {
    expression
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ids of `expression`, truncated to `max_len`. Never pads.
pub fn tokenize(expression: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let words = split_words(expression);
    if words.is_empty() {
        return Err(Error::Contract(format!(
            "expression {expression:?} has no tokens"
        )));
    }
    Ok(words.iter().take(max_len).map(|w| vocab.id(w)).collect())
}

/// Tokens with at least `min_count` occurrences, ordered by descending
/// frequency and then lexicographically, after the reserved ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Contract("build_vocab on an empty corpus".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for expr in corpus {
        for w in split_words(expr.as_ref()) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(ref w, c)| c >= min_count && w != PAD_TOKEN && w != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut v = Vocab::empty();
    for (w, _) in ranked {
        v.push(w);
    }
    Ok(v)
}

/// Reads a plain-text embedding file (`token f1 … fE` per line) and copies
/// the vectors of tokens present in `vocab` into `table` (`V×E`). Returns the
/// number of rows written.
pub fn load_embeddings(path: &Path, vocab: &Vocab, table: &mut Tensor) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = table.shape()[1];
    let mut written = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Load {
                record: format!("{}:{}", path.display(), lineno + 1),
                reason: format!("bad float: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Load {
                record: format!("{}:{}", path.display(), lineno + 1),
                reason: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(&id) = vocab.ids.get(token) {
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            written += 1;
        }
    }
    Ok(written)
}
