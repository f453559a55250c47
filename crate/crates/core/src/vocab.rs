//! `vocab.json`: a flat object mapping token strings to ids; id 0 is the
//! padding/unknown token.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN_ID: u32 = 0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    tokens: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = BTreeMap::new();
        tokens.insert("<unk>".to_string(), UNKNOWN_ID);
        let mut next = 1;
        for w in words {
            let w = w.into();
            if let std::collections::btree_map::Entry::Vacant(e) = tokens.entry(w) {
                e.insert(next);
                next += 1;
            }
        }
        Self { tokens }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vocab = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self).expect("vocab serializes");
        crate::dataset::write_file(path, &text)
    }

    /// One past the largest id.
    pub fn size(&self) -> usize {
        self.tokens.values().max().map_or(1, |&m| m as usize + 1)
    }

    pub fn id(&self, word: &str) -> u32 {
        self.tokens.get(word).copied().unwrap_or(UNKNOWN_ID)
    }

    /// Lower-cases and splits on anything that is not alphanumeric.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_with_unknowns() {
        let v = Vocab::from_tokens(["dog", "park", "dog"]);
        assert_eq!(v.size(), 3);
        assert_eq!(v.tokenize("Dog in the PARK!"), vec![1, 0, 0, 2]);
        assert!(v.tokenize("  ").is_empty());
    }

    #[test]
    fn json_is_a_flat_map() {
        let v = Vocab::from_tokens(["a"]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"<unk>":0,"a":1}"#);
    }
}
