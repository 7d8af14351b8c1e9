use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::SpanDataset;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token to embedding-row mapping. Rows 0 and 1 are reserved for padding
/// and unknown tokens; the rest follow first appearance in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    lowercase: bool,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    lowercase: bool,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens, r.lowercase)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            lowercase: v.lowercase,
        }
    }
}

impl Vocab {
    pub fn build(dataset: &SpanDataset, lowercase: bool) -> Self {
        let mut v = Vocab {
            tokens: vec!["<pad>".to_string(), "<unk>".to_string()],
            lowercase,
            index: HashMap::new(),
        };
        for s in &dataset.sentences {
            for t in &s.tokens {
                let key = v.normalize(t);
                if !v.index.contains_key(&key) {
                    v.index.insert(key.clone(), v.tokens.len());
                    v.tokens.push(key);
                }
            }
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Self {
        let mut v = Vocab {
            tokens,
            lowercase,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    fn normalize(&self, token: &str) -> String {
        if self.lowercase {
            token.to_lowercase()
        } else {
            token.to_string()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        if self.lowercase {
            self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
        } else {
            self.index.get(token).copied().unwrap_or(UNK)
        }
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
