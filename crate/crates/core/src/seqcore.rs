//! Strings, token sequences and corpora, with the two reversal operators.
//!
//! Reversal works on Unicode scalar values. Grapheme clusters are not kept
//! together, so text with combining marks may render oddly once reversed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Reverses `s` scalar value by scalar value.
pub fn reverse_string(s: &str) -> String {
    s.chars().rev().collect()
}

/// An ordered sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "]")
    }
}

pub fn reverse_tokens(z: &TokenSeq) -> TokenSeq {
    TokenSeq(z.0.iter().rev().copied().collect())
}

/// A finite multiset of documents.
///
/// Documents keep their insertion order, which is the canonical order for
/// every corpus-level reduction. Duplicates are separate entries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    docs: Vec<String>,
}

impl Corpus {
    pub fn new<I, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Corpus {
            docs: docs.into_iter().map(Into::into).collect(),
        }
    }

    /// Parses one document per line. Blank lines are kept as empty documents.
    pub fn from_text(text: &str) -> Self {
        Corpus::new(text.lines())
    }

    /// Inverse of [`Corpus::from_text`] for documents without newlines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for doc in &self.docs {
            out.push_str(doc);
            out.push('\n');
        }
        out
    }

    pub fn docs(&self) -> &[String] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(String::as_str)
    }

    /// Count per distinct document.
    pub fn multiplicities(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for doc in &self.docs {
            *out.entry(doc.as_str()).or_insert(0) += 1;
        }
        out
    }

    /// Sorted set of scalar values appearing anywhere in the corpus.
    pub fn alphabet(&self) -> Vec<char> {
        let mut chars: Vec<char> = self.docs.iter().flat_map(|d| d.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        chars
    }

    pub fn total_chars(&self) -> usize {
        self.docs.iter().map(|d| d.chars().count()).sum()
    }
}

/// Reverses every document, keeping multiplicities and order.
pub fn reverse_corpus(d: &Corpus) -> Corpus {
    Corpus {
        docs: d.docs.iter().map(|s| reverse_string(s)).collect(),
    }
}
