//! Deterministic byte-pair-encoding over Unicode scalar values, and the
//! measurement of tokenizer stability under corpus reversal.
//!
//! Training merges the most frequent adjacent pair at every step. Ties go to
//! the lexicographically smallest `(left, right)` pair of token strings.
//! Training stops at the target vocabulary size or when no pair occurs at
//! least twice. There is no pre-tokenization and there are no special tokens:
//! whitespace is an ordinary symbol.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{reverse_string, reverse_tokens, Corpus, TokenSeq};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerFile", into = "TokenizerFile")]
pub struct BpeTokenizer {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: BTreeMap<String, u32>,
    char_ids: HashMap<char, u32>,
    // (left id, right id, merged id), same order as `merges`
    merge_ids: Vec<(u32, u32, u32)>,
}

/// On-disk layout of a tokenizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TokenizerFile {
    base_alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
}

impl From<BpeTokenizer> for TokenizerFile {
    fn from(t: BpeTokenizer) -> Self {
        TokenizerFile {
            base_alphabet: t.alphabet,
            merges: t.merges,
            vocab: t.vocab,
        }
    }
}

impl TryFrom<TokenizerFile> for BpeTokenizer {
    type Error = Error;

    fn try_from(file: TokenizerFile) -> Result<Self> {
        let mut alphabet = file.base_alphabet;
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut t = BpeTokenizer::character_level(&alphabet);
        for (l, r) in file.merges {
            if !t.vocab.contains_key(&l) || !t.vocab.contains_key(&r) {
                return Err(Error::Invalid(format!(
                    "merge ({l:?}, {r:?}) uses a token not defined earlier"
                )));
            }
            let (li, ri) = (t.vocab[&l], t.vocab[&r]);
            t.push_merge(li, ri);
        }
        if t.vocab != file.vocab {
            return Err(Error::Invalid(
                "vocab does not match the one implied by alphabet and merges".into(),
            ));
        }
        Ok(t)
    }
}

/// Diagnostics collected while training.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Merge steps at which more than one pair shared the top count.
    pub tie_steps: usize,
    /// Merge steps of a doubled pair `(x, x)` over a run of three or more
    /// `x`, where left-to-right application segments the run asymmetrically.
    pub overlap_steps: usize,
}

impl TrainStats {
    /// No step depended on tie-breaking or on the direction of application.
    pub fn is_unambiguous(&self) -> bool {
        self.tie_steps == 0 && self.overlap_steps == 0
    }
}

impl BpeTokenizer {
    /// Zero-merge tokenizer over a sorted alphabet. Ids follow alphabet order.
    pub fn character_level(alphabet: &[char]) -> Self {
        let mut alphabet = alphabet.to_vec();
        alphabet.sort_unstable();
        alphabet.dedup();
        let tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let char_ids = alphabet
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        BpeTokenizer {
            alphabet,
            merges: Vec::new(),
            tokens,
            vocab,
            char_ids,
            merge_ids: Vec::new(),
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let l = self.tokens[left as usize].clone();
        let r = self.tokens[right as usize].clone();
        let merged = format!("{l}{r}");
        let id = match self.vocab.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(merged.clone());
                self.vocab.insert(merged, id);
                id
            }
        };
        self.merges.push((l, r));
        self.merge_ids.push((left, right, id));
        id
    }

    pub fn base_alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &BTreeMap<String, u32> {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn encode(&self, s: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(s.len());
        for (offset, c) in s.chars().enumerate() {
            match self.char_ids.get(&c) {
                Some(&id) => ids.push(id),
                None => return Err(Error::OutOfAlphabet { symbol: c, offset }),
            }
        }
        for &(l, r, m) in &self.merge_ids {
            apply_merge(&mut ids, l, r, m);
        }
        Ok(TokenSeq(ids))
    }

    pub fn decode(&self, z: &TokenSeq) -> Result<String> {
        let mut out = String::new();
        for id in z.iter() {
            match self.token(id) {
                Some(t) => out.push_str(t),
                None => {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: self.vocab_size(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Token strings of an encoded sequence, for reports.
    pub fn token_strings(&self, z: &TokenSeq) -> Vec<String> {
        z.iter()
            .map(|id| self.token(id).unwrap_or("<?>").to_string())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Replaces non-overlapping `(l, r)` occurrences left to right.
fn apply_merge(ids: &mut Vec<u32>, l: u32, r: u32, merged: u32) {
    if ids.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

pub fn train_bpe(d: &Corpus, target_vocab: usize) -> Result<BpeTokenizer> {
    train_bpe_with_stats(d, target_vocab).map(|(t, _)| t)
}

pub fn train_bpe_with_stats(d: &Corpus, target_vocab: usize) -> Result<(BpeTokenizer, TrainStats)> {
    if d.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alphabet = d.alphabet();
    if target_vocab < alphabet.len() || target_vocab == 0 {
        return Err(Error::VocabTooSmall {
            target: target_vocab,
            alphabet: alphabet.len(),
        });
    }
    let mut t = BpeTokenizer::character_level(&alphabet);
    let mut stats = TrainStats::default();

    // distinct documents with their counts, in sorted order
    let mut words: Vec<(Vec<u32>, usize)> = d
        .multiplicities()
        .into_iter()
        .map(|(doc, n)| (doc.chars().map(|c| t.char_ids[&c]).collect(), n))
        .collect();

    while t.vocab_size() < target_vocab {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0], pair[1])).or_insert(0) += n;
            }
        }
        let Some(&top) = counts.values().max() else {
            break;
        };
        if top < 2 {
            break;
        }
        let mut best: Vec<(&str, &str, (u32, u32))> = counts
            .iter()
            .filter(|(_, &c)| c == top)
            .map(|(&(l, r), _)| {
                (
                    t.tokens[l as usize].as_str(),
                    t.tokens[r as usize].as_str(),
                    (l, r),
                )
            })
            .collect();
        best.sort_unstable();
        if best.len() > 1 {
            stats.tie_steps += 1;
        }
        let (l, r) = best[0].2;
        if l == r
            && words
                .iter()
                .any(|(w, _)| w.windows(3).any(|x| x.iter().all(|&id| id == l)))
        {
            stats.overlap_steps += 1;
        }
        let m = t.push_merge(l, r);
        for (w, _) in &mut words {
            apply_merge(w, l, r, m);
        }
    }
    Ok((t, stats))
}

/// Partial map between the vocabularies of two tokenizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabBijection {
    pub forward: BTreeMap<u32, u32>,
    pub inverse: BTreeMap<u32, u32>,
    pub coverage: f64,
    pub source_size: usize,
    pub target_size: usize,
}

impl VocabBijection {
    pub fn map(&self, id: u32) -> Option<u32> {
        self.forward.get(&id).copied()
    }

    pub fn map_seq(&self, z: &TokenSeq) -> Option<TokenSeq> {
        z.iter()
            .map(|id| self.map(id))
            .collect::<Option<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn is_total(&self) -> bool {
        self.forward.len() == self.source_size
    }

    /// Dense permutation when the map is a bijection between equal-size vocabularies.
    pub fn to_permutation(&self) -> Option<Vec<u32>> {
        if !self.is_total() || self.source_size != self.target_size {
            return None;
        }
        Some(
            (0..self.source_size as u32)
                .map(|i| self.forward[&i])
                .collect(),
        )
    }
}

/// Maps each forward token `u` to `reverse_string(u)` whenever the reverse
/// tokenizer has that string.
pub fn propose_reversal_bijection(t_fwd: &BpeTokenizer, t_rev: &BpeTokenizer) -> VocabBijection {
    let mut forward = BTreeMap::new();
    let mut inverse = BTreeMap::new();
    for (id, tok) in t_fwd.tokens.iter().enumerate() {
        if let Some(target) = t_rev.id(&reverse_string(tok)) {
            // string reversal is injective, so no collisions are possible
            forward.insert(id as u32, target);
            inverse.insert(target, id as u32);
        }
    }
    let source_size = t_fwd.vocab_size();
    let coverage = if source_size == 0 {
        1.0
    } else {
        forward.len() as f64 / source_size as f64
    };
    VocabBijection {
        forward,
        inverse,
        coverage,
        source_size,
        target_size: t_rev.vocab_size(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub doc_index: usize,
    pub doc: String,
    /// Tokens of `τ(s)` as strings.
    pub forward_tokens: Vec<String>,
    /// Tokens of `τ_T(T(s))` as strings.
    pub reverse_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub coverage: f64,
    pub seq_stable_fraction: f64,
    pub merge_agreement: f64,
    pub n_docs: usize,
    pub n_stable: usize,
    pub violating_examples: Vec<Violation>,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.n_stable == self.n_docs
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<22} {:>10.6}", "coverage", self.coverage);
        let _ = writeln!(
            s,
            "{:<22} {:>10.6}",
            "seq_stable_fraction", self.seq_stable_fraction
        );
        let _ = writeln!(
            s,
            "{:<22} {:>10.6}",
            "merge_agreement", self.merge_agreement
        );
        let _ = writeln!(s, "{:<22} {:>10}", "documents", self.n_docs);
        let _ = writeln!(s, "{:<22} {:>10}", "stable documents", self.n_stable);
        if !self.violating_examples.is_empty() {
            let _ = writeln!(s, "\nviolations:");
            for v in &self.violating_examples {
                let _ = writeln!(
                    s,
                    "  #{} {:?}\n    forward: {:?}\n    reverse: {:?}",
                    v.doc_index, v.doc, v.forward_tokens, v.reverse_tokens
                );
            }
        }
        s
    }
}

/// Fraction of forward merges `(l, r)` whose mirror `(rev r, rev l)` is also a
/// reverse-side merge. Vacuously 1 when there are no forward merges.
pub fn merge_agreement(t_fwd: &BpeTokenizer, t_rev: &BpeTokenizer) -> f64 {
    if t_fwd.merges.is_empty() {
        return 1.0;
    }
    let rev: BTreeSet<(&str, &str)> = t_rev
        .merges
        .iter()
        .map(|(l, r)| (l.as_str(), r.as_str()))
        .collect();
    let hits = t_fwd
        .merges
        .iter()
        .filter(|(l, r)| {
            let (ml, mr) = (reverse_string(r), reverse_string(l));
            rev.contains(&(ml.as_str(), mr.as_str()))
        })
        .count();
    hits as f64 / t_fwd.merges.len() as f64
}

/// Checks `τ_T(T(s)) == π(rev(τ(s)))` by literal sequence equality for every
/// document of `d`. `t_rev` is expected to be trained on the reversed corpus.
pub fn stability_report(
    t_fwd: &BpeTokenizer,
    t_rev: &BpeTokenizer,
    pi: &VocabBijection,
    d: &Corpus,
    max_violations: usize,
) -> Result<StabilityReport> {
    let mut n_stable = 0;
    let mut violating_examples = Vec::new();
    for (index, s) in d.iter().enumerate() {
        let z = t_fwd.encode(s).map_err(|e| e.in_document(index))?;
        let zt = t_rev
            .encode(&reverse_string(s))
            .map_err(|e| e.in_document(index))?;
        let stable = pi.map_seq(&reverse_tokens(&z)).is_some_and(|m| m == zt);
        if stable {
            n_stable += 1;
        } else if violating_examples.len() < max_violations {
            violating_examples.push(Violation {
                doc_index: index,
                doc: s.to_string(),
                forward_tokens: t_fwd.token_strings(&z),
                reverse_tokens: t_rev.token_strings(&zt),
            });
        }
    }
    let n_docs = d.len();
    Ok(StabilityReport {
        coverage: pi.coverage,
        seq_stable_fraction: if n_docs == 0 {
            1.0
        } else {
            n_stable as f64 / n_docs as f64
        },
        merge_agreement: merge_agreement(t_fwd, t_rev),
        n_docs,
        n_stable,
        violating_examples,
    })
}

/// Tokenizers for a corpus and its reversal, plus the string-reversal bijection.
#[derive(Clone, Debug)]
pub struct TokenizerPair {
    pub forward: BpeTokenizer,
    pub reverse: BpeTokenizer,
    pub bijection: VocabBijection,
}

impl TokenizerPair {
    pub fn train(d: &Corpus, target_vocab: usize) -> Result<Self> {
        let forward = train_bpe(d, target_vocab)?;
        let reverse = train_bpe(&crate::seqcore::reverse_corpus(d), target_vocab)?;
        let bijection = propose_reversal_bijection(&forward, &reverse);
        Ok(TokenizerPair {
            forward,
            reverse,
            bijection,
        })
    }

    pub fn character_level(d: &Corpus) -> Self {
        let alphabet = d.alphabet();
        let forward = BpeTokenizer::character_level(&alphabet);
        let reverse = forward.clone();
        let bijection = propose_reversal_bijection(&forward, &reverse);
        TokenizerPair {
            forward,
            reverse,
            bijection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::reverse_corpus;
    use proptest::prelude::*;

    fn merge(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    #[test]
    fn single_merge_on_run() {
        let t = train_bpe(&Corpus::new(["aaaa"]), 2).unwrap();
        assert_eq!(t.merges(), &[merge("a", "a")]);
        let z = t.encode("aaaa").unwrap();
        let aa = t.id("aa").unwrap();
        assert_eq!(z, TokenSeq(vec![aa, aa]));
    }

    #[test]
    fn no_merge_for_single_occurrence() {
        let t = train_bpe(&Corpus::new(["ab"]), 2).unwrap();
        assert!(t.merges().is_empty());
        let t = train_bpe(&Corpus::new(["ab"]), 10).unwrap();
        assert!(t.merges().is_empty());
    }

    #[test]
    fn target_equal_to_alphabet_is_character_level() {
        let d = Corpus::new(["hello world", "low lower"]);
        let t = train_bpe(&d, d.alphabet().len()).unwrap();
        assert!(t.merges().is_empty());
        assert_eq!(t, BpeTokenizer::character_level(&d.alphabet()));
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_bpe(&Corpus::default(), 4),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(&Corpus::new(["abc"]), 2),
            Err(Error::VocabTooSmall {
                target: 2,
                alphabet: 3
            })
        ));
    }

    #[test]
    fn encode_examples() {
        let t = BpeTokenizer::character_level(&['a', 'b', 'c']);
        assert_eq!(t.encode("abc").unwrap(), TokenSeq(vec![0, 1, 2]));
        assert_eq!(t.encode("").unwrap(), TokenSeq(vec![]));
        match t.encode("abxc") {
            Err(Error::OutOfAlphabet {
                symbol: 'x',
                offset: 2,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        // ("a","c") and ("b","a") both occur twice
        let (t, stats) = train_bpe_with_stats(&Corpus::new(["ac", "ac", "ba", "ba"]), 5).unwrap();
        assert_eq!(t.merges()[0], merge("a", "c"));
        assert!(stats.tie_steps >= 1);
    }

    #[test]
    fn odd_runs_are_flagged() {
        let (_, stats) = train_bpe_with_stats(&Corpus::new(["aaa", "aaa"]), 2).unwrap();
        assert_eq!(stats.overlap_steps, 1);
        assert!(!stats.is_unambiguous());
        let (_, stats) = train_bpe_with_stats(&Corpus::new(["abab", "abab"]), 3).unwrap();
        assert!(stats.is_unambiguous());
    }

    #[test]
    fn bijection_examples() {
        let t = BpeTokenizer::character_level(&['a', 'b']);
        let pi = propose_reversal_bijection(&t, &t);
        assert_eq!(pi.coverage, 1.0);
        assert_eq!(pi.map(0), Some(0));
        assert_eq!(pi.to_permutation(), Some(vec![0, 1]));

        let fwd = train_bpe(&Corpus::new(["abab"]), 3).unwrap();
        let rev = train_bpe(&Corpus::new(["baba"]), 3).unwrap();
        let pi = propose_reversal_bijection(&fwd, &rev);
        assert_eq!(pi.map(fwd.id("ab").unwrap()), rev.id("ba"));
        assert_eq!(pi.coverage, 1.0);

        let pi = propose_reversal_bijection(&fwd, &t);
        assert_eq!(pi.map(fwd.id("ab").unwrap()), None);
        assert!(pi.coverage < 1.0);
        assert!(pi.to_permutation().is_none());
    }

    #[test]
    fn mirror_merges_are_stable() {
        let d = Corpus::new(["abab abab"]);
        let fwd = train_bpe(&d, d.alphabet().len() + 1).unwrap();
        let rev = train_bpe(&reverse_corpus(&d), d.alphabet().len() + 1).unwrap();
        assert_eq!(fwd.merges(), &[merge("a", "b")]);
        assert_eq!(rev.merges(), &[merge("b", "a")]);
        let pi = propose_reversal_bijection(&fwd, &rev);
        let report = stability_report(&fwd, &rev, &pi, &d, 5).unwrap();
        assert_eq!(report.seq_stable_fraction, 1.0);
        assert_eq!(report.merge_agreement, 1.0);
    }

    #[test]
    fn tie_corpus_breaks_stability() {
        let d = Corpus::new(["ac", "ac", "ba", "ba"]);
        let pair = TokenizerPair::train(&d, d.alphabet().len() + 1).unwrap();
        let report =
            stability_report(&pair.forward, &pair.reverse, &pair.bijection, &d, 10).unwrap();
        assert!(report.seq_stable_fraction < 1.0);
        assert!(!report.violating_examples.is_empty());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let d = Corpus::new(["the quick brown fox", "the lazy dog", "the end"]);
        let t = train_bpe(&d, d.alphabet().len() + 6).unwrap();
        let back = BpeTokenizer::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"base_alphabet":["a"],"merges":[["a","b"]],"vocab":{"a":0}}"#;
        assert!(BpeTokenizer::from_json(bad).is_err());
    }

    proptest! {
        #[test]
        fn training_is_deterministic(docs in proptest::collection::vec("[a-e ]{1,12}", 1..8), extra in 0usize..10) {
            let d = Corpus::new(docs);
            let target = d.alphabet().len() + extra;
            prop_assert_eq!(train_bpe(&d, target).unwrap(), train_bpe(&d, target).unwrap());
        }

        #[test]
        fn decode_inverts_encode(docs in proptest::collection::vec("[a-e ]{1,12}", 1..8), extra in 0usize..10) {
            let d = Corpus::new(docs);
            let t = train_bpe(&d, d.alphabet().len() + extra).unwrap();
            for s in d.iter() {
                prop_assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
            }
            let ids: BTreeSet<u32> = t.vocab().values().copied().collect();
            prop_assert_eq!(ids, (0..t.vocab_size() as u32).collect::<BTreeSet<_>>());
        }

        #[test]
        fn character_level_pair_is_always_stable(docs in proptest::collection::vec("[a-f ]{0,12}", 1..8)) {
            let d = Corpus::new(docs);
            let pair = TokenizerPair::character_level(&d);
            let r = stability_report(&pair.forward, &pair.reverse, &pair.bijection, &d, 3).unwrap();
            prop_assert_eq!(r.seq_stable_fraction, 1.0);
        }
    }
}
