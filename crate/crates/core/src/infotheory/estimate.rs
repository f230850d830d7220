//! Plug-in estimates of entropy rate and time-reversal divergence from text.
//!
//! An order-`n` model conditions each token on the previous `n - 1` tokens.
//! Conditionals are add-λ smoothed over the observed alphabet, so the lifted
//! chain on contexts is irreducible. The reversed model is built from the
//! same counts with every key reversed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::encode_corpus;
use crate::seqcore::{Corpus, TokenSeq};
use crate::tokenize::BpeTokenizer;

pub const MAX_ORDER: usize = 5;
pub const MAX_CONTEXTS: usize = 1 << 20;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// n-gram counts with canonical (sorted) key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramCounts {
    pub order: usize,
    pub counts: BTreeMap<Vec<u32>, u64>,
    pub total: u64,
}

impl NGramCounts {
    /// Counts n-grams inside each sequence; nothing spans a document boundary.
    pub fn from_sequences(seqs: &[TokenSeq], order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::Invalid(format!(
                "order must be at least 2, got {order}"
            )));
        }
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for z in seqs {
            for w in z.ids().windows(order) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
                total += 1;
            }
        }
        Ok(NGramCounts {
            order,
            counts,
            total,
        })
    }

    /// Counts of the reversed text, obtained by reversing every key.
    pub fn reversed(&self) -> Self {
        let counts = self
            .counts
            .iter()
            .map(|(k, &c)| (k.iter().rev().copied().collect(), c))
            .collect();
        NGramCounts {
            order: self.order,
            counts,
            total: self.total,
        }
    }

    /// Merges shard counts; the result is independent of merge order.
    pub fn merge(&mut self, other: &NGramCounts) {
        for (k, &c) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += c;
        }
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextContribution {
    pub context: Vec<u32>,
    /// Stationary weight of the context under the forward model.
    pub weight: f64,
    /// `weight · KL(p(·|context) ‖ p_rev(·|context))`, nats.
    pub kl_nats: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub h_nats: f64,
    pub h_bits: f64,
    #[serde(rename = "A_nats")]
    pub a_nats: f64,
    #[serde(rename = "A_bits")]
    pub a_bits: f64,
    pub order: usize,
    pub lambda: f64,
    pub token_count: u64,
    pub alphabet_size: usize,
    pub n_contexts: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub contributions: Vec<ContextContribution>,
}

impl Estimate {
    /// Per-context divergence contributions as CSV, largest first.
    pub fn contributions_csv(&self, token_names: impl Fn(u32) -> String) -> String {
        let mut rows = self.contributions.clone();
        rows.sort_by(|a, b| {
            b.kl_nats
                .total_cmp(&a.kl_nats)
                .then_with(|| a.context.cmp(&b.context))
        });
        let mut out = String::from("context,weight,kl_nats\n");
        for r in rows {
            let ctx: Vec<String> = r.context.iter().map(|&t| token_names(t)).collect();
            let field = ctx.join(" ").replace('"', "\"\"");
            out.push_str(&format!(
                "\"{}\",{:.12e},{:.12e}\n",
                field, r.weight, r.kl_nats
            ));
        }
        out
    }
}

struct Smoothed {
    alphabet: Vec<u32>,
    k: usize,
    /// `[context index][symbol index]`
    probs: Vec<Vec<f64>>,
}

impl Smoothed {
    fn new(counts: &NGramCounts, alphabet: &[u32], lambda: f64) -> Self {
        let a = alphabet.len();
        let k = counts.order - 1;
        let n_ctx = a.pow(k as u32);
        let index: BTreeMap<u32, usize> =
            alphabet.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut raw = vec![vec![0u64; a]; n_ctx];
        for (key, &c) in &counts.counts {
            let ctx = key[..k].iter().fold(0, |acc, s| acc * a + index[s]);
            raw[ctx][index[&key[k]]] += c;
        }
        let probs = raw
            .into_iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                let denom = total as f64 + lambda * a as f64;
                row.into_iter()
                    .map(|c| (c as f64 + lambda) / denom)
                    .collect()
            })
            .collect();
        Smoothed {
            alphabet: alphabet.to_vec(),
            k,
            probs,
        }
    }

    fn successor(&self, ctx: usize, sym: usize) -> usize {
        let a = self.alphabet.len();
        let n_ctx = self.probs.len();
        (ctx * a) % n_ctx + sym
    }

    fn context_symbols(&self, mut ctx: usize) -> Vec<u32> {
        let a = self.alphabet.len();
        let mut out = vec![0; self.k];
        for slot in (0..self.k).rev() {
            out[slot] = self.alphabet[ctx % a];
            ctx /= a;
        }
        out
    }

    /// Stationary law of the lifted context chain by lazy power iteration.
    fn stationary(&self) -> Vec<f64> {
        let n = self.probs.len();
        let mut s = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (c, row) in self.probs.iter().enumerate() {
                for (x, &p) in row.iter().enumerate() {
                    next[self.successor(c, x)] += s[c] * p;
                }
            }
            let mut change = 0.0_f64;
            for (nv, &sv) in next.iter_mut().zip(&s) {
                *nv = 0.5 * (*nv + sv);
                change = change.max((*nv - sv).abs());
            }
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= total);
            s = next;
            if change <= 1e-15 {
                break;
            }
        }
        s
    }
}

/// Plug-in `(h, A)` from already tokenized sequences.
pub fn estimate_from_sequences(seqs: &[TokenSeq], order: usize, lambda: f64) -> Result<Estimate> {
    if !(2..=MAX_ORDER).contains(&order) {
        return Err(Error::Invalid(format!(
            "order must be in 2..={MAX_ORDER}, got {order}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!(
            "smoothing lambda must be positive, got {lambda}"
        )));
    }
    let forward = NGramCounts::from_sequences(seqs, order)?;
    if forward.total == 0 {
        return Err(Error::Invalid(format!("corpus has no {order}-grams")));
    }
    let mut alphabet: Vec<u32> = seqs.iter().flat_map(|z| z.iter()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let n_ctx = alphabet
        .len()
        .checked_pow(order as u32 - 1)
        .filter(|&n| n <= MAX_CONTEXTS)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "{} symbols at order {order} is too many contexts",
                alphabet.len()
            ))
        })?;

    let fwd = Smoothed::new(&forward, &alphabet, lambda);
    let rev = Smoothed::new(&forward.reversed(), &alphabet, lambda);
    let sigma = fwd.stationary();

    let mut h = 0.0;
    let mut a_total = 0.0;
    let mut contributions = Vec::with_capacity(n_ctx);
    for (c, (&w, (p_row, r_row))) in sigma
        .iter()
        .zip(fwd.probs.iter().zip(&rev.probs))
        .enumerate()
    {
        let mut hc = 0.0;
        let mut kl = 0.0;
        for (&p, &r) in p_row.iter().zip(r_row) {
            hc -= p * p.ln();
            kl += p * (p / r).ln();
        }
        h += w * hc;
        a_total += w * kl;
        contributions.push(ContextContribution {
            context: fwd.context_symbols(c),
            weight: w,
            kl_nats: w * kl,
        });
    }

    let token_count: u64 = seqs.iter().map(|z| z.len() as u64).sum();
    let mut warnings = Vec::new();
    if token_count < 10 * n_ctx as u64 {
        warnings.push(format!(
            "only {token_count} tokens for {n_ctx} contexts; estimates are dominated by smoothing"
        ));
    }
    Ok(Estimate {
        h_nats: h,
        h_bits: h / std::f64::consts::LN_2,
        a_nats: a_total,
        a_bits: a_total / std::f64::consts::LN_2,
        order,
        lambda,
        token_count,
        alphabet_size: alphabet.len(),
        n_contexts: n_ctx,
        warnings,
        contributions,
    })
}

/// Tokenizes `d` with `t` and estimates `(h, A)` at the given order.
pub fn estimate_from_corpus(
    t: &BpeTokenizer,
    d: &Corpus,
    order: usize,
    lambda: f64,
) -> Result<Estimate> {
    let seqs = encode_corpus(t, d)?;
    estimate_from_sequences(&seqs, order, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::{entropy_rate, time_reversal_divergence, MarkovChain};
    use crate::seqcore::reverse_string;

    #[test]
    fn reversed_counts_swap_keys() {
        let seqs = vec![TokenSeq(vec![0, 1, 2, 1])];
        let c = NGramCounts::from_sequences(&seqs, 2).unwrap();
        assert_eq!(c.total, 3);
        let r = c.reversed();
        assert_eq!(r.counts.get(&vec![1, 0]), Some(&1));
        assert_eq!(r.counts.get(&vec![2, 1]), Some(&1));
        assert_eq!(r.counts.get(&vec![1, 2]), Some(&1));
        assert_eq!(r.reversed(), c);
    }

    #[test]
    fn order_one_model_matches_markov_closed_form() {
        // with order 2 the lifted chain is an ordinary chain on the alphabet
        let seqs = vec![TokenSeq(vec![0, 1, 1, 2, 0, 2, 2, 1, 0, 0, 1, 2, 2, 0])];
        let est = estimate_from_sequences(&seqs, 2, 0.5).unwrap();
        let counts = NGramCounts::from_sequences(&seqs, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..3u32)
            .map(|i| {
                let r: Vec<f64> = (0..3u32)
                    .map(|j| *counts.counts.get(&vec![i, j]).unwrap_or(&0) as f64 + 0.5)
                    .collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let mc = MarkovChain::new(rows).unwrap();
        assert!((est.h_nats - entropy_rate(&mc)).abs() < 1e-12);
        assert!(est.a_nats >= 0.0);
    }

    #[test]
    fn palindromic_corpus_has_no_arrow() {
        let docs = ["abcba", "abba", "cabac", "bccb", "aabcbaa"];
        for d in docs {
            assert_eq!(reverse_string(d), d);
        }
        let d = Corpus::new(docs);
        let t = BpeTokenizer::character_level(&d.alphabet());
        for order in 2..=3 {
            let est = estimate_from_corpus(&t, &d, order, 0.5).unwrap();
            assert!(est.a_nats.abs() < 1e-12, "order {order}: {}", est.a_nats);
            assert!(!est.warnings.is_empty() || order == 2);
        }
    }

    #[test]
    fn q_is_followed_by_u() {
        let docs = [
            "quit the quest",
            "a quiet queen",
            "quick quotes",
            "equal quality",
            "the aqua quilt",
            "quite a quiz",
            "unique quartz",
            "squid quota",
        ];
        let d = Corpus::new(docs);
        let t = BpeTokenizer::character_level(&d.alphabet());
        let est = estimate_from_corpus(&t, &d, 2, 0.5).unwrap();
        assert!(est.a_nats > 0.0);
        let q = t.id("q").unwrap();
        let top = est
            .contributions
            .iter()
            .max_by(|a, b| a.kl_nats.total_cmp(&b.kl_nats))
            .unwrap();
        assert_eq!(top.context, vec![q]);
        assert!(est.contributions.iter().all(|c| c.kl_nats >= 0.0));
        let csv = est.contributions_csv(|id| t.token(id).unwrap().to_string());
        assert!(csv.lines().nth(1).unwrap().starts_with("\"q\","));
    }

    #[test]
    fn chain_sample_recovers_exact_values() {
        use rand::SeedableRng;
        let mc = MarkovChain::new(vec![
            vec![0.1, 0.7, 0.2],
            vec![0.2, 0.1, 0.7],
            vec![0.7, 0.2, 0.1],
        ])
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seqs: Vec<TokenSeq> = (0..100)
            .map(|_| {
                TokenSeq(
                    mc.sample_path(2_000, &mut rng)
                        .into_iter()
                        .map(|s| s as u32)
                        .collect(),
                )
            })
            .collect();
        let est = estimate_from_sequences(&seqs, 2, 0.5).unwrap();
        let (h, a) = (entropy_rate(&mc), time_reversal_divergence(&mc));
        assert!((est.h_nats - h).abs() / h < 0.05);
        assert!((est.a_nats - a).abs() / a < 0.05);
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn argument_errors() {
        let seqs = vec![TokenSeq(vec![0, 1, 0])];
        assert!(estimate_from_sequences(&seqs, 1, 0.5).is_err());
        assert!(estimate_from_sequences(&seqs, 6, 0.5).is_err());
        assert!(estimate_from_sequences(&seqs, 2, 0.0).is_err());
        assert!(estimate_from_sequences(&[TokenSeq(vec![0])], 2, 0.5).is_err());
    }

    #[test]
    fn shard_merge_is_canonical() {
        let a = vec![TokenSeq(vec![0, 1, 2])];
        let b = vec![TokenSeq(vec![2, 1, 1])];
        let mut ab = NGramCounts::from_sequences(&a, 2).unwrap();
        ab.merge(&NGramCounts::from_sequences(&b, 2).unwrap());
        let mut ba = NGramCounts::from_sequences(&b, 2).unwrap();
        ba.merge(&NGramCounts::from_sequences(&a, 2).unwrap());
        assert_eq!(ab, ba);
        let all = NGramCounts::from_sequences(&[a[0].clone(), b[0].clone()], 2).unwrap();
        assert_eq!(ab, all);
    }
}
