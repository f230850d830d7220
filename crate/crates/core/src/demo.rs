//! Synthetic corpora drawn from seeded Markov chains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::infotheory::MarkovChain;
use crate::seqcore::Corpus;

/// Symbols of the demo source, in state order.
pub const DEMO_SYMBOLS: [char; 5] = ['a', 'b', 'c', 'd', ' '];

/// A five-symbol source with a preferred direction of circulation
/// (`a → b → c → d → a`), so it is not reversible.
pub fn demo_chain() -> MarkovChain<f64> {
    MarkovChain::with_labels(
        vec![
            vec![0.10, 0.50, 0.10, 0.10, 0.20],
            vec![0.10, 0.10, 0.50, 0.10, 0.20],
            vec![0.10, 0.10, 0.10, 0.50, 0.20],
            vec![0.50, 0.10, 0.10, 0.10, 0.20],
            vec![0.30, 0.25, 0.25, 0.20, 0.00],
        ],
        DEMO_SYMBOLS.iter().map(|c| c.to_string()).collect(),
    )
    .expect("demo chain is valid")
}

/// `n_docs` documents with lengths drawn uniformly from `min_len..=max_len`.
pub fn sample_corpus(
    chain: &MarkovChain<f64>,
    symbols: &[char],
    n_docs: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Corpus {
    assert_eq!(symbols.len(), chain.n_states());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<String> = (0..n_docs)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            chain
                .sample_path(len, &mut rng)
                .into_iter()
                .map(|s| symbols[s])
                .collect()
        })
        .collect();
    Corpus::new(docs)
}

pub const DEMO_SEED: u64 = 20_240_917;

/// The bundled demo corpus: 48 documents of 12 to 40 symbols.
pub fn demo_corpus() -> Corpus {
    sample_corpus(&demo_chain(), &DEMO_SYMBOLS, 48, 12, 40, DEMO_SEED)
}
