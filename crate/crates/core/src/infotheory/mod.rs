//! Entropy rate, perplexity floor, time reversal and the time-reversal
//! divergence (entropy production rate) of stationary sources. Units are
//! nats unless a field says otherwise.

mod chain;
mod estimate;

pub use chain::{
    block_entropy_bruteforce, entropy_rate, path_kl_bruteforce, perplexity_floor, reverse_chain,
    stationary_distribution, time_reversal_divergence, ChainSpec, MarkovChain, ENUMERATION_GUARD,
};
pub use estimate::{
    estimate_from_corpus, estimate_from_sequences, ContextContribution, Estimate, NGramCounts,
    DEFAULT_LAMBDA, MAX_ORDER,
};

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}
