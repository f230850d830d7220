//! Minimal decoder-only transformer with exact next-token NLL.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, PosMode};
pub use forward::{
    corpus_nll, document_nlls, encode_corpus, forward_logprobs, loss_and_grad, sequence_nll,
    target_logprobs, EvalDirection,
};
pub use params::{
    init_params, Block, ModelParams, ParamsSidecar, Tensor, TensorEntry, CONTAINER_FORMAT,
};
