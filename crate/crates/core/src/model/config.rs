use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How positions enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Rotations of query/key pairs by position-dependent angles.
    Rotary,
    /// Per-head scalar bias indexed by signed query-key offset.
    RelativeBias,
    /// A learned table added to the token embeddings.
    LearnedAbsolute,
}

impl PosMode {
    pub const ALL: [PosMode; 3] = [
        PosMode::Rotary,
        PosMode::RelativeBias,
        PosMode::LearnedAbsolute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosMode::Rotary => "rotary",
            PosMode::RelativeBias => "relative_bias",
            PosMode::LearnedAbsolute => "learned_absolute",
        }
    }
}

impl std::str::FromStr for PosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotary" => Ok(PosMode::Rotary),
            "relative_bias" | "relative" => Ok(PosMode::RelativeBias),
            "learned_absolute" | "absolute" => Ok(PosMode::LearnedAbsolute),
            other => Err(Error::Config(format!("unknown pos_mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PosMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub pos_mode: PosMode,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub const ROPE_BASE: f64 = 10_000.0;
    pub const LN_EPS: f64 = 1e-5;

    /// Default architecture: 64 wide, 2 heads, 2 layers, context 128.
    pub fn new(vocab_size: usize, pos_mode: PosMode) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            max_len: 128,
            pos_mode,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be a positive even integer");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads must divide d_model");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.pos_mode == PosMode::Rotary && !self.head_dim().is_multiple_of(2) {
            return bad("rotary encoding needs an even head dimension");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = ModelConfig::new(10, PosMode::Rotary);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.head_dim(), 32);

        let mut c = ok.clone();
        c.vocab_size = 0;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.n_heads = 3;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.d_model = 6;
        c.n_heads = 2;
        assert!(c.validate().is_err(), "odd rotary head dim");
        c.pos_mode = PosMode::LearnedAbsolute;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn pos_mode_names() {
        for m in PosMode::ALL {
            assert_eq!(m.as_str().parse::<PosMode>().unwrap(), m);
        }
        assert!("sinusoidal".parse::<PosMode>().is_err());
    }
}
