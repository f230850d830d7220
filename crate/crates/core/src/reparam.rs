//! Parameter-space maps: vocabulary relabeling of the embedding and
//! unembedding rows, and the index flip of a learned absolute position table.
//!
//! Maps are plain data and are applied functionally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PosMode, Tensor};
use crate::scalar::Scalar;
use crate::seqcore::TokenSeq;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMap {
    /// `perm[t]` is the new id of token `t`.
    pub perm: Vec<u32>,
    pub flip_positions: bool,
}

impl ParamMap {
    pub fn identity(vocab_size: usize) -> Self {
        ParamMap {
            perm: (0..vocab_size as u32).collect(),
            flip_positions: false,
        }
    }

    pub fn new(perm: Vec<u32>, flip_positions: bool) -> Result<Self> {
        validate_perm(&perm)?;
        Ok(ParamMap {
            perm,
            flip_positions,
        })
    }

    /// Exchanges tokens `a` and `b`.
    pub fn swap(vocab_size: usize, a: u32, b: u32) -> Self {
        let mut m = ParamMap::identity(vocab_size);
        m.perm.swap(a as usize, b as usize);
        m
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (t, &p) in self.perm.iter().enumerate() {
            inv[p as usize] = t as u32;
        }
        ParamMap {
            perm: inv,
            flip_positions: self.flip_positions,
        }
    }

    /// `after ∘ self`: apply `self` first.
    pub fn then(&self, after: &ParamMap) -> Result<Self> {
        if self.perm.len() != after.perm.len() {
            return Err(Error::Shape("composed maps have different sizes".into()));
        }
        Ok(ParamMap {
            perm: self.perm.iter().map(|&p| after.perm[p as usize]).collect(),
            flip_positions: self.flip_positions ^ after.flip_positions,
        })
    }

    /// Whether the flip changes anything for this config.
    pub fn flip_is_effective(&self, cfg: &ModelConfig) -> bool {
        self.flip_positions && cfg.pos_mode == PosMode::LearnedAbsolute
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ParamMap = serde_json::from_str(s)?;
        validate_perm(&m.perm)?;
        Ok(m)
    }
}

fn validate_perm(perm: &[u32]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        match seen.get_mut(p as usize) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::Invalid(format!("not a permutation: entry {p}"))),
        }
    }
    Ok(())
}

fn relabel_rows<T: Scalar>(t: &Tensor<T>, perm: &[u32]) -> Tensor<T> {
    let mut out = t.clone();
    for (src, &dst) in perm.iter().enumerate() {
        out.row_mut(dst as usize).copy_from_slice(t.row(src));
    }
    out
}

fn flip_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let n = t.shape[0];
    let mut out = t.clone();
    for j in 0..n {
        out.row_mut(j).copy_from_slice(t.row(n - 1 - j));
    }
    out
}

fn map_tensors<T: Scalar>(
    psi: &ParamMap,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ModelParams<T>> {
    if psi.perm.len() != cfg.vocab_size {
        return Err(Error::Shape(format!(
            "permutation of size {} for vocab_size {}",
            psi.perm.len(),
            cfg.vocab_size
        )));
    }
    validate_perm(&psi.perm)?;
    p.check_shapes(cfg)?;
    let mut out = p.clone();
    out.embed = relabel_rows(&p.embed, &psi.perm);
    if let Some(w) = &p.unembed {
        out.unembed = Some(relabel_rows(w, &psi.perm));
    }
    if psi.flip_is_effective(cfg) {
        out.pos = p.pos.as_ref().map(flip_rows);
    }
    Ok(out)
}

/// Applies `psi`: the row of token `t` moves to row `perm[t]` in both the
/// embedding and the unembedding (once, when tied); a learned position table
/// is flipped, `P'(j) = P(max_len - 1 - j)`, when requested. Everything else
/// is copied unchanged. The flip is a no-op for rotary and relative-bias
/// models.
pub fn apply_param_map<T: Scalar>(
    psi: &ParamMap,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ModelParams<T>> {
    map_tensors(psi, p, cfg)
}

/// Transports a gradient through `psi`. The map is a coordinate
/// permutation, so gradients move exactly like parameters.
pub fn pushforward_gradient<T: Scalar>(
    psi: &ParamMap,
    g: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ModelParams<T>> {
    map_tensors(psi, g, cfg)
}

pub fn permute_sequence(perm: &[u32], z: &TokenSeq) -> Result<TokenSeq> {
    z.iter()
        .map(|id| {
            perm.get(id as usize)
                .copied()
                .ok_or(Error::TokenOutOfRange {
                    id,
                    size: perm.len(),
                })
        })
        .collect::<Result<Vec<_>>>()
        .map(TokenSeq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn cfg(mode: PosMode, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            max_len: 10,
            pos_mode: mode,
            tie_embeddings: tied,
        }
    }

    fn bits(p: &ModelParams<f64>) -> Vec<u64> {
        p.flatten().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn identity_and_inverse() {
        for mode in PosMode::ALL {
            for tied in [false, true] {
                let c = cfg(mode, tied);
                let p = init_params::<f64>(&c, 3).unwrap();
                let id = ParamMap::identity(6);
                assert_eq!(bits(&apply_param_map(&id, &p, &c).unwrap()), bits(&p));

                let psi = ParamMap::new(vec![2, 0, 1, 5, 3, 4], true).unwrap();
                let there = apply_param_map(&psi, &p, &c).unwrap();
                let back = apply_param_map(&psi.inverse(), &there, &c).unwrap();
                assert_eq!(bits(&back), bits(&p));
            }
        }
    }

    #[test]
    fn swap_moves_rows_only() {
        let c = cfg(PosMode::LearnedAbsolute, false);
        let p = init_params::<f64>(&c, 5).unwrap();
        let q = apply_param_map(&ParamMap::swap(6, 0, 1), &p, &c).unwrap();
        assert_eq!(q.embed.row(0), p.embed.row(1));
        assert_eq!(q.embed.row(1), p.embed.row(0));
        assert_eq!(q.embed.row(2), p.embed.row(2));
        let (w, wq) = (p.unembed.as_ref().unwrap(), q.unembed.as_ref().unwrap());
        assert_eq!(wq.row(0), w.row(1));
        assert_eq!(wq.row(1), w.row(0));
        assert_eq!(q.blocks, p.blocks);
        assert_eq!(q.pos, p.pos);
    }

    #[test]
    fn flip_reverses_position_table() {
        let c = cfg(PosMode::LearnedAbsolute, false);
        let p = init_params::<f64>(&c, 5).unwrap();
        let psi = ParamMap {
            perm: (0..6).collect(),
            flip_positions: true,
        };
        let q = apply_param_map(&psi, &p, &c).unwrap();
        let (pt, qt) = (p.pos.as_ref().unwrap(), q.pos.as_ref().unwrap());
        for j in 0..10 {
            assert_eq!(qt.row(j), pt.row(9 - j));
        }
        let twice = apply_param_map(&psi, &q, &c).unwrap();
        assert_eq!(bits(&twice), bits(&p));

        // no-op for rotary
        let c = cfg(PosMode::Rotary, false);
        let p = init_params::<f64>(&c, 5).unwrap();
        assert!(!psi.flip_is_effective(&c));
        assert_eq!(bits(&apply_param_map(&psi, &p, &c).unwrap()), bits(&p));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let c = cfg(PosMode::Rotary, false);
        let p = init_params::<f64>(&c, 5).unwrap();
        assert!(apply_param_map(&ParamMap::identity(5), &p, &c).is_err());
        assert!(ParamMap::new(vec![0, 0, 1], false).is_err());
        assert!(ParamMap::from_json(r#"{"perm":[1,1],"flip_positions":false}"#).is_err());
    }

    #[test]
    fn permute_sequence_examples() {
        let z = TokenSeq(vec![0, 1, 2]);
        assert_eq!(permute_sequence(&[0, 1, 2], &z).unwrap(), z);
        let swap = ParamMap::swap(3, 0, 1);
        let s = permute_sequence(&swap.perm, &z).unwrap();
        assert_eq!(s, TokenSeq(vec![1, 0, 2]));
        assert_eq!(permute_sequence(&swap.inverse().perm, &s).unwrap(), z);
        assert!(permute_sequence(&[0, 1], &z).is_err());
    }

    #[test]
    fn pushforward_of_swap_is_involutive() {
        let c = cfg(PosMode::RelativeBias, true);
        let g = init_params::<f64>(&c, 8).unwrap();
        let s = ParamMap::swap(6, 2, 4);
        assert_eq!(
            bits(&pushforward_gradient(&ParamMap::identity(6), &g, &c).unwrap()),
            bits(&g)
        );
        let once = pushforward_gradient(&s, &g, &c).unwrap();
        assert_eq!(
            bits(&pushforward_gradient(&s, &once, &c).unwrap()),
            bits(&g)
        );
    }

    #[test]
    fn param_map_json() {
        let m = ParamMap::new(vec![1, 0, 2], true).unwrap();
        let j = m.to_json().unwrap();
        assert_eq!(j, r#"{"perm":[1,0,2],"flip_positions":true}"#);
        assert_eq!(ParamMap::from_json(&j).unwrap(), m);
    }

    #[test]
    fn gradient_transforms_by_the_pushforward() {
        use crate::model::{loss_and_grad, EvalDirection};
        for mode in PosMode::ALL {
            for tied in [false, true] {
                let c = cfg(mode, tied);
                let p = init_params::<f64>(&c, 21).unwrap();
                let psi = ParamMap::new(vec![3, 5, 0, 1, 4, 2], false).unwrap();
                let seqs = vec![TokenSeq(vec![0, 1, 5, 2, 2, 3]), TokenSeq(vec![4, 0, 1])];
                let mapped_seqs: Vec<TokenSeq> = seqs
                    .iter()
                    .map(|z| permute_sequence(&psi.perm, z).unwrap())
                    .collect();
                let q = apply_param_map(&psi, &p, &c).unwrap();
                let (la, ga) = loss_and_grad(&p, &c, &seqs, EvalDirection::Standard).unwrap();
                let (lb, gb) =
                    loss_and_grad(&q, &c, &mapped_seqs, EvalDirection::Standard).unwrap();
                assert!((la - lb).abs() <= 1e-12);
                let pushed = pushforward_gradient(&psi, &ga, &c).unwrap();
                assert!(
                    pushed.max_abs_diff(&gb).unwrap() <= 1e-9,
                    "{mode} tied={tied}"
                );

                let flat = pushed.flatten();
                for k in (0..flat.len()).step_by(29) {
                    let h = 1e-5;
                    let mut plus = q.clone();
                    *plus.entry_mut(k) += h;
                    let mut minus = q.clone();
                    *minus.entry_mut(k) -= h;
                    let fd = (loss_and_grad(&plus, &c, &mapped_seqs, EvalDirection::Standard)
                        .unwrap()
                        .0
                        - loss_and_grad(&minus, &c, &mapped_seqs, EvalDirection::Standard)
                            .unwrap()
                            .0)
                        / (2.0 * h);
                    let rel = (flat[k] - fd).abs() / flat[k].abs().max(fd.abs()).max(1e-3);
                    assert!(rel <= 1e-6, "{mode} coord {k}");
                }
            }
        }
    }

    fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<u32>> {
        Just((0..n as u32).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn maps_compose_as_a_group_action(a in perm_strategy(6), b in perm_strategy(6), fa: bool, fb: bool, seed in 0u64..1000) {
            let c = cfg(PosMode::LearnedAbsolute, false);
            let p = init_params::<f64>(&c, seed).unwrap();
            let psi1 = ParamMap::new(a, fa).unwrap();
            let psi2 = ParamMap::new(b, fb).unwrap();
            let stepwise = apply_param_map(&psi2, &apply_param_map(&psi1, &p, &c).unwrap(), &c).unwrap();
            let composed = apply_param_map(&psi1.then(&psi2).unwrap(), &p, &c).unwrap();
            prop_assert_eq!(bits(&stepwise), bits(&composed));
        }
    }
}
