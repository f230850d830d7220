use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, EvalDirection, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::seqcore::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.optimizer == OptimizerKind::Adam {
            let unit = |x: f64| (0.0..1.0).contains(&x);
            if !unit(self.beta1)
                || !unit(self.beta2)
                || self.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            {
                return Err(Error::Config(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Document indices for every step: a fresh seeded shuffle per epoch, cut
/// into consecutive batches. A batch never straddles two epochs.
pub fn batch_schedule(
    n_docs: usize,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    let mut epoch: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while out.len() < steps {
        if cursor >= epoch.len() {
            epoch = (0..n_docs).collect();
            epoch.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(epoch.len());
        out.push(epoch[cursor..end].to_vec());
        cursor = end;
    }
    out
}

/// Elementwise first-order optimizer. State tensors share the parameter
/// layout, so any coordinate relabeling of the parameters relabels the state
/// the same way.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: TrainConfig,
    step: i32,
    m: Option<ModelParams<T>>,
    v: Option<ModelParams<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, like: &ModelParams<T>) -> Self {
        let adam = cfg.optimizer == OptimizerKind::Adam;
        Optimizer {
            cfg: cfg.clone(),
            step: 0,
            m: adam.then(|| like.zeros_like()),
            v: adam.then(|| like.zeros_like()),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.step += 1;
        let lr = T::of(self.cfg.learning_rate);
        let grads = grads.flatten();
        match (&mut self.m, &mut self.v) {
            (Some(m), Some(v)) => {
                let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
                let eps = T::of(self.cfg.eps);
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let mut k = 0;
                for ((p, mt), vt) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for ((x, mi), vi) in p
                        .data
                        .iter_mut()
                        .zip(mt.data.iter_mut())
                        .zip(vt.data.iter_mut())
                    {
                        let g = grads[k];
                        k += 1;
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            _ => {
                let mut k = 0;
                for p in params.tensors_mut() {
                    for x in p.data.iter_mut() {
                        *x -= lr * grads[k];
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Trains in place and returns the loss of every step (before its update).
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    seqs: &[TokenSeq],
    dir: EvalDirection,
    tc: &TrainConfig,
) -> Result<Vec<T>> {
    tc.validate()?;
    let schedule = batch_schedule(seqs.len(), tc.steps, tc.batch_size, tc.seed);
    let mut opt = Optimizer::new(tc, params);
    let mut losses = Vec::with_capacity(tc.steps);
    for (step, batch) in schedule.iter().enumerate() {
        let docs: Vec<TokenSeq> = batch.iter().map(|&i| seqs[i].clone()).collect();
        let (loss, grads) = loss_and_grad(params, cfg, &docs, dir)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.update(params, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean NLL per predicted token over all of `seqs`.
pub fn mean_token_nll<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    seqs: &[TokenSeq],
    dir: EvalDirection,
) -> Result<T> {
    let mut total = T::zero();
    let mut n = 0usize;
    for (i, z) in seqs.iter().enumerate() {
        total += crate::model::sequence_nll(p, cfg, z, dir).map_err(|e| e.in_document(i))?;
        n += z.len() - 1;
    }
    Ok(total / T::of(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, PosMode};

    #[test]
    fn schedule_is_seeded_and_covers_epochs() {
        let a = batch_schedule(10, 7, 4, 3);
        assert_eq!(a, batch_schedule(10, 7, 4, 3));
        assert_ne!(a, batch_schedule(10, 7, 4, 4));
        assert_eq!(a.len(), 7);
        // first epoch: 4 + 4 + 2
        let mut first: Vec<usize> = a[..3].concat();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(batch_schedule(10, 0, 4, 3).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            optimizer: OptimizerKind::Adam,
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ModelConfig {
            vocab_size: 3,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            max_len: 16,
            pos_mode: PosMode::Rotary,
            tie_embeddings: false,
        };
        let seqs: Vec<TokenSeq> = (0..6)
            .map(|_| TokenSeq(vec![0, 1, 2, 0, 1, 2, 0, 1]))
            .collect();
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = init_params::<f64>(&cfg, 1).unwrap();
            let tc = TrainConfig {
                steps: 60,
                batch_size: 2,
                learning_rate: if optimizer == OptimizerKind::Sgd {
                    0.2
                } else {
                    0.02
                },
                optimizer,
                ..Default::default()
            };
            let losses = train(&mut p, &cfg, &seqs, EvalDirection::Standard, &tc).unwrap();
            assert!(
                losses.last().unwrap() < &(0.5 * losses[0]),
                "{optimizer:?}: {losses:?}"
            );
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let cfg = ModelConfig {
            vocab_size: 3,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            max_len: 8,
            pos_mode: PosMode::Rotary,
            tie_embeddings: true,
        };
        let seqs = vec![TokenSeq(vec![0, 1, 2])];
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        let tc = TrainConfig {
            steps: 50,
            learning_rate: 1e300,
            batch_size: 1,
            ..Default::default()
        };
        match train(&mut p, &cfg, &seqs, EvalDirection::Standard, &tc) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
