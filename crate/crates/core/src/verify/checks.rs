use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::train::{batch_schedule, mean_token_nll, Optimizer, TrainConfig};
use super::CheckReport;
use crate::error::{Error, Result};
use crate::model::{
    document_nlls, encode_corpus, forward_logprobs, init_params, loss_and_grad, EvalDirection,
    ModelConfig, ModelParams, PosMode,
};
use crate::reparam::{apply_param_map, permute_sequence, pushforward_gradient, ParamMap};
use crate::seqcore::{reverse_corpus, Corpus, TokenSeq};
use crate::tokenize::{stability_report, StabilityReport, TokenizerPair};

/// Runs `f` for every case, optionally in parallel; results keep case order.
fn run_cases<R: Send>(
    n: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if parallel {
        (0..n).into_par_iter().map(&f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64 + 1);
    rng
}

// ---- permutation equivariance ------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermKind {
    Identity,
    Transposition,
    #[default]
    Random,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EquivarianceOptions {
    pub perm: PermKind,
    pub parallel: bool,
    /// Negative control: perturb the mapped embedding of the first token.
    pub corrupt_embedding: bool,
    pub max_seq_len: Option<usize>,
}

pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-9;

/// Compares `log p_θ(·|z)` with `log p_{Φ_π(θ)}(·|π(z))` after relabeling
/// the output columns by `π`, for `n_cases` random `(θ, π, z)`.
pub fn check_perm_equivariance(
    cfg: &ModelConfig,
    seed: u64,
    n_cases: usize,
    opts: &EquivarianceOptions,
) -> Result<CheckReport> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let max_m = opts.max_seq_len.unwrap_or(24).clamp(1, cfg.max_len);
    let results = run_cases(n_cases, opts.parallel, |case| {
        let mut rng = case_rng(seed, case);
        let theta = init_params::<f64>(cfg, rng.gen())?;
        let mut perm: Vec<u32> = (0..v as u32).collect();
        match opts.perm {
            PermKind::Identity => {}
            PermKind::Transposition if v >= 2 => {
                let a = rng.gen_range(0..v);
                let mut b = rng.gen_range(0..v - 1);
                if b >= a {
                    b += 1;
                }
                perm.swap(a, b);
            }
            PermKind::Transposition => {}
            PermKind::Random => perm.shuffle(&mut rng),
        }
        let m = rng.gen_range(2.min(max_m)..=max_m);
        let z = TokenSeq((0..m).map(|_| rng.gen_range(0..v as u32)).collect());
        let psi = ParamMap::new(perm.clone(), false)?;
        let mut mapped = apply_param_map(&psi, &theta, cfg)?;
        let pz = permute_sequence(&perm, &z)?;
        if opts.corrupt_embedding {
            mapped.embed.row_mut(pz.ids()[0] as usize)[0] += 1.0;
        }
        let a = forward_logprobs(&theta, cfg, &z, EvalDirection::Standard)?;
        let b = forward_logprobs(&mapped, cfg, &pz, EvalDirection::Standard)?;
        let mut err = 0.0_f64;
        for (ra, rb) in a.iter().zip(&b) {
            for (t, &x) in ra.iter().enumerate() {
                err = err.max((x - rb[perm[t] as usize]).abs());
            }
        }
        Ok((err, json!({ "case": case, "perm": perm, "z": z, "len": m })))
    })?;
    let name = format!(
        "perm_equivariance/{}/{}",
        cfg.pos_mode,
        if cfg.tie_embeddings { "tied" } else { "untied" }
    );
    let mut report = CheckReport::from_cases(name, EQUIVARIANCE_TOLERANCE, results);
    if opts.corrupt_embedding {
        report
            .notes
            .push("negative control: mapped embedding corrupted".into());
    }
    Ok(report)
}

// ---- reversal invariance ---------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct InvarianceOptions {
    pub parallel: bool,
    /// Negative control: leave the position table unflipped.
    pub disable_flip: bool,
    /// BPE target vocabulary; `None` trains character-level tokenizers.
    pub target_vocab: Option<usize>,
}

pub const INVARIANCE_TOLERANCE: f64 = 1e-9;

/// Tokenizers, bijection and encoded corpora for a forward/reversed pair.
#[derive(Clone, Debug)]
pub struct ReversalSetup {
    pub pair: TokenizerPair,
    pub stability: StabilityReport,
    pub perm: Vec<u32>,
    pub forward_seqs: Vec<TokenSeq>,
    pub reverse_seqs: Vec<TokenSeq>,
    pub notes: Vec<String>,
}

impl ReversalSetup {
    /// Trains the pair and falls back to character level when the BPE pair
    /// is not a stable total bijection on `d`.
    pub fn new(d: &Corpus, target_vocab: Option<usize>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut notes = Vec::new();
        let mut pair = match target_vocab {
            Some(t) => TokenizerPair::train(d, t)?,
            None => TokenizerPair::character_level(d),
        };
        let mut stability = stability_report(&pair.forward, &pair.reverse, &pair.bijection, d, 5)?;
        let usable = stability.is_stable() && pair.bijection.to_permutation().is_some();
        if !usable {
            notes.push(format!(
                "bpe pair not usable (coverage {:.4}, stable fraction {:.4}); fell back to character level",
                stability.coverage, stability.seq_stable_fraction
            ));
            pair = TokenizerPair::character_level(d);
            stability = stability_report(&pair.forward, &pair.reverse, &pair.bijection, d, 5)?;
        }
        let perm = pair
            .bijection
            .to_permutation()
            .ok_or_else(|| Error::Invalid("character-level bijection is not total".into()))?;
        let forward_seqs = encode_corpus(&pair.forward, d)?;
        let reverse_seqs = encode_corpus(&pair.reverse, &reverse_corpus(d))?;
        Ok(ReversalSetup {
            pair,
            stability,
            perm,
            forward_seqs,
            reverse_seqs,
            notes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.perm.len()
    }

    pub fn param_map(&self, cfg: &ModelConfig, flip: bool) -> ParamMap {
        ParamMap {
            perm: self.perm.clone(),
            flip_positions: flip && cfg.pos_mode == PosMode::LearnedAbsolute,
        }
    }
}

/// Detail of a reversal-invariance run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceOutcome {
    pub report: CheckReport,
    pub vocab_size: usize,
    pub stability: StabilityReport,
}

/// Checks `NLL(θ; τ, D) == NLL(Ψ(θ); τ_T, T(D))` per document and on the
/// corpus mean, with the mirror pass on the reversed side. `cfg.vocab_size`
/// is replaced by the tokenizer's.
pub fn check_reversal_invariance(
    cfg: &ModelConfig,
    seed: u64,
    d: &Corpus,
    n_cases: usize,
    opts: &InvarianceOptions,
) -> Result<InvarianceOutcome> {
    let setup = ReversalSetup::new(d, opts.target_vocab)?;
    let cfg = ModelConfig {
        vocab_size: setup.vocab_size(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let psi = setup.param_map(&cfg, !opts.disable_flip);
    let results = run_cases(n_cases, opts.parallel, |case| {
        let mut rng = case_rng(seed, case);
        let theta_seed: u64 = rng.gen();
        let theta = init_params::<f64>(&cfg, theta_seed)?;
        let mapped = apply_param_map(&psi, &theta, &cfg)?;
        let fwd = document_nlls(&theta, &cfg, &setup.forward_seqs, EvalDirection::Standard)?;
        let rev = document_nlls(&mapped, &cfg, &setup.reverse_seqs, EvalDirection::Mirror)?;
        let mut err = 0.0_f64;
        let mut worst_doc = 0;
        for (i, (a, b)) in fwd.iter().zip(&rev).enumerate() {
            let e = (a - b).abs();
            if e > err {
                err = e;
                worst_doc = i;
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&fwd), mean(&rev));
        err = err.max((ma - mb).abs());
        Ok((
            err,
            json!({
                "case": case,
                "theta_seed": theta_seed,
                "worst_doc": worst_doc,
                "corpus_nll_forward": ma,
                "corpus_nll_reversed": mb,
            }),
        ))
    })?;
    let name = format!(
        "reversal_invariance/{}/{}",
        cfg.pos_mode,
        if cfg.tie_embeddings { "tied" } else { "untied" }
    );
    let mut report = CheckReport::from_cases(name, INVARIANCE_TOLERANCE, results);
    report.notes.extend(setup.notes.iter().cloned());
    if psi.flip_positions {
        report.notes.push("position flip applied".into());
    } else if cfg.pos_mode == PosMode::LearnedAbsolute {
        report
            .notes
            .push("negative control: position flip disabled".into());
    } else if !opts.disable_flip {
        report
            .notes
            .push("position flip not needed for this positional mode".into());
    }
    Ok(InvarianceOutcome {
        report,
        vocab_size: cfg.vocab_size,
        stability: setup.stability,
    })
}

// ---- gradient gate -----------------------------------------------------------

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative gradient error.
pub const GRADIENT_FLOOR: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

/// Analytic gradient of the mean token NLL against central differences on
/// `n_coords` random coordinates. Error per coordinate is
/// `|g - fd| / max(|g|, |fd|, GRADIENT_FLOOR)`.
pub fn gradient_check(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    seqs: &[TokenSeq],
    dir: EvalDirection,
    seed: u64,
    n_coords: usize,
) -> Result<CheckReport> {
    let (_, grads) = loss_and_grad(params, cfg, seqs, dir)?;
    let flat = grads.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let idx = rng.gen_range(0..flat.len());
        let mut plus = params.clone();
        *plus.entry_mut(idx) += FD_STEP;
        let mut minus = params.clone();
        *minus.entry_mut(idx) -= FD_STEP;
        let lp = loss_and_grad(&plus, cfg, seqs, dir)?.0;
        let lm = loss_and_grad(&minus, cfg, seqs, dir)?.0;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let g = flat[idx];
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(GRADIENT_FLOOR);
        cases.push((
            err,
            json!({ "index": idx, "analytic": g, "finite_difference": fd }),
        ));
    }
    Ok(CheckReport::from_cases(
        format!("gradient_gate/{}/{:?}", cfg.pos_mode, dir).to_lowercase(),
        GRADIENT_TOLERANCE,
        cases,
    ))
}

// ---- matched training --------------------------------------------------------

pub const PARAM_DRIFT_TOLERANCE: f64 = 1e-5;
pub const LOSS_GAP_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default)]
pub struct MatchedOptions {
    pub target_vocab: Option<usize>,
    /// Negative control: start run B from `θ0` instead of `Ψ(θ0)`.
    pub skip_param_map: bool,
    /// Coordinates checked by the gradient gate.
    pub gate_coords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub param_discrepancy: f64,
    pub grad_discrepancy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchedOutcome {
    pub gradient_gate: Vec<CheckReport>,
    pub param_discrepancy: CheckReport,
    pub loss_difference: CheckReport,
    pub curve: Vec<CurvePoint>,
}

impl MatchedOutcome {
    pub fn passed(&self) -> bool {
        self.gradient_gate.iter().all(|r| r.passed)
            && self.param_discrepancy.passed
            && self.loss_difference.passed
    }

    pub fn reports(&self) -> Vec<&CheckReport> {
        let mut out: Vec<&CheckReport> = self.gradient_gate.iter().collect();
        out.push(&self.param_discrepancy);
        out.push(&self.loss_difference);
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss_A,loss_B,param_discrepancy\n");
        for p in &self.curve {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.6e}\n",
                p.step, p.loss_a, p.loss_b, p.param_discrepancy
            ));
        }
        s
    }
}

/// Run A trains on `τ(D)` in standard mode from `θ0`; run B trains on
/// `τ_T(T(D))` in mirror mode from `Ψ(θ0)` with the same batch schedule.
/// Tracks `‖θ_B - Ψ(θ_A)‖_∞`, the loss gap, and `‖g_B - Ψ_*(g_A)‖_∞` at
/// every step. Step 0 is the state before any update.
pub fn matched_training_check(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    d: &Corpus,
    opts: &MatchedOptions,
) -> Result<MatchedOutcome> {
    tc.validate()?;
    let setup = ReversalSetup::new(d, opts.target_vocab)?;
    let cfg = ModelConfig {
        vocab_size: setup.vocab_size(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let psi = setup.param_map(&cfg, true);

    let theta0 = init_params::<f64>(&cfg, tc.seed)?;
    let gate_coords = if opts.gate_coords == 0 {
        20
    } else {
        opts.gate_coords
    };
    let gate_batch: Vec<TokenSeq> = setup
        .forward_seqs
        .iter()
        .take(tc.batch_size.max(1))
        .cloned()
        .collect();
    let gate_batch_rev: Vec<TokenSeq> = setup
        .reverse_seqs
        .iter()
        .take(tc.batch_size.max(1))
        .cloned()
        .collect();
    let mut gradient_gate = vec![
        gradient_check(
            &theta0,
            &cfg,
            &gate_batch,
            EvalDirection::Standard,
            tc.seed ^ 0x9e37,
            gate_coords,
        )?,
        gradient_check(
            &apply_param_map(&psi, &theta0, &cfg)?,
            &cfg,
            &gate_batch_rev,
            EvalDirection::Mirror,
            tc.seed ^ 0x79b9,
            gate_coords,
        )?,
    ];
    gradient_gate[0].name = format!("gradient_gate/{}/standard", cfg.pos_mode);
    gradient_gate[1].name = format!("gradient_gate/{}/mirror", cfg.pos_mode);

    let mut theta_a = theta0.clone();
    let mut theta_b = if opts.skip_param_map {
        theta0.clone()
    } else {
        apply_param_map(&psi, &theta0, &cfg)?
    };
    let mut opt_a = Optimizer::new(tc, &theta_a);
    let mut opt_b = Optimizer::new(tc, &theta_b);
    let schedule = batch_schedule(setup.forward_seqs.len(), tc.steps, tc.batch_size, tc.seed);

    let drift = |a: &ModelParams<f64>, b: &ModelParams<f64>| -> Result<f64> {
        Ok(apply_param_map(&psi, a, &cfg)?
            .max_abs_diff(b)
            .unwrap_or(f64::INFINITY))
    };

    let mut curve = Vec::with_capacity(tc.steps + 1);
    let mut param_cases = Vec::with_capacity(tc.steps + 1);
    let mut loss_cases = Vec::with_capacity(tc.steps);
    let d0 = drift(&theta_a, &theta_b)?;
    param_cases.push((d0, json!({ "step": 0 })));

    for (step, batch) in schedule.iter().enumerate() {
        let batch_a: Vec<TokenSeq> = batch
            .iter()
            .map(|&i| setup.forward_seqs[i].clone())
            .collect();
        let batch_b: Vec<TokenSeq> = batch
            .iter()
            .map(|&i| setup.reverse_seqs[i].clone())
            .collect();
        let (loss_a, g_a) = loss_and_grad(&theta_a, &cfg, &batch_a, EvalDirection::Standard)?;
        let (loss_b, g_b) = loss_and_grad(&theta_b, &cfg, &batch_b, EvalDirection::Mirror)?;
        if !loss_a.is_finite() || !loss_b.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grad_gap = pushforward_gradient(&psi, &g_a, &cfg)?
            .max_abs_diff(&g_b)
            .unwrap_or(f64::INFINITY);
        opt_a.update(&mut theta_a, &g_a);
        opt_b.update(&mut theta_b, &g_b);
        let gap = drift(&theta_a, &theta_b)?;
        let loss_gap = (loss_a - loss_b).abs();
        param_cases.push((gap, json!({ "step": step + 1 })));
        loss_cases.push((
            loss_gap,
            json!({ "step": step, "loss_a": loss_a, "loss_b": loss_b }),
        ));
        curve.push(CurvePoint {
            step,
            loss_a,
            loss_b,
            param_discrepancy: gap,
            grad_discrepancy: grad_gap,
        });
    }

    let label = format!("{}/{:?}", cfg.pos_mode, tc.optimizer).to_lowercase();
    let mut param_discrepancy = CheckReport::from_cases(
        format!("matched_training/param_discrepancy/{label}"),
        PARAM_DRIFT_TOLERANCE,
        param_cases,
    );
    let loss_difference = CheckReport::from_cases(
        format!("matched_training/loss_difference/{label}"),
        LOSS_GAP_TOLERANCE,
        loss_cases,
    );
    param_discrepancy.notes.extend(setup.notes.iter().cloned());
    if opts.skip_param_map {
        param_discrepancy
            .notes
            .push("negative control: run B started from unmapped parameters".into());
    }
    Ok(MatchedOutcome {
        gradient_gate,
        param_discrepancy,
        loss_difference,
        curve,
    })
}

// ---- independent runs --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvesOutcome {
    pub report: CheckReport,
    pub final_forward: Vec<f64>,
    pub final_reversed: Vec<f64>,
    pub mean_difference: f64,
    pub pooled_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains standard-mode models on `D` and on `T(D)` with independent seeds
/// and compares final mean token NLLs: passes when the difference of means
/// is at most twice the pooled seed standard deviation.
pub fn independent_curves_comparison(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    d: &Corpus,
    n_seeds: usize,
    target_vocab: Option<usize>,
    parallel: bool,
) -> Result<CurvesOutcome> {
    if n_seeds < 3 {
        return Err(Error::Config(format!(
            "independent comparison needs at least 3 seeds, got {n_seeds}"
        )));
    }
    tc.validate()?;
    let setup = ReversalSetup::new(d, target_vocab)?;
    let cfg = ModelConfig {
        vocab_size: setup.vocab_size(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let run = |seqs: &[TokenSeq], seed: u64| -> Result<f64> {
        let mut p = init_params::<f64>(&cfg, seed)?;
        let tc = TrainConfig { seed, ..tc.clone() };
        super::train::train(&mut p, &cfg, seqs, EvalDirection::Standard, &tc)?;
        mean_token_nll(&p, &cfg, seqs, EvalDirection::Standard)
    };
    let finals = run_cases(2 * n_seeds, parallel, |job| {
        let s = (job / 2) as u64;
        if job % 2 == 0 {
            run(&setup.forward_seqs, tc.seed.wrapping_add(s))
        } else {
            run(
                &setup.reverse_seqs,
                tc.seed.wrapping_add(1_000_003).wrapping_add(s),
            )
        }
    })?;
    let final_forward: Vec<f64> = finals.iter().step_by(2).copied().collect();
    let final_reversed: Vec<f64> = finals.iter().skip(1).step_by(2).copied().collect();
    let (ma, sa) = mean_std(&final_forward);
    let (mb, sb) = mean_std(&final_reversed);
    let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
    let diff = (ma - mb).abs();
    let mut report = CheckReport {
        name: format!("independent_curves/{}", cfg.pos_mode),
        cases_run: 2 * n_seeds,
        max_abs_error: diff,
        tolerance: 2.0 * pooled,
        passed: diff <= 2.0 * pooled,
        worst_case: json!({ "mean_forward": ma, "mean_reversed": mb, "std_forward": sa, "std_reversed": sb }),
        notes: vec!["statistical criterion: |mean difference| <= 2 x pooled seed std".into()],
    };
    report.notes.extend(setup.notes.iter().cloned());
    Ok(CurvesOutcome {
        report,
        final_forward,
        final_reversed,
        mean_difference: diff,
        pooled_std: pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::demo_corpus;

    fn small(mode: PosMode, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            max_len: 48,
            pos_mode: mode,
            tie_embeddings: tied,
        }
    }

    fn corpus() -> Corpus {
        Corpus::new(demo_corpus().docs()[..6].to_vec())
    }

    #[test]
    fn equivariance_passes_and_identity_is_exact() {
        for mode in PosMode::ALL {
            let c = small(mode, mode == PosMode::RelativeBias);
            let r = check_perm_equivariance(&c, 1, 8, &EquivarianceOptions::default()).unwrap();
            assert!(r.passed, "{}", r.summary());
            let opts = EquivarianceOptions {
                perm: PermKind::Identity,
                ..Default::default()
            };
            let r = check_perm_equivariance(&c, 1, 4, &opts).unwrap();
            assert_eq!(r.max_abs_error, 0.0);
        }
    }

    #[test]
    fn corrupted_embedding_is_caught() {
        let opts = EquivarianceOptions {
            corrupt_embedding: true,
            ..Default::default()
        };
        let r = check_perm_equivariance(&small(PosMode::Rotary, false), 2, 4, &opts).unwrap();
        assert!(!r.passed);
        assert!(r.max_abs_error > 1e-6);
    }

    #[test]
    fn parallel_matches_serial() {
        let c = small(PosMode::LearnedAbsolute, false);
        let a = check_perm_equivariance(&c, 9, 6, &EquivarianceOptions::default()).unwrap();
        let b = check_perm_equivariance(
            &c,
            9,
            6,
            &EquivarianceOptions {
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn reversal_invariance_and_flip_control() {
        let d = corpus();
        for mode in PosMode::ALL {
            let out = check_reversal_invariance(
                &small(mode, false),
                3,
                &d,
                3,
                &InvarianceOptions::default(),
            )
            .unwrap();
            assert!(out.report.passed, "{}", out.report.summary());
        }
        let opts = InvarianceOptions {
            disable_flip: true,
            ..Default::default()
        };
        let out =
            check_reversal_invariance(&small(PosMode::LearnedAbsolute, false), 3, &d, 3, &opts)
                .unwrap();
        assert!(out.report.max_abs_error > 1e-3);
    }

    #[test]
    fn unstable_bpe_falls_back_to_characters() {
        let d = Corpus::new(["ac", "ac", "ba", "ba"]);
        let setup = ReversalSetup::new(&d, Some(4)).unwrap();
        assert_eq!(setup.vocab_size(), 3);
        assert!(!setup.notes.is_empty());
    }

    #[test]
    fn gradient_gate_passes() {
        let c = small(PosMode::RelativeBias, false);
        let setup = ReversalSetup::new(&corpus(), None).unwrap();
        let c = ModelConfig {
            vocab_size: setup.vocab_size(),
            ..c
        };
        let p = init_params::<f64>(&c, 4).unwrap();
        let r = gradient_check(
            &p,
            &c,
            &setup.forward_seqs[..2],
            EvalDirection::Mirror,
            1,
            20,
        )
        .unwrap();
        assert!(r.passed, "{}", r.summary());
        assert_eq!(r.cases_run, 20);
    }

    #[test]
    fn matched_training_tracks_and_control_fails() {
        let tc = TrainConfig {
            steps: 6,
            batch_size: 2,
            learning_rate: 0.05,
            ..Default::default()
        };
        let c = small(PosMode::LearnedAbsolute, false);
        let out = matched_training_check(&c, &tc, &corpus(), &MatchedOptions::default()).unwrap();
        assert!(
            out.passed(),
            "{:?}",
            out.reports()
                .iter()
                .map(|r| r.summary())
                .collect::<Vec<_>>()
        );
        assert_eq!(out.curve.len(), 6);
        assert_eq!(out.param_discrepancy.cases_run, 7);
        assert!(out
            .curve_csv()
            .starts_with("step,loss_A,loss_B,param_discrepancy\n"));

        let opts = MatchedOptions {
            skip_param_map: true,
            ..Default::default()
        };
        let bad = matched_training_check(&c, &tc, &corpus(), &opts).unwrap();
        assert!(!bad.param_discrepancy.passed);
    }

    #[test]
    fn independent_curves_need_three_seeds() {
        let tc = TrainConfig {
            steps: 2,
            ..Default::default()
        };
        let c = small(PosMode::Rotary, false);
        assert!(matches!(
            independent_curves_comparison(&c, &tc, &corpus(), 1, None, false),
            Err(Error::Config(_))
        ));
        let out = independent_curves_comparison(&c, &tc, &corpus(), 3, None, true).unwrap();
        assert_eq!(out.final_forward.len(), 3);
        assert_eq!(out.report.cases_run, 6);
    }
}
