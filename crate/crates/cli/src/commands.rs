use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use revlab::infotheory::{
    entropy_rate, estimate_from_corpus, nats_to_bits, path_kl_bruteforce, perplexity_floor,
    time_reversal_divergence, MarkovChain, DEFAULT_LAMBDA, ENUMERATION_GUARD,
};
use revlab::model::PosMode;
use revlab::seqcore::reverse_corpus;
use revlab::tokenize::{
    propose_reversal_bijection, stability_report, train_bpe_with_stats, BpeTokenizer, TokenizerPair,
};
use revlab::verify::{
    check_perm_equivariance, check_reversal_invariance, independent_curves_comparison,
    matched_training_check, CheckReport, EquivarianceOptions, InvarianceOptions, MatchedOptions,
};

use crate::config::{resolve_train, FileConfig, ModelArgs, ModelSettings, TrainArgs, VocabSize};
use crate::report::{load_corpus, sha256_hex, Envelope, InputDigest};

/// What a command produced: the JSON report, its terminal table, extra files.
pub struct Output {
    pub passed: Option<bool>,
    pub json: String,
    pub table: String,
    pub files: Vec<(String, String)>,
}

fn reports_table(reports: &[&CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "{}", r.summary());
        for n in &r.notes {
            let _ = writeln!(s, "     note: {n}");
        }
    }
    s
}

#[derive(Debug, Args)]
pub struct CheckInvarianceArgs {
    /// Corpus file, one document per line. Defaults to the bundled demo corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random parameter draws per check.
    #[arg(long)]
    pub cases: Option<usize>,
    /// Negative control: leave learned position tables unflipped.
    #[arg(long)]
    pub no_flip: bool,
    /// BPE target vocabulary, or `alphabet` for character level.
    #[arg(long)]
    pub vocab_size: Option<VocabSize>,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Serialize)]
struct CheckInvarianceConfig {
    model: ModelSettings,
    cases: usize,
    no_flip: bool,
    vocab_size: VocabSize,
    parallel: bool,
}

pub fn check_invariance(args: &CheckInvarianceArgs, file: &FileConfig) -> anyhow::Result<Output> {
    let (corpus, digest) = load_corpus(args.corpus.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let cfg = CheckInvarianceConfig {
        model: ModelSettings::resolve(&args.model, &file.model, &PosMode::ALL)?,
        cases: args.cases.or(file.cases).unwrap_or(10),
        no_flip: args.no_flip,
        vocab_size: args
            .vocab_size
            .or(file.vocab_size)
            .unwrap_or(VocabSize::ALPHABET),
        parallel: args.parallel || file.parallel.unwrap_or(false),
    };
    let mut reports = Vec::new();
    let mut stability = BTreeMap::new();
    for &mode in &cfg.model.pos_modes {
        let opts = InvarianceOptions {
            parallel: cfg.parallel,
            disable_flip: cfg.no_flip,
            target_vocab: cfg.vocab_size.target(),
        };
        let inv =
            check_reversal_invariance(&cfg.model.config(1, mode), seed, &corpus, cfg.cases, &opts)?;
        let model = cfg.model.config(inv.vocab_size, mode);
        let eq_opts = EquivarianceOptions {
            parallel: cfg.parallel,
            ..Default::default()
        };
        reports.push(check_perm_equivariance(&model, seed, cfg.cases, &eq_opts)?);
        reports.push(inv.report);
        stability.insert(mode.as_str(), inv.stability);
    }
    let passed = reports.iter().all(|r| r.passed);
    let env = Envelope {
        command: "check-invariance",
        version: revlab::VERSION,
        seed: Some(seed),
        config: &cfg,
        inputs: BTreeMap::from([("corpus", digest)]),
        passed: Some(passed),
        result: json!({ "reports": reports, "tokenizer_stability": stability }),
    };
    let json = env.to_json()?;
    Ok(Output {
        passed: Some(passed),
        table: reports_table(&reports.iter().collect::<Vec<_>>()),
        files: vec![("check-invariance.json".into(), json.clone())],
        json,
    })
}

#[derive(Debug, Args)]
pub struct TokenizerStabilityArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// BPE target vocabulary, or `alphabet` for character level.
    #[arg(long)]
    pub vocab_size: Option<VocabSize>,
    /// Violating documents listed in the report.
    #[arg(long, default_value_t = 5)]
    pub max_violations: usize,
}

pub fn tokenizer_stability(
    args: &TokenizerStabilityArgs,
    file: &FileConfig,
) -> anyhow::Result<Output> {
    let (corpus, digest) = load_corpus(args.corpus.as_deref())?;
    let vocab = args
        .vocab_size
        .or(file.vocab_size)
        .unwrap_or(VocabSize::ALPHABET);
    let (pair, stats) = match vocab.target() {
        Some(target) => {
            let (forward, fwd_stats) = train_bpe_with_stats(&corpus, target)?;
            let (reverse, rev_stats) = train_bpe_with_stats(&reverse_corpus(&corpus), target)?;
            let bijection = propose_reversal_bijection(&forward, &reverse);
            (
                TokenizerPair {
                    forward,
                    reverse,
                    bijection,
                },
                Some((fwd_stats, rev_stats)),
            )
        }
        None => {
            if corpus.is_empty() {
                return Err(revlab::Error::EmptyCorpus.into());
            }
            (TokenizerPair::character_level(&corpus), None)
        }
    };
    let report = stability_report(
        &pair.forward,
        &pair.reverse,
        &pair.bijection,
        &corpus,
        args.max_violations,
    )?;
    let config = json!({ "vocab_size": vocab, "max_violations": args.max_violations });
    let env = Envelope {
        command: "tokenizer-stability",
        version: revlab::VERSION,
        seed: None,
        config: &config,
        inputs: BTreeMap::from([("corpus", digest)]),
        passed: None,
        result: json!({
            "report": report,
            "forward_vocab_size": pair.forward.vocab_size(),
            "reverse_vocab_size": pair.reverse.vocab_size(),
            "training_stats": stats.map(|(f, r)| json!({ "forward": f, "reverse": r })),
        }),
    };
    let json = env.to_json()?;
    Ok(Output {
        passed: None,
        table: report.to_table(),
        files: vec![
            ("tokenizer-stability.json".into(), json.clone()),
            (
                "tokenizer_forward.json".into(),
                pair.forward.to_json()? + "\n",
            ),
            (
                "tokenizer_reverse.json".into(),
                pair.reverse.to_json()? + "\n",
            ),
        ],
        json,
    })
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    /// Chain spec as JSON: `{"states": [...], "transition": [[...], ...]}`.
    #[arg(long, conflicts_with = "corpus")]
    pub chain: Option<PathBuf>,
    /// Estimate from a corpus instead (defaults to the bundled demo corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// n-gram order of the estimator.
    #[arg(long)]
    pub order: Option<usize>,
    /// Add-lambda smoothing of the estimator.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<VocabSize>,
    /// Longest path length for the brute-force table.
    #[arg(long)]
    pub max_n: Option<usize>,
}

pub fn divergence(args: &DivergenceArgs, file: &FileConfig) -> anyhow::Result<Output> {
    match &args.chain {
        Some(path) => divergence_chain(path, args, file),
        None => divergence_corpus(args, file),
    }
}

fn divergence_chain(
    path: &std::path::Path,
    args: &DivergenceArgs,
    file: &FileConfig,
) -> anyhow::Result<Output> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read chain {}", path.display()))?;
    let digest = InputDigest {
        source: "file".into(),
        sha256: sha256_hex(text.as_bytes()),
        bytes: text.len(),
    };
    let mc = MarkovChain::<f64>::from_json(&text)?;
    let max_n = args.max_n.or(file.divergence.max_n).unwrap_or(10);
    let h = entropy_rate(&mc);
    let a = time_reversal_divergence(&mc);
    let mut table = Vec::new();
    for n in 1..=max_n {
        let paths = (mc.n_states() as f64).powi(n as i32);
        if paths > ENUMERATION_GUARD as f64 {
            break;
        }
        let rate = path_kl_bruteforce(&mc, n)?;
        let gap = if a > 0.0 && a.is_finite() {
            (rate - a).abs() / a
        } else {
            (rate - a).abs()
        };
        table.push(json!({ "n": n, "rate_nats": rate, "relative_gap": gap }));
    }
    let config = json!({ "max_n": max_n });
    let result = json!({
        "states": mc.labels(),
        "stationary": mc.stationary(),
        "h_nats": h,
        "h_bits": nats_to_bits(h),
        "perplexity_floor": perplexity_floor(h)?,
        "A_nats": a,
        "A_bits": nats_to_bits(a),
        "A_finite": a.is_finite(),
        "detailed_balance": mc.satisfies_detailed_balance(1e-12),
        "brute_force": table,
    });
    let mut t = String::new();
    let _ = writeln!(t, "{:<18} {:>14}", "quantity", "value");
    let _ = writeln!(t, "{:<18} {:>14.9}", "h (nats)", h);
    let _ = writeln!(
        t,
        "{:<18} {:>14.9}",
        "perplexity floor",
        perplexity_floor(h)?
    );
    let _ = writeln!(t, "{:<18} {:>14.9}", "A (nats)", a);
    let _ = writeln!(t, "\n{:>3} {:>14} {:>12}", "n", "path KL / n", "rel. gap");
    for row in result["brute_force"].as_array().into_iter().flatten() {
        let _ = writeln!(
            t,
            "{:>3} {:>14.9} {:>12.6}",
            row["n"],
            row["rate_nats"].as_f64().unwrap_or(f64::NAN),
            row["relative_gap"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let env = Envelope {
        command: "divergence",
        version: revlab::VERSION,
        seed: None,
        config: &config,
        inputs: BTreeMap::from([("chain", digest)]),
        passed: None,
        result,
    };
    let json = env.to_json()?;
    Ok(Output {
        passed: None,
        table: t,
        files: vec![("divergence.json".into(), json.clone())],
        json,
    })
}

fn divergence_corpus(args: &DivergenceArgs, file: &FileConfig) -> anyhow::Result<Output> {
    let (corpus, digest) = load_corpus(args.corpus.as_deref())?;
    let order = args.order.or(file.divergence.order).unwrap_or(2);
    let lambda = args
        .lambda
        .or(file.divergence.lambda)
        .unwrap_or(DEFAULT_LAMBDA);
    let vocab = args
        .vocab_size
        .or(file.vocab_size)
        .unwrap_or(VocabSize::ALPHABET);
    if corpus.is_empty() {
        return Err(revlab::Error::EmptyCorpus.into());
    }
    let t = match vocab.target() {
        Some(target) => revlab::tokenize::train_bpe(&corpus, target)?,
        None => BpeTokenizer::character_level(&corpus.alphabet()),
    };
    let est = estimate_from_corpus(&t, &corpus, order, lambda)?;
    let name = |id: u32| t.token(id).unwrap_or("<?>").to_string();
    let csv = est.contributions_csv(name);
    let top: Vec<_> = {
        let mut c = est.contributions.clone();
        c.sort_by(|a, b| {
            b.kl_nats
                .total_cmp(&a.kl_nats)
                .then_with(|| a.context.cmp(&b.context))
        });
        c.into_iter()
            .take(10)
            .map(|c| json!({ "context": c.context.iter().map(|&i| name(i)).collect::<Vec<_>>(), "weight": c.weight, "kl_nats": c.kl_nats }))
            .collect()
    };
    let config = json!({ "order": order, "lambda": lambda, "vocab_size": vocab });
    let mut table = String::new();
    let _ = writeln!(table, "{:<18} {:>14}", "quantity", "value");
    let _ = writeln!(table, "{:<18} {:>14.9}", "h (nats)", est.h_nats);
    let _ = writeln!(table, "{:<18} {:>14.9}", "A (nats)", est.a_nats);
    let _ = writeln!(table, "{:<18} {:>14}", "tokens", est.token_count);
    let _ = writeln!(table, "{:<18} {:>14}", "contexts", est.n_contexts);
    for w in &est.warnings {
        let _ = writeln!(table, "warning: {w}");
    }
    let env = Envelope {
        command: "divergence",
        version: revlab::VERSION,
        seed: None,
        config: &config,
        inputs: BTreeMap::from([("corpus", digest)]),
        passed: None,
        result: json!({ "estimate": est, "top_contributions": top }),
    };
    let json = env.to_json()?;
    Ok(Output {
        passed: None,
        table,
        files: vec![
            ("divergence.json".into(), json.clone()),
            ("contributions.csv".into(), csv),
        ],
        json,
    })
}

#[derive(Debug, Args)]
pub struct MatchedTrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<VocabSize>,
    /// Also compare independently seeded forward and reversed runs.
    #[arg(long)]
    pub independent: bool,
    /// Seeds per side for the independent comparison.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Serialize)]
struct MatchedConfig {
    model: ModelSettings,
    train: revlab::verify::TrainConfig,
    vocab_size: VocabSize,
    independent: bool,
    seeds: usize,
}

pub fn matched_train(args: &MatchedTrainArgs, file: &FileConfig) -> anyhow::Result<Output> {
    let (corpus, digest) = load_corpus(args.corpus.as_deref())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let cfg = MatchedConfig {
        model: ModelSettings::resolve(&args.model, &file.model, &[PosMode::Rotary])?,
        train: resolve_train(&args.train, &file.train, seed)?,
        vocab_size: args
            .vocab_size
            .or(file.vocab_size)
            .unwrap_or(VocabSize::ALPHABET),
        independent: args.independent,
        seeds: args.seeds.or(file.train.seeds).unwrap_or(5),
    };
    if cfg.independent && cfg.seeds < 3 {
        bail!(
            "independent comparison needs at least 3 seeds, got {}",
            cfg.seeds
        );
    }
    let parallel = args.parallel || file.parallel.unwrap_or(false);
    let mut files = Vec::new();
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut runs = Vec::new();
    for &mode in &cfg.model.pos_modes {
        let opts = MatchedOptions {
            target_vocab: cfg.vocab_size.target(),
            ..Default::default()
        };
        let out = matched_training_check(&cfg.model.config(1, mode), &cfg.train, &corpus, &opts)?;
        files.push((
            format!("matched_curve_{}.csv", mode.as_str()),
            out.curve_csv(),
        ));
        let final_discrepancy = out.curve.last().map_or(0.0, |p| p.param_discrepancy);
        let max_grad = out
            .curve
            .iter()
            .fold(0.0_f64, |m, p| m.max(p.grad_discrepancy));
        reports.extend(out.reports().into_iter().cloned());
        runs.push(json!({
            "pos_mode": mode,
            "final_param_discrepancy": final_discrepancy,
            "max_grad_discrepancy": max_grad,
            "final_loss_a": out.curve.last().map(|p| p.loss_a),
            "final_loss_b": out.curve.last().map(|p| p.loss_b),
        }));
        if cfg.independent {
            let ind = independent_curves_comparison(
                &cfg.model.config(1, mode),
                &cfg.train,
                &corpus,
                cfg.seeds,
                cfg.vocab_size.target(),
                parallel,
            )?;
            runs.push(json!({
                "pos_mode": mode,
                "final_forward": ind.final_forward,
                "final_reversed": ind.final_reversed,
            }));
            reports.push(ind.report);
        }
    }
    let passed = reports.iter().all(|r| r.passed);
    let env = Envelope {
        command: "matched-train",
        version: revlab::VERSION,
        seed: Some(seed),
        config: &cfg,
        inputs: BTreeMap::from([("corpus", digest)]),
        passed: Some(passed),
        result: json!({ "reports": reports, "runs": runs }),
    };
    let json = env.to_json()?;
    files.insert(0, ("matched-train.json".into(), json.clone()));
    Ok(Output {
        passed: Some(passed),
        table: reports_table(&reports.iter().collect::<Vec<_>>()),
        files,
        json,
    })
}
