//! Forward and backward passes of the decoder.
//!
//! Architecture per layer (pre-norm):
//! `x += Attn(LN1(x))`, `x += W_out · gelu(W_in · LN2(x) + b_in) + b_out`,
//! followed by a final LayerNorm and the unembedding `logits = h · Wᵀ`.
//!
//! Two evaluation directions share the same weights:
//!
//! * `Standard`: causal mask, slot `i` has position `i`, slot `i` predicts
//!   the token in slot `i + 1`.
//! * `Mirror`: anti-causal mask (slot `i` sees slots `i..m`), slot `i` has
//!   position `m - 1 - i`, slot `i` predicts the token in slot `i - 1`.
//!   Learned absolute embeddings are read through the index flip
//!   `max_len - 1 - position`.
//!
//! Attention always visits keys in order of increasing position, so the
//! mirror pass over a reversed sequence performs the same arithmetic as the
//! standard pass over the original sequence.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, PosMode};
use super::params::{ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqcore::Corpus;
use crate::seqcore::TokenSeq;
use crate::tokenize::BpeTokenizer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDirection {
    #[default]
    Standard,
    Mirror,
}

struct Layout {
    positions: Vec<usize>,
    table_rows: Vec<usize>,
    /// Visible key slots per query slot, in summation order.
    visible: Vec<Vec<usize>>,
    /// `(slot, target slot)` for each emitted row.
    predict: Vec<(usize, usize)>,
}

impl Layout {
    fn new(m: usize, max_len: usize, dir: EvalDirection) -> Self {
        match dir {
            EvalDirection::Standard => Layout {
                positions: (0..m).collect(),
                table_rows: (0..m).collect(),
                visible: (0..m).map(|i| (0..=i).collect()).collect(),
                predict: (0..m.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
            },
            EvalDirection::Mirror => Layout {
                positions: (0..m).map(|i| m - 1 - i).collect(),
                table_rows: (0..m).map(|i| max_len - m + i).collect(),
                visible: (0..m).map(|i| (i..m).rev().collect()).collect(),
                predict: (1..m).map(|i| (i, i - 1)).collect(),
            },
        }
    }
}

fn validate(cfg: &ModelConfig, z: &TokenSeq, min_len: usize) -> Result<()> {
    if z.len() < min_len || z.len() > cfg.max_len {
        if min_len >= 2 && z.len() < 2 {
            return Err(Error::NothingToPredict(z.len()));
        }
        return Err(Error::Length {
            len: z.len(),
            min: min_len,
            max: cfg.max_len,
        });
    }
    if let Some(id) = z.iter().find(|&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

// ---- dense helpers -------------------------------------------------------

/// `x [m, a] · w [a, b]`
fn matmul<T: Scalar>(x: &[T], m: usize, a: usize, w: &[T], b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * b];
    for i in 0..m {
        let xi = &x[i * a..(i + 1) * a];
        let oi = &mut out[i * b..(i + 1) * b];
        for (k, &xik) in xi.iter().enumerate() {
            let wk = &w[k * b..(k + 1) * b];
            for (o, &wkj) in oi.iter_mut().zip(wk) {
                *o += xik * wkj;
            }
        }
    }
    out
}

/// Backward of [`matmul`]: accumulates `dw` and returns `dx`.
fn matmul_back<T: Scalar>(
    dy: &[T],
    x: &[T],
    m: usize,
    a: usize,
    w: &[T],
    b: usize,
    dw: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); m * a];
    for i in 0..m {
        let dyi = &dy[i * b..(i + 1) * b];
        let xi = &x[i * a..(i + 1) * a];
        for k in 0..a {
            let wk = &w[k * b..(k + 1) * b];
            let dwk = &mut dw[k * b..(k + 1) * b];
            let xik = xi[k];
            let mut acc = T::zero();
            for j in 0..b {
                dwk[j] += xik * dyi[j];
                acc += dyi[j] * wk[j];
            }
            dx[i * a + k] = acc;
        }
    }
    dx
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(
    x: &[T],
    m: usize,
    d: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, LnCache<T>) {
    let eps = T::of(ModelConfig::LN_EPS);
    let dn = T::of(d as f64);
    let mut out = vec![T::zero(); m * d];
    let mut xhat = vec![T::zero(); m * d];
    let mut rstd = vec![T::zero(); m];
    for i in 0..m {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().copied().sum::<T>() / dn;
        let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (xi[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = gain[j] * h + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_back<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    m: usize,
    d: usize,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); m * d];
    for i in 0..m {
        let mut dxhat = vec![T::zero(); d];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for j in 0..d {
            let g = dy[i * d + j];
            let h = cache.xhat[i * d + j];
            dgain[j] += g * h;
            dbias[j] += g;
            dxhat[j] = g * gain[j];
            mean_g += dxhat[j];
            mean_gx += dxhat[j] * h;
        }
        mean_g /= dn;
        mean_gx /= dn;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dxhat[j] - mean_g - cache.xhat[i * d + j] * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let t = (T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x)).tanh();
    half * x * (T::one() + t)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Rotates consecutive pairs of every head in `row` by `pos * freq`.
/// `sign` = -1 applies the inverse rotation.
fn rotate<T: Scalar>(row: &mut [T], pos: usize, n_heads: usize, dh: usize, sign: f64) {
    for h in 0..n_heads {
        for p in 0..dh / 2 {
            let freq = ModelConfig::ROPE_BASE.powf(-2.0 * p as f64 / dh as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::of(sign * s), T::of(c));
            let i0 = h * dh + 2 * p;
            let (x0, x1) = (row[i0], row[i0 + 1]);
            row[i0] = x0 * c - x1 * s;
            row[i0 + 1] = x0 * s + x1 * c;
        }
    }
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

// ---- forward with trace ----------------------------------------------------

struct LayerTrace<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head][query slot][visible index]`
    probs: Vec<Vec<Vec<T>>>,
    o: Vec<T>,
    ln2: LnCache<T>,
    c: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
    /// Log-probability rows, one per prediction.
    logp: Vec<Vec<T>>,
}

fn unembedding<T: Scalar>(p: &ModelParams<T>) -> &Tensor<T> {
    p.unembed.as_ref().unwrap_or(&p.embed)
}

fn rel_index(cfg: &ModelConfig, q_pos: usize, k_pos: usize) -> usize {
    // offset clipped to ±(max_len - 1) by construction of positions
    (q_pos as isize - k_pos as isize + cfg.max_len as isize - 1) as usize
}

fn run<T: Scalar>(p: &ModelParams<T>, cfg: &ModelConfig, z: &TokenSeq, lay: &Layout) -> Trace<T> {
    let m = z.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let f = cfg.d_ff();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut x = vec![T::zero(); m * d];
    for (i, id) in z.iter().enumerate() {
        let e = p.embed.row(id as usize);
        let xi = &mut x[i * d..(i + 1) * d];
        xi.copy_from_slice(e);
        if let (PosMode::LearnedAbsolute, Some(pt)) = (cfg.pos_mode, &p.pos) {
            for (xv, &pv) in xi.iter_mut().zip(pt.row(lay.table_rows[i])) {
                *xv += pv;
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for blk in &p.blocks {
        let (a, ln1) = layer_norm(&x, m, d, &blk.ln1_gain.data, &blk.ln1_bias.data);
        let mut q = matmul(&a, m, d, &blk.wq.data, d);
        let mut k = matmul(&a, m, d, &blk.wk.data, d);
        let v = matmul(&a, m, d, &blk.wv.data, d);
        if cfg.pos_mode == PosMode::Rotary {
            for i in 0..m {
                rotate(&mut q[i * d..(i + 1) * d], lay.positions[i], nh, dh, 1.0);
                rotate(&mut k[i * d..(i + 1) * d], lay.positions[i], nh, dh, 1.0);
            }
        }
        let mut o = vec![T::zero(); m * d];
        let mut probs = vec![Vec::with_capacity(m); nh];
        for (h, probs_h) in probs.iter_mut().enumerate() {
            let hs = h * dh;
            for i in 0..m {
                let qi = &q[i * d + hs..i * d + hs + dh];
                let mut scores: Vec<T> = lay.visible[i]
                    .iter()
                    .map(|&j| {
                        let kj = &k[j * d + hs..j * d + hs + dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += qi[t] * kj[t];
                        }
                        s *= scale;
                        if let (PosMode::RelativeBias, Some(rb)) = (cfg.pos_mode, &p.rel_bias) {
                            s += rb.row(h)[rel_index(cfg, lay.positions[i], lay.positions[j])];
                        }
                        s
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                let oi = &mut o[i * d + hs..i * d + hs + dh];
                for (&j, &pj) in lay.visible[i].iter().zip(&scores) {
                    let vj = &v[j * d + hs..j * d + hs + dh];
                    for t in 0..dh {
                        oi[t] += pj * vj[t];
                    }
                }
                probs_h.push(scores);
            }
        }
        let y = matmul(&o, m, d, &blk.wo.data, d);
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += *yv;
        }
        let (c, ln2) = layer_norm(&x, m, d, &blk.ln2_gain.data, &blk.ln2_bias.data);
        let mut u = matmul(&c, m, d, &blk.w_in.data, f);
        for i in 0..m {
            for (uv, &b) in u[i * f..(i + 1) * f].iter_mut().zip(&blk.b_in.data) {
                *uv += b;
            }
        }
        let g: Vec<T> = u.iter().map(|&t| gelu(t)).collect();
        let out = matmul(&g, m, f, &blk.w_out.data, d);
        for i in 0..m {
            for j in 0..d {
                x[i * d + j] += out[i * d + j] + blk.b_out.data[j];
            }
        }
        layers.push(LayerTrace {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            c,
            u,
            g,
        });
    }

    let (hf, lnf) = layer_norm(&x, m, d, &p.lnf_gain.data, &p.lnf_bias.data);
    let w = unembedding(p);
    let logp = lay
        .predict
        .iter()
        .map(|&(slot, _)| {
            let hs = &hf[slot * d..(slot + 1) * d];
            let logits: Vec<T> = (0..cfg.vocab_size)
                .map(|tok| {
                    let wr = w.row(tok);
                    let mut s = T::zero();
                    for t in 0..d {
                        s += hs[t] * wr[t];
                    }
                    s
                })
                .collect();
            log_softmax(&logits)
        })
        .collect();
    Trace {
        layers,
        lnf,
        hf,
        logp,
    }
}

/// Accumulates into `grads` the gradient of `weight * Σ_rows -log p(target)`.
fn backward<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &TokenSeq,
    lay: &Layout,
    tr: &Trace<T>,
    weight: T,
    grads: &mut ModelParams<T>,
) {
    let m = z.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let f = cfg.d_ff();
    let scale = T::one() / T::of(dh as f64).sqrt();

    let ModelParams {
        embed: g_embed,
        unembed: g_unembed,
        pos: g_pos,
        rel_bias: g_rel,
        blocks: g_blocks,
        lnf_gain: g_lnf_gain,
        lnf_bias: g_lnf_bias,
    } = grads;

    // unembedding
    let w = unembedding(p);
    let mut dhf = vec![T::zero(); m * d];
    {
        let dw = match g_unembed.as_mut() {
            Some(t) => t,
            None => &mut *g_embed,
        };
        for (row, &(slot, target)) in tr.logp.iter().zip(&lay.predict) {
            let target_id = z.ids()[target] as usize;
            let hs = &tr.hf[slot * d..(slot + 1) * d];
            let dh_slot = &mut dhf[slot * d..(slot + 1) * d];
            for (tok, &lp) in row.iter().enumerate() {
                let mut g = lp.exp();
                if tok == target_id {
                    g -= T::one();
                }
                g *= weight;
                let wr = w.row(tok);
                let dwr = dw.row_mut(tok);
                for t in 0..d {
                    dwr[t] += g * hs[t];
                    dh_slot[t] += g * wr[t];
                }
            }
        }
    }
    let mut dx = layer_norm_back(
        &dhf,
        &tr.lnf,
        m,
        d,
        &p.lnf_gain.data,
        &mut g_lnf_gain.data,
        &mut g_lnf_bias.data,
    );

    for (li, blk) in p.blocks.iter().enumerate().rev() {
        let lt = &tr.layers[li];
        let gb = &mut g_blocks[li];

        // MLP
        for i in 0..m {
            for j in 0..d {
                gb.b_out.data[j] += dx[i * d + j];
            }
        }
        let mut du = matmul_back(&dx, &lt.g, m, f, &blk.w_out.data, d, &mut gb.w_out.data);
        for (duv, &uv) in du.iter_mut().zip(&lt.u) {
            *duv *= gelu_grad(uv);
        }
        for i in 0..m {
            for j in 0..f {
                gb.b_in.data[j] += du[i * f + j];
            }
        }
        let dc = matmul_back(&du, &lt.c, m, d, &blk.w_in.data, f, &mut gb.w_in.data);
        let dmid = layer_norm_back(
            &dc,
            &lt.ln2,
            m,
            d,
            &blk.ln2_gain.data,
            &mut gb.ln2_gain.data,
            &mut gb.ln2_bias.data,
        );
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += *b;
        }

        // attention
        let d_o = matmul_back(&dx, &lt.o, m, d, &blk.wo.data, d, &mut gb.wo.data);
        let mut dq = vec![T::zero(); m * d];
        let mut dk = vec![T::zero(); m * d];
        let mut dv = vec![T::zero(); m * d];
        for h in 0..nh {
            let hs = h * dh;
            for i in 0..m {
                let probs = &lt.probs[h][i];
                let doi = &d_o[i * d + hs..i * d + hs + dh];
                let dp: Vec<T> = lay.visible[i]
                    .iter()
                    .map(|&j| {
                        let vj = &lt.v[j * d + hs..j * d + hs + dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += doi[t] * vj[t];
                        }
                        s
                    })
                    .collect();
                let mut sdp = T::zero();
                for (&pj, &dpj) in probs.iter().zip(&dp) {
                    sdp += pj * dpj;
                }
                for ((&j, &pj), &dpj) in lay.visible[i].iter().zip(probs).zip(&dp) {
                    for t in 0..dh {
                        dv[j * d + hs + t] += pj * doi[t];
                    }
                    let ds = pj * (dpj - sdp);
                    if let Some(rb) = g_rel.as_mut() {
                        rb.row_mut(h)[rel_index(cfg, lay.positions[i], lay.positions[j])] += ds;
                    }
                    let dss = ds * scale;
                    for t in 0..dh {
                        dq[i * d + hs + t] += dss * lt.k[j * d + hs + t];
                        dk[j * d + hs + t] += dss * lt.q[i * d + hs + t];
                    }
                }
            }
        }
        if cfg.pos_mode == PosMode::Rotary {
            for i in 0..m {
                rotate(&mut dq[i * d..(i + 1) * d], lay.positions[i], nh, dh, -1.0);
                rotate(&mut dk[i * d..(i + 1) * d], lay.positions[i], nh, dh, -1.0);
            }
        }
        let da_q = matmul_back(&dq, &lt.a, m, d, &blk.wq.data, d, &mut gb.wq.data);
        let da_k = matmul_back(&dk, &lt.a, m, d, &blk.wk.data, d, &mut gb.wk.data);
        let da_v = matmul_back(&dv, &lt.a, m, d, &blk.wv.data, d, &mut gb.wv.data);
        let da: Vec<T> = (0..m * d).map(|i| da_q[i] + da_k[i] + da_v[i]).collect();
        let din = layer_norm_back(
            &da,
            &lt.ln1,
            m,
            d,
            &blk.ln1_gain.data,
            &mut gb.ln1_gain.data,
            &mut gb.ln1_bias.data,
        );
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += *b;
        }
    }

    // embeddings
    for (i, id) in z.iter().enumerate() {
        let dxi = &dx[i * d..(i + 1) * d];
        for (g, &v) in g_embed.row_mut(id as usize).iter_mut().zip(dxi) {
            *g += v;
        }
        if let Some(pt) = g_pos.as_mut() {
            for (g, &v) in pt.row_mut(lay.table_rows[i]).iter_mut().zip(dxi) {
                *g += v;
            }
        }
    }
}

// ---- public API ------------------------------------------------------------

/// Per-position next-token log-probability rows.
///
/// Standard: row `k` is `log p(· | z_0..=z_k)` for `k` in `0..m-1`.
/// Mirror: row `k` belongs to slot `k + 1` and predicts the token in slot `k`.
/// A length-1 sequence yields no rows.
pub fn forward_logprobs<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &TokenSeq,
    dir: EvalDirection,
) -> Result<Vec<Vec<T>>> {
    validate(cfg, z, 1)?;
    let lay = Layout::new(z.len(), cfg.max_len, dir);
    Ok(run(p, cfg, z, &lay).logp)
}

/// Log-probabilities of the realized targets, one per emitted row.
pub fn target_logprobs<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &TokenSeq,
    dir: EvalDirection,
) -> Result<Vec<T>> {
    validate(cfg, z, 1)?;
    let lay = Layout::new(z.len(), cfg.max_len, dir);
    let tr = run(p, cfg, z, &lay);
    Ok(tr
        .logp
        .iter()
        .zip(&lay.predict)
        .map(|(row, &(_, target))| row[z.ids()[target] as usize])
        .collect())
}

/// Negative log-likelihood of `z` in nats.
pub fn sequence_nll<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &TokenSeq,
    dir: EvalDirection,
) -> Result<T> {
    validate(cfg, z, 2)?;
    let mut nll = T::zero();
    for lp in target_logprobs(p, cfg, z, dir)? {
        nll -= lp;
    }
    Ok(nll)
}

/// Encodes every document of `d` with `t`.
pub fn encode_corpus(t: &BpeTokenizer, d: &Corpus) -> Result<Vec<TokenSeq>> {
    d.iter()
        .enumerate()
        .map(|(i, s)| t.encode(s).map_err(|e| e.in_document(i)))
        .collect()
}

/// Per-document NLLs in corpus order.
pub fn document_nlls<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    seqs: &[TokenSeq],
    dir: EvalDirection,
) -> Result<Vec<T>> {
    seqs.iter()
        .enumerate()
        .map(|(i, z)| sequence_nll(p, cfg, z, dir).map_err(|e| e.in_document(i)))
        .collect()
}

/// Mean per-document NLL over the multiset `d`.
pub fn corpus_nll<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    t: &BpeTokenizer,
    d: &Corpus,
    dir: EvalDirection,
) -> Result<T> {
    if d.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let seqs = encode_corpus(t, d)?;
    let nlls = document_nlls(p, cfg, &seqs, dir)?;
    let mut sum = T::zero();
    for v in &nlls {
        sum += *v;
    }
    Ok(sum / T::of(nlls.len() as f64))
}

/// Mean NLL per predicted token over `seqs` and its gradient.
pub fn loss_and_grad<T: Scalar>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    seqs: &[TokenSeq],
    dir: EvalDirection,
) -> Result<(T, ModelParams<T>)> {
    let n_pred: usize = seqs.iter().map(|z| z.len().saturating_sub(1)).sum();
    if n_pred == 0 {
        return Err(Error::NothingToPredict(0));
    }
    let weight = T::one() / T::of(n_pred as f64);
    let mut grads = p.zeros_like();
    let mut total = T::zero();
    for (i, z) in seqs.iter().enumerate() {
        validate(cfg, z, 2).map_err(|e| e.in_document(i))?;
        let lay = Layout::new(z.len(), cfg.max_len, dir);
        let tr = run(p, cfg, z, &lay);
        for (row, &(_, target)) in tr.logp.iter().zip(&lay.predict) {
            total -= row[z.ids()[target] as usize];
        }
        backward(p, cfg, z, &lay, &tr, weight, &mut grads);
    }
    Ok((total * weight, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::reparam::{apply_param_map, ParamMap};
    use crate::seqcore::reverse_tokens;

    fn cfg(mode: PosMode, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_len: 16,
            pos_mode: mode,
            tie_embeddings: tied,
        }
    }

    fn seq() -> TokenSeq {
        TokenSeq(vec![0, 3, 1, 4, 4, 2, 0, 1])
    }

    #[test]
    fn rows_are_normalized() {
        for mode in PosMode::ALL {
            let c = cfg(mode, false);
            let p = init_params::<f64>(&c, 3).unwrap();
            for dir in [EvalDirection::Standard, EvalDirection::Mirror] {
                let rows = forward_logprobs(&p, &c, &seq(), dir).unwrap();
                assert_eq!(rows.len(), seq().len() - 1);
                for r in rows {
                    let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
                    assert!(lse.abs() <= 1e-12, "{mode} {dir:?}: {lse}");
                }
            }
        }
    }

    #[test]
    fn causal_and_anti_causal_masks() {
        for mode in PosMode::ALL {
            let c = cfg(mode, false);
            let p = init_params::<f64>(&c, 5).unwrap();
            let z = seq();
            let mut late = z.clone();
            *late.0.last_mut().unwrap() = 2;
            let a = forward_logprobs(&p, &c, &z, EvalDirection::Standard).unwrap();
            let b = forward_logprobs(&p, &c, &late, EvalDirection::Standard).unwrap();
            // rows before the last slot never see it
            assert_eq!(a, b);

            let mut early = z.clone();
            early.0[0] = 2;
            let a = forward_logprobs(&p, &c, &z, EvalDirection::Mirror).unwrap();
            let b = forward_logprobs(&p, &c, &early, EvalDirection::Mirror).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn short_sequences() {
        let c = cfg(PosMode::Rotary, false);
        let p = init_params::<f64>(&c, 1).unwrap();
        assert!(
            forward_logprobs(&p, &c, &TokenSeq(vec![2]), EvalDirection::Standard)
                .unwrap()
                .is_empty()
        );
        assert!(matches!(
            sequence_nll(&p, &c, &TokenSeq(vec![2]), EvalDirection::Standard),
            Err(Error::NothingToPredict(1))
        ));
        assert!(forward_logprobs(&p, &c, &TokenSeq(vec![]), EvalDirection::Standard).is_err());
        assert!(forward_logprobs(&p, &c, &TokenSeq(vec![9, 1]), EvalDirection::Standard).is_err());
        assert!(forward_logprobs(&p, &c, &TokenSeq(vec![0; 17]), EvalDirection::Standard).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_predictions() {
        for mode in PosMode::ALL {
            let c = cfg(mode, false);
            let p = ModelParams::<f64>::zeros(&c).unwrap();
            let nll = sequence_nll(&p, &c, &seq(), EvalDirection::Standard).unwrap();
            let expected = 7.0 * 5f64.ln();
            assert!((nll - expected).abs() < 1e-12, "{mode}: {nll}");
        }
    }

    #[test]
    fn mirror_pass_reproduces_standard_pass() {
        for mode in PosMode::ALL {
            for tied in [false, true] {
                let c = cfg(mode, tied);
                let p = init_params::<f64>(&c, 11).unwrap();
                let psi = ParamMap::new((0..5).collect(), true).unwrap();
                let q = apply_param_map(&psi, &p, &c).unwrap();
                let z = seq();
                let fwd = sequence_nll(&p, &c, &z, EvalDirection::Standard).unwrap();
                let mir = sequence_nll(&q, &c, &reverse_tokens(&z), EvalDirection::Mirror).unwrap();
                assert!(
                    (fwd - mir).abs() <= 1e-9,
                    "{mode} tied={tied}: {fwd} vs {mir}"
                );
            }
        }
    }

    #[test]
    fn absolute_positions_need_the_flip() {
        let c = cfg(PosMode::LearnedAbsolute, false);
        let p = init_params::<f64>(&c, 11).unwrap();
        let z = seq();
        let fwd = sequence_nll(&p, &c, &z, EvalDirection::Standard).unwrap();
        let mir = sequence_nll(&p, &c, &reverse_tokens(&z), EvalDirection::Mirror).unwrap();
        assert!((fwd - mir).abs() > 1e-3);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let c = cfg(PosMode::RelativeBias, true);
        let p = init_params::<f64>(&c, 2).unwrap();
        let a = forward_logprobs(&p, &c, &seq(), EvalDirection::Standard).unwrap();
        let b = forward_logprobs(&p, &c, &seq(), EvalDirection::Standard).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_nll_averages_documents() {
        let t = BpeTokenizer::character_level(&['a', 'b']);
        let c = ModelConfig {
            vocab_size: 2,
            ..cfg(PosMode::Rotary, false)
        };
        let p = init_params::<f64>(&c, 4).unwrap();
        let one = Corpus::new(vec!["abba"]);
        let two = Corpus::new(vec!["abba", "abba"]);
        let mixed = Corpus::new(vec!["abba", "ba"]);
        let s = |d: &Corpus| corpus_nll(&p, &c, &t, d, EvalDirection::Standard).unwrap();
        let single =
            sequence_nll(&p, &c, &t.encode("abba").unwrap(), EvalDirection::Standard).unwrap();
        let short =
            sequence_nll(&p, &c, &t.encode("ba").unwrap(), EvalDirection::Standard).unwrap();
        assert_eq!(s(&one), single);
        assert_eq!(s(&two), single);
        assert!((s(&mixed) - 0.5 * (single + short)).abs() < 1e-15);
        assert!(matches!(
            corpus_nll(
                &p,
                &c,
                &t,
                &Corpus::new(Vec::<String>::new()),
                EvalDirection::Standard
            ),
            Err(Error::EmptyCorpus)
        ));
        let bad = Corpus::new(vec!["ab", "a"]);
        assert!(matches!(
            corpus_nll(&p, &c, &t, &bad, EvalDirection::Standard),
            Err(Error::Document { index: 1, .. })
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for mode in PosMode::ALL {
            let c = cfg(mode, mode == PosMode::Rotary);
            let p = init_params::<f64>(&c, 8).unwrap();
            let seqs = vec![seq(), TokenSeq(vec![1, 2, 3])];
            for dir in [EvalDirection::Standard, EvalDirection::Mirror] {
                let (_, g) = loss_and_grad(&p, &c, &seqs, dir).unwrap();
                let g = g.flatten();
                for k in (0..g.len()).step_by(37) {
                    let h = 1e-5;
                    let mut plus = p.clone();
                    *plus.entry_mut(k) += h;
                    let mut minus = p.clone();
                    *minus.entry_mut(k) -= h;
                    let fd = (loss_and_grad(&plus, &c, &seqs, dir).unwrap().0
                        - loss_and_grad(&minus, &c, &seqs, dir).unwrap().0)
                        / (2.0 * h);
                    let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-3);
                    assert!(rel <= 1e-6, "{mode} {dir:?} coord {k}: {} vs {fd}", g[k]);
                }
            }
        }
    }

    #[test]
    fn single_precision_smoke() {
        let c = cfg(PosMode::Rotary, false);
        let p = init_params::<f64>(&c, 3).unwrap();
        let p32 = p.cast::<f32>();
        let a = sequence_nll(&p, &c, &seq(), EvalDirection::Standard).unwrap();
        let b = sequence_nll(&p32, &c, &seq(), EvalDirection::Standard).unwrap();
        assert!((a - b as f64).abs() < 1e-3 * a.abs().max(1.0));
    }
}
