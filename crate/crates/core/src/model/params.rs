use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, PosMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[d_model, d_model]`, applied as `x · W`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// `[d_model, d_ff]`
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// `[d_ff, d_model]`
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// Weights of the decoder. The same structure also carries gradients and
/// optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `[vocab_size, d_model]`, one row per token.
    pub embed: Tensor<T>,
    /// `[vocab_size, d_model]`; `None` when tied to `embed`.
    pub unembed: Option<Tensor<T>>,
    /// `[max_len, d_model]`, learned absolute positions only.
    pub pos: Option<Tensor<T>>,
    /// `[n_heads, 2 * max_len - 1]`, indexed by offset `+ max_len - 1`.
    pub rel_bias: Option<Tensor<T>>,
    pub blocks: Vec<Block<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1.bias"), &self.ln1_bias);
        f(format!("{prefix}.attn.wq"), &self.wq);
        f(format!("{prefix}.attn.wk"), &self.wk);
        f(format!("{prefix}.attn.wv"), &self.wv);
        f(format!("{prefix}.attn.wo"), &self.wo);
        f(format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2.bias"), &self.ln2_bias);
        f(format!("{prefix}.mlp.w_in"), &self.w_in);
        f(format!("{prefix}.mlp.b_in"), &self.b_in);
        f(format!("{prefix}.mlp.w_out"), &self.w_out);
        f(format!("{prefix}.mlp.b_out"), &self.b_out);
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters (LayerNorm gains included), which give uniform
    /// next-token distributions.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff());
        let z = |shape: &[usize]| Tensor::zeros(shape);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_gain: z(&[d]),
                ln1_bias: z(&[d]),
                wq: z(&[d, d]),
                wk: z(&[d, d]),
                wv: z(&[d, d]),
                wo: z(&[d, d]),
                ln2_gain: z(&[d]),
                ln2_bias: z(&[d]),
                w_in: z(&[d, f]),
                b_in: z(&[f]),
                w_out: z(&[f, d]),
                b_out: z(&[d]),
            })
            .collect();
        Ok(ModelParams {
            embed: z(&[v, d]),
            unembed: (!cfg.tie_embeddings).then(|| z(&[v, d])),
            pos: (cfg.pos_mode == PosMode::LearnedAbsolute).then(|| z(&[cfg.max_len, d])),
            rel_bias: (cfg.pos_mode == PosMode::RelativeBias)
                .then(|| z(&[cfg.n_heads, 2 * cfg.max_len - 1])),
            blocks,
            lnf_gain: z(&[d]),
            lnf_bias: z(&[d]),
        })
    }

    /// Zero tensors with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|t| t.data.iter_mut().for_each(|x| *x = T::zero()));
        out
    }

    /// Visits every tensor with its canonical name, in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        f("embed".into(), &self.embed);
        if let Some(w) = &self.unembed {
            f("unembed".into(), w);
        }
        if let Some(p) = &self.pos {
            f("pos".into(), p);
        }
        if let Some(b) = &self.rel_bias {
            f("rel_bias".into(), b);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut f);
        }
        f("lnf.gain".into(), &self.lnf_gain);
        f("lnf.bias".into(), &self.lnf_bias);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::visit`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.embed];
        out.extend(self.unembed.as_mut());
        out.extend(self.pos.as_mut());
        out.extend(self.rel_bias.as_mut());
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        for t in self.tensors_mut() {
            f(t);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// Flat copy of every entry in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(|_, t| out.extend_from_slice(&t.data));
        out
    }

    /// Mutable reference to the entry at a flat canonical index.
    pub fn entry_mut(&mut self, mut index: usize) -> &mut T {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        let a: Vec<_> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        let b: Vec<_> = other
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        a == b
    }

    /// `max |self - other|` over all entries; `None` for mismatched layouts.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if !self.same_layout(other) {
            return None;
        }
        let a = self.flatten();
        let b = other.flatten();
        Some(
            a.iter()
                .zip(&b)
                .fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs())),
        )
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.data.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::<T>::zeros(cfg)?;
        if self.same_layout(&expected) {
            Ok(())
        } else {
            Err(Error::Shape(
                "parameters do not match the model config".into(),
            ))
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        ModelParams {
            embed: c(&self.embed),
            unembed: self.unembed.as_ref().map(c),
            pos: self.pos.as_ref().map(c),
            rel_bias: self.rel_bias.as_ref().map(c),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: c(&b.ln1_gain),
                    ln1_bias: c(&b.ln1_bias),
                    wq: c(&b.wq),
                    wk: c(&b.wk),
                    wv: c(&b.wv),
                    wo: c(&b.wo),
                    ln2_gain: c(&b.ln2_gain),
                    ln2_bias: c(&b.ln2_bias),
                    w_in: c(&b.w_in),
                    b_in: c(&b.b_in),
                    w_out: c(&b.w_out),
                    b_out: c(&b.b_out),
                })
                .collect(),
            lnf_gain: c(&self.lnf_gain),
            lnf_bias: c(&self.lnf_bias),
        }
    }
}

/// Seeded initialization: every tensor is drawn uniformly from a symmetric
/// interval around its center, visiting tensors in canonical order with a
/// single ChaCha8 stream.
///
/// | tensor            | center | half-width        |
/// |-------------------|--------|-------------------|
/// | embed, pos        | 0      | 1                 |
/// | unembed           | 0      | 1 / sqrt(d_model) |
/// | rel_bias          | 0      | 0.5               |
/// | weight matrices   | 0      | 1 / sqrt(fan_in)  |
/// | LayerNorm gains   | 1      | 0.1               |
/// | biases            | 0      | 0.1               |
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut p = ModelParams::<T>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model as f64;
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let (center, half) = if name == "embed" || name == "pos" {
            (0.0, 1.0)
        } else if name == "unembed" {
            (0.0, 1.0 / d.sqrt())
        } else if name == "rel_bias" {
            (0.0, 0.5)
        } else if name.ends_with(".gain") {
            (1.0, 0.1)
        } else if t.shape.len() == 2 {
            (0.0, 1.0 / (t.shape[0] as f64).sqrt())
        } else {
            (0.0, 0.1)
        };
        for x in &mut t.data {
            *x = T::of(center + rng.gen_range(-half..half));
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements into the binary container.
    pub offset: usize,
}

/// JSON sidecar describing a flat `f64` little-endian container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsSidecar {
    pub format: String,
    pub dtype: String,
    pub source_dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub const CONTAINER_FORMAT: &str = "revlab-params-v1";

impl<T: Scalar> ModelParams<T> {
    /// Writes the binary container to `bin` and returns its sidecar.
    pub fn write_container<W: Write>(
        &self,
        cfg: &ModelConfig,
        mut bin: W,
    ) -> Result<ParamsSidecar> {
        self.check_shapes(cfg)?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        self.visit(|name, t| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.len();
            for x in &t.data {
                bytes.extend_from_slice(&x.f64().to_le_bytes());
            }
        });
        bin.write_all(&bytes)?;
        Ok(ParamsSidecar {
            format: CONTAINER_FORMAT.into(),
            dtype: "f64-le".into(),
            source_dtype: T::NAME.into(),
            config: cfg.clone(),
            tensors,
        })
    }

    pub fn read_container<R: Read>(sidecar: &ParamsSidecar, mut bin: R) -> Result<Self> {
        if sidecar.format != CONTAINER_FORMAT || sidecar.dtype != "f64-le" {
            return Err(Error::Invalid(format!(
                "unsupported container {} / {}",
                sidecar.format, sidecar.dtype
            )));
        }
        let mut bytes = Vec::new();
        bin.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Shape(
                "container length is not a multiple of 8".into(),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut p = ModelParams::<T>::zeros(&sidecar.config)?;
        let names: Vec<(String, Vec<usize>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names.len() != sidecar.tensors.len() {
            return Err(Error::Shape(
                "sidecar tensor list does not match config".into(),
            ));
        }
        for ((name, shape), (t, entry)) in names
            .iter()
            .zip(p.tensors_mut().into_iter().zip(&sidecar.tensors))
        {
            if name != &entry.name || shape != &entry.shape {
                return Err(Error::Shape(format!(
                    "unexpected tensor {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let end = entry.offset + t.len();
            let src = values.get(entry.offset..end).ok_or_else(|| {
                Error::Shape(format!("tensor {} runs past the container", entry.name))
            })?;
            for (dst, &v) in t.data.iter_mut().zip(src) {
                *dst = T::of(v);
            }
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: PosMode, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_len: 12,
            pos_mode: mode,
            tie_embeddings: tied,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(PosMode::Rotary, false);
        let a = init_params::<f64>(&c, 42).unwrap();
        let b = init_params::<f64>(&c, 42).unwrap();
        assert_eq!(
            a.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let other = init_params::<f64>(&c, 43).unwrap();
        assert!(a.max_abs_diff(&other).unwrap() > 0.0);
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = cfg(PosMode::Rotary, false);
        c.vocab_size = 0;
        assert!(init_params::<f64>(&c, 1).is_err());
    }

    #[test]
    fn optional_tensors_follow_config() {
        let p = ModelParams::<f64>::zeros(&cfg(PosMode::LearnedAbsolute, true)).unwrap();
        assert!(p.unembed.is_none() && p.pos.is_some() && p.rel_bias.is_none());
        let p = ModelParams::<f64>::zeros(&cfg(PosMode::RelativeBias, false)).unwrap();
        assert!(p.unembed.is_some() && p.pos.is_none());
        assert_eq!(p.rel_bias.as_ref().unwrap().shape, vec![2, 23]);
    }

    #[test]
    fn container_round_trip() {
        for mode in PosMode::ALL {
            let c = cfg(mode, mode == PosMode::Rotary);
            let p = init_params::<f64>(&c, 9).unwrap();
            let mut buf = Vec::new();
            let side = p.write_container(&c, &mut buf).unwrap();
            assert_eq!(buf.len(), 8 * p.num_params());
            let json = serde_json::to_string(&side).unwrap();
            let side: ParamsSidecar = serde_json::from_str(&json).unwrap();
            let back = ModelParams::<f64>::read_container(&side, buf.as_slice()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn container_rejects_truncation() {
        let c = cfg(PosMode::Rotary, false);
        let p = init_params::<f64>(&c, 9).unwrap();
        let mut buf = Vec::new();
        let side = p.write_container(&c, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(ModelParams::<f64>::read_container(&side, buf.as_slice()).is_err());
    }
}
