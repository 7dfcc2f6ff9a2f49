//! Parameterized layers and composite ops built on the tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Convolution with `[Cout, Cin, k, k]` weights and a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Weights ~ N(0, 1/fan_in), zero bias, "same" padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// A 1×1 convolution whose weight and bias start at exactly zero.
    pub fn zero_1x1(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 1, 1]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Dense layer over the last axis: `x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (din as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[din, dout], std, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Group normalization with per-channel affine terms.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.group_norm(x, self.groups, 1e-5)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let n = tape.mul_channel(n, g)?;
        tape.add_channel(n, b)
    }
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` for `q: [B, Lq, d]`,
/// `k: [B, Lk, d]`, `v: [B, Lk, dv]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape("attention", "rank", 3, format!("{qs:?}/{ks:?}/{vs:?}")));
    }
    if qs[2] != ks[2] {
        return Err(Error::shape("attention", "key dimension d (axis 2)", qs[2], ks[2]));
    }
    if qs[0] != ks[0] || ks[0] != vs[0] {
        return Err(Error::shape("attention", "batch (axis 0)", qs[0], format!("{}/{}", ks[0], vs[0])));
    }
    if ks[1] != vs[1] {
        return Err(Error::shape("attention", "key/value length (axis 1)", ks[1], vs[1]));
    }
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[2] as f64).sqrt());
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, l, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, d / heads])
}

/// [`attention`] over `heads` equal slices of the feature axis.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    if heads <= 1 {
        return attention(tape, q, k, v);
    }
    let (qd, vd) = (tape.shape(q)[2], tape.shape(v)[2]);
    if qd % heads != 0 || vd % heads != 0 {
        return Err(Error::shape("multi_head_attention", "feature axis", format!("multiple of {heads}"), format!("{qd}/{vd}")));
    }
    let (b, lq) = (tape.shape(q)[0], tape.shape(q)[1]);
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let o = attention(tape, q, k, v)?;
    let o = tape.reshape(o, &[b, heads, lq, vd / heads])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    tape.reshape(o, &[b, lq, vd])
}

/// Sinusoidal embedding of a scalar position into `dim` features.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Tensor-level convolution (no gradient recording).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.conv2d(x, w, Some(b), stride, padding)?;
    Ok(tape.value(y).clone())
}

/// Tensor-level [`attention`].
pub fn attention_tensors(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let y = attention(&mut tape, q, k, v)?;
    Ok(tape.value(y).clone())
}
