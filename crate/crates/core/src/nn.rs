//! Small layer library on top of candle tensors. Everything here is composed
//! from differentiable primitives; channels-last layout throughout.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::fan_in(in_dim), Init::fan_in(in_dim))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[out_dim, in_dim], weight)?,
            bias: Some(pb.param("bias", &[out_dim], bias)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        if last != self.in_dim() {
            return Err(Error::shape(self.in_dim(), last));
        }
        let rows = x.elem_count() / last;
        let flat = x.reshape((rows, last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[dim], Init::Ones)?,
            bias: pb.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    /// Normalises over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Tanh,
    /// Identity; only useful for testing.
    Linear,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu()?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Linear => x.clone(),
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "linear" => Ok(Self::Linear),
            other => Err(Error::invalid(format!(
                "unknown activation '{other}' (expected gelu, relu, tanh or linear)"
            ))),
        }
    }
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically and only guards against overflow.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Scaled dot-product attention on `(batch, heads, n, head_dim)` tensors.
/// `bias` is added to the logits and must broadcast to `(batch, heads, n_q, n_k)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut logits = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? * scale)?;
    if let Some(b) = bias {
        logits = logits.broadcast_add(b)?;
    }
    let p = softmax_last(&logits)?;
    Ok(p.matmul(&v.contiguous()?)?)
}

/// Two linear layers with an activation between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, dim)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Row-stochastic `(out, in)` matrix performing 1-D bilinear resampling with
/// half-pixel alignment and edge clamping.
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let f = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - f;
        m[o * in_len + i1] += f;
    }
    m
}

/// Bilinear resize of the two trailing dims via separable matrix products,
/// which keeps the op differentiable.
pub fn resize_bilinear_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let n = dims.len();
    if n < 2 {
        return Err(Error::invalid("resize needs at least 2 dims"));
    }
    let (in_h, in_w) = (dims[n - 2], dims[n - 1]);
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let my = matrix_tensor(bilinear_matrix(out_h, in_h), out_h, in_h, dt, dev)?;
    let mx = matrix_tensor(bilinear_matrix(out_w, in_w), out_w, in_w, dt, dev)?;
    let lead: usize = dims[..n - 2].iter().product();
    let flat = x.reshape((lead, in_h, in_w))?;
    let rows = my.unsqueeze(0)?.broadcast_as((lead, out_h, in_h))?.contiguous()?.matmul(&flat)?;
    let cols = rows.matmul(&mx.t()?.unsqueeze(0)?.broadcast_as((lead, in_w, out_w))?.contiguous()?)?;
    let mut out_dims = dims.to_vec();
    out_dims[n - 2] = out_h;
    out_dims[n - 1] = out_w;
    Ok(cols.reshape(out_dims)?)
}

fn matrix_tensor(v: Vec<f64>, r: usize, c: usize, dt: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, (r, c), dev)?.to_dtype(dt)?)
}
