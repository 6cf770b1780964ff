//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let b = if bias {
            Some(store.add_const(format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(self.w))?;
        match self.b {
            Some(b) => g.add_bias(y, g.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, Some(gm), Some(bt), T::from_f64(LAYER_NORM_EPS))
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Gated recurrent unit cell in the usual reset/update/candidate layout.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GruCell {
            input: Linear::new(store, &format!("{name}.ih"), in_dim, 3 * dim, true, rng)?,
            hidden: Linear::new(store, &format!("{name}.hh"), dim, 3 * dim, true, rng)?,
            dim,
        })
    }

    /// `x[..., in]`, `h[..., dim]` -> new hidden state `[..., dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
        let d = self.dim;
        let gi = self.input.forward(g, x)?;
        let gh = self.hidden.forward(g, h)?;
        let (ir, iz, in_) = (
            g.slice_last(gi, 0, d)?,
            g.slice_last(gi, d, d)?,
            g.slice_last(gi, 2 * d, d)?,
        );
        let (hr, hz, hn) = (
            g.slice_last(gh, 0, d)?,
            g.slice_last(gh, d, d)?,
            g.slice_last(gh, 2 * d, d)?,
        );
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(in_, rh)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Additive attention mask: 0 where allowed, -inf where blocked.
/// `keep[b][j]` for key `j` in batch item `b`, repeated over `rows` queries.
pub fn key_mask<T: Real>(keep: &[Vec<bool>], heads: usize, rows: usize) -> Result<Tensor<T>> {
    let keys = keep.first().map(Vec::len).unwrap_or(0);
    let mut data = Vec::with_capacity(keep.len() * heads * rows * keys);
    for k in keep {
        if k.len() != keys {
            return Err(Error::Dimension {
                op: "key_mask",
                lhs: vec![keys],
                rhs: vec![k.len()],
            });
        }
        for _ in 0..heads * rows {
            data.extend(k.iter().map(|&on| if on { T::zero() } else { T::neg_infinity() }));
        }
    }
    Tensor::new(vec![keep.len() * heads, rows, keys], data)
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`MultiHeadAttention::forward`].
pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights `[B * heads, Lq, Lk]`.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let hd = self.dim / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, hd])?;
        let x = g.permute_0213(x)?;
        g.reshape(x, &[b * self.heads, l, hd])
    }

    /// `x[B, Lq, dim]` attends to `ctx[B, Lk, kv_dim]`. `mask` is an additive
    /// `[B * heads, Lq, Lk]` tensor from [`key_mask`].
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let (b, lq) = (g.shape(x)[0], g.shape(x)[1]);
        let lk = g.shape(ctx)[1];
        let hd = self.dim / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, ctx)?;
        let v = self.v.forward(g, ctx)?;
        let q = self.split_heads(g, q, b, lq)?;
        let k = self.split_heads(g, k, b, lk)?;
        let v = self.split_heads(g, v, b, lk)?;
        let logits = g.bmm(q, k, false, true)?;
        let logits = g.scale(logits, T::from_f64(1.0 / (hd as f64).sqrt()));
        let logits = match mask {
            Some(m) => g.add(logits, m)?,
            None => logits,
        };
        let weights = g.softmax(logits)?;
        let ctx_out = g.bmm(weights, v, false, false)?;
        let ctx_out = g.reshape(ctx_out, &[b, self.heads, lq, hd])?;
        let ctx_out = g.permute_0213(ctx_out)?;
        let ctx_out = g.reshape(ctx_out, &[b, lq, self.dim])?;
        let out = self.o.forward(g, ctx_out)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Single-head scaled dot-product attention without projections:
/// `softmax(q k^T / sqrt(d)) v` for `q[B, Lq, d]`, `k, v[B, Lk, d]`.
pub fn scaled_dot_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let d = g.shape(q)[2];
    let logits = g.bmm(q, k, false, true)?;
    let logits = g.scale(logits, T::from_f64(1.0 / (d as f64).sqrt()));
    let w = g.softmax(logits)?;
    let out = g.bmm(w, v, false, false)?;
    Ok((out, w))
}

/// NHWC convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_ch;
        Ok(Conv2d {
            w: store.add_uniform(
                format!("{name}.weight"),
                &[kernel, kernel, in_ch, out_ch],
                fan_in,
                rng,
            )?,
            b: store.add_const(format!("{name}.bias"), &[out_ch], 0.0)?,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride)
    }
}
