//! Reverse-mode tape over a fixed vocabulary of tensor ops.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse and accumulates vector-Jacobian products into the
//! inputs that require gradients.

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_shared: bool,
}

/// Geometry of a same-padded NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatMulGeom),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ColNormalize {
        x: Var,
        sums: Vec<T>,
    },
    StandardizeTokens {
        x: Var,
        inv_std: Vec<T>,
    },
    SoftmaxNll {
        x: Var,
        targets: Vec<Option<usize>>,
        denom: T,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    Reshape(Var),
    Permute0213(Var, [usize; 4]),
    SliceLast {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        rows_in: usize,
    },
    Concat1(Var, Var),
    Expand(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use tape. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Strides of `op(X)` viewed as `rows x cols` when X is stored row-major.
fn op_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Places every parameter of `store` on the tape.
    pub fn bind(&mut self, store: &ParamStore<T>) {
        self.bind_filtered(store, |_| true);
    }

    /// Like [`Graph::bind`], but parameters rejected by `trainable` are bound
    /// as constants.
    pub fn bind_filtered(&mut self, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) {
        self.params = store
            .iter()
            .map(|(name, t)| {
                let rg = trainable(name);
                self.push(t.clone(), Op::Leaf, rg)
            })
            .collect();
    }

    /// Binds `store` but routes parameter `id` to an existing node.
    pub fn bind_with_override(&mut self, store: &ParamStore<T>, id: ParamId, var: Var) {
        self.bind(store);
        self.params[id.index()] = var;
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn bound_params(&self) -> &[Var] {
        &self.params
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `a[..., k] @ b[k, n] -> [..., n]` with `b` shared across leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let geom = MatMulGeom {
            batch: 1,
            m,
            k,
            n,
            ta: false,
            tb: false,
            b_shared: true,
        };
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        self.matmul_impl(a, b, geom, out_shape)
    }

    /// Batched `op(a) @ op(b)` over a leading batch axis; `ta`/`tb` transpose
    /// the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let geom = MatMulGeom {
            batch: sa[0],
            m,
            k: ka,
            n,
            ta,
            tb,
            b_shared: false,
        };
        self.matmul_impl(a, b, geom, vec![sa[0], m, n])
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        g: MatMulGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let a_stride = g.m * g.k;
            let b_stride = if g.b_shared { 0 } else { g.k * g.n };
            for bi in 0..g.batch {
                T::gemm(
                    g.m,
                    g.k,
                    g.n,
                    T::one(),
                    &av[bi * a_stride..(bi + 1) * a_stride],
                    op_strides(g.m, g.k, g.ta),
                    &bv[bi * b_stride..bi * b_stride + g.k * g.n],
                    op_strides(g.k, g.n, g.tb),
                    T::zero(),
                    &mut out[bi * g.m * g.n..(bi + 1) * g.m * g.n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, g), rg))
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.numel() != d || vb.shape().len() != 1 {
            return Err(dim_err("add_bias", vx.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("unary preserves shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// NaN inputs stay NaN so numerical failures surface in the loss.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < T::zero() { T::zero() } else { v }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    // ── normalization ─────────────────────────────────────────────────

    /// Softmax over the last axis with max subtraction. `-inf` entries get
    /// exactly zero probability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "softmax row has no finite logit".to_string(),
            ));
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis; affine terms are optional.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != d {
                return Err(dim_err("layer_norm", vx.shape(), self.value(p).shape()));
            }
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let df = T::from_f64(d as f64);
        for (r, (src, dst)) in vx.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / df;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(gm) = gamma {
            let gd = self.value(gm).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gd).for_each(|(o, &g)| *o = *o * g);
            }
        }
        if let Some(bt) = beta {
            let bd = self.value(bt).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bd).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x)
            || gamma.map(|v| self.rg(v)).unwrap_or(false)
            || beta.map(|v| self.rg(v)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// For `x[B, n, s]`: `y[b, i, j] = (x[b, i, j] + eps) / sum_i (x[b, i, j] + eps)`.
    pub fn col_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        if sh.len() != 3 {
            return Err(dim_err("col_normalize", &sh, &[0, 0, 0]));
        }
        let (b, n, s) = (sh[0], sh[1], sh[2]);
        let mut sums = vec![T::zero(); b * s];
        let xd = vx.data();
        for bi in 0..b {
            for i in 0..n {
                for j in 0..s {
                    sums[bi * s + j] = sums[bi * s + j] + xd[(bi * n + i) * s + j] + eps;
                }
            }
        }
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for i in 0..n {
                for j in 0..s {
                    let idx = (bi * n + i) * s + j;
                    out[idx] = (xd[idx] + eps) / sums[bi * s + j];
                }
            }
        }
        let value = Tensor::new(sh, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ColNormalize { x, sums }, rg))
    }

    /// For `x[B, n, c]`: zero mean, unit variance over the token axis `n`,
    /// separately per item and channel.
    pub fn standardize_tokens(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        if sh.len() != 3 || sh[1] == 0 {
            return Err(dim_err("standardize_tokens", &sh, &[0, 1, 0]));
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let xd = vx.data();
        let nf = T::from_f64(n as f64);
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); b * c];
        for bi in 0..b {
            for ch in 0..c {
                let at = |i: usize| (bi * n + i) * c + ch;
                let mean = (0..n).map(|i| xd[at(i)]).sum::<T>() / nf;
                let var = (0..n).map(|i| (xd[at(i)] - mean) * (xd[at(i)] - mean)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[bi * c + ch] = inv;
                for i in 0..n {
                    out[at(i)] = (xd[at(i)] - mean) * inv;
                }
            }
        }
        let value = Tensor::new(sh, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::StandardizeTokens { x, inv_std }, rg))
    }

    // ── losses and reductions ─────────────────────────────────────────

    /// `sum_r -log softmax(x[r])[target_r] / denom` over rows with a target.
    pub fn softmax_nll(
        &mut self,
        x: Var,
        targets: Vec<Option<usize>>,
        denom: T,
    ) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.numel() / d;
        if targets.len() != rows {
            return Err(dim_err("softmax_nll", vx.shape(), &[targets.len()]));
        }
        let mut probs = vx.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(d).enumerate() {
            let Some(t) = targets[r] else { continue };
            if t >= d {
                return Err(dim_err("softmax_nll", &[rows, d], &[t]));
            }
            let raw = &vx.data()[r * d..(r + 1) * d];
            let mx = raw.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = raw.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total = total + (lse - raw[t]);
            softmax_in_place(row);
        }
        for (r, row) in probs.chunks_mut(d).enumerate() {
            if targets[r].is_none() {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let value = Tensor::scalar(total / denom);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SoftmaxNll {
                x,
                targets,
                denom,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("mse", va.shape(), vb.shape()));
        }
        let n = T::from_f64(va.numel().max(1) as f64);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = T::from_f64(vx.numel().max(1) as f64);
        let s = vx.data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    // ── shape manipulation ────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let sh = vx.shape();
        if sh.len() != 4 {
            return Err(dim_err("permute_0213", sh, &[0, 0, 0, 0]));
        }
        let dims = [sh[0], sh[1], sh[2], sh[3]];
        let out = permute_0213_data(vx.data(), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute0213(x, dims), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if start + len > d {
            return Err(dim_err("slice_last", vx.shape(), &[start, len]));
        }
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    /// For `x[B, n, c]` and per-batch row indices `idx[B][L]`, returns `[B, L, c]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        if sh.len() != 3 || idx.len() != sh[0] {
            return Err(dim_err("gather_rows", &sh, &[idx.len()]));
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let l = idx.first().map(|r| r.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(b * l);
        let mut out = Vec::with_capacity(b * l * c);
        for (bi, rows) in idx.iter().enumerate() {
            if rows.len() != l || rows.iter().any(|&r| r >= n) {
                return Err(dim_err("gather_rows", &sh, &[bi, rows.len()]));
            }
            for &r in rows {
                flat.push(r);
                out.extend_from_slice(&vx.data()[(bi * n + r) * c..(bi * n + r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![b, l, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: flat,
                rows_in: n,
            },
            rg,
        ))
    }

    /// Concatenate `[B, L1, c]` and `[B, L2, c]` along axis 1.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(dim_err("concat_rows", &sa, &sb));
        }
        let c = sa[2];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for bi in 0..sa[0] {
            out.extend_from_slice(&da[bi * sa[1] * c..(bi + 1) * sa[1] * c]);
            out.extend_from_slice(&db[bi * sb[1] * c..(bi + 1) * sb[1] * c]);
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1], c], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat1(a, b), rg))
    }

    /// Repeat a vector `v[c]` (or any tensor) into `[lead..., c]`.
    pub fn expand(&mut self, v: Var, lead: &[usize]) -> Result<Var> {
        let vv = self.value(v);
        let reps: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(vv.shape());
        let mut out = Vec::with_capacity(reps * vv.numel());
        for _ in 0..reps {
            out.extend_from_slice(vv.data());
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(v);
        Ok(self.push(value, Op::Expand(v), rg))
    }

    // ── convolution ───────────────────────────────────────────────────

    /// Same-padded 2-D convolution over NHWC input with weights
    /// `[k, k, in, out]` and bias `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] || stride == 0 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        if self.value(b).numel() != sw[3] {
            return Err(dim_err("conv2d", &sw, self.shape(b)));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_ch: sx[3],
            out_ch: sw[3],
            kernel: sw[0],
            stride,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = vec![T::zero(); geom.batch * ho * wo * geom.out_ch];
        let mut cols = vec![T::zero(); ho * wo * geom.patch()];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let img = geom.height * geom.width * geom.in_ch;
        let per_out = ho * wo * geom.out_ch;
        for bi in 0..geom.batch {
            im2col(&xd[bi * img..(bi + 1) * img], &geom, &mut cols);
            let dst = &mut out[bi * per_out..(bi + 1) * per_out];
            T::gemm(
                ho * wo,
                geom.patch(),
                geom.out_ch,
                T::one(),
                &cols,
                (geom.patch() as isize, 1),
                wd,
                (geom.out_ch as isize, 1),
                T::zero(),
                dst,
            );
            for row in dst.chunks_mut(geom.out_ch) {
                row.iter_mut().zip(bd).for_each(|(o, &v)| *o = *o + v);
            }
        }
        let value = Tensor::new(vec![geom.batch, ho, wo, geom.out_ch], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    // ── reverse pass ──────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(dim_err("backward", lv.shape(), &[]));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {:?}",
                lv.item().as_f64()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, geom) => self.back_matmul(*a, *b, *geom, g, grads),
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(o, &v)| *o = *o - v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * va[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let dim = self.value(*bias).numel();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(dim) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * *c)
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * out[i] * (T::one() - out[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * (T::one() - out[i] * out[i]);
                    }
                });
            }
            Op::Exp(x) => {
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * out[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let dim = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(out.chunks(dim))
                    {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for i in 0..dim {
                            dr[i] = dr[i] + yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dim = node.value.last_dim();
                if let Some(bt) = beta {
                    self.acc(grads, *bt, |d| g.chunks(dim).for_each(|row| add_into(d, row)));
                }
                if let Some(gm) = gamma {
                    self.acc(grads, *gm, |d| {
                        for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for i in 0..dim {
                                d[i] = d[i] + gr[i] * xr[i];
                            }
                        }
                    });
                }
                let gamma_v = gamma.map(|gm| self.value(gm).data());
                let df = T::from_f64(dim as f64);
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![T::zero(); dim];
                    for (r, ((dr, gr), xr)) in d
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(xhat.chunks(dim))
                        .enumerate()
                    {
                        for i in 0..dim {
                            dxhat[i] = match gamma_v {
                                Some(gv) => gr[i] * gv[i],
                                None => gr[i],
                            };
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / df;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / df;
                        for i in 0..dim {
                            dr[i] = dr[i] + inv_std[r] * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                });
            }
            Op::ColNormalize { x, sums } => {
                let sh = node.value.shape();
                let (b, n, s) = (sh[0], sh[1], sh[2]);
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        let mut dots = vec![T::zero(); s];
                        for i in 0..n {
                            for j in 0..s {
                                let idx = (bi * n + i) * s + j;
                                dots[j] = dots[j] + g[idx] * out[idx];
                            }
                        }
                        for i in 0..n {
                            for j in 0..s {
                                let idx = (bi * n + i) * s + j;
                                d[idx] = d[idx] + (g[idx] - dots[j]) / sums[bi * s + j];
                            }
                        }
                    }
                });
            }
            Op::StandardizeTokens { x, inv_std } => {
                let sh = node.value.shape();
                let (b, n, c) = (sh[0], sh[1], sh[2]);
                let nf = T::from_f64(n as f64);
                self.acc(grads, *x, |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let at = |i: usize| (bi * n + i) * c + ch;
                            let gm = (0..n).map(|i| g[at(i)]).sum::<T>() / nf;
                            let gy = (0..n).map(|i| g[at(i)] * out[at(i)]).sum::<T>() / nf;
                            let inv = inv_std[bi * c + ch];
                            for i in 0..n {
                                d[at(i)] = d[at(i)] + inv * (g[at(i)] - gm - out[at(i)] * gy);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxNll {
                x,
                targets,
                denom,
                probs,
            } => {
                let dim = self.value(*x).last_dim();
                let scale = g[0] / *denom;
                self.acc(grads, *x, |d| {
                    for (r, (dr, pr)) in d.chunks_mut(dim).zip(probs.chunks(dim)).enumerate() {
                        let Some(t) = targets[r] else { continue };
                        for i in 0..dim {
                            let onehot = if i == t { T::one() } else { T::zero() };
                            dr[i] = dr[i] + scale * (pr[i] - onehot);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] * T::from_f64(2.0 / va.len().max(1) as f64);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + c * (va[i] - vb[i]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] - c * (va[i] - vb[i]);
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = T::from_f64(self.value(*x).numel().max(1) as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o = *o + g[0] / n));
            }
            Op::SumAll(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Permute0213(x, dims) => {
                let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                self.acc(grads, *x, |d| add_into(d, &back));
            }
            Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let dim = self.value(*x).last_dim();
                self.acc(grads, *x, |d| {
                    for (dr, gr) in d.chunks_mut(dim).zip(g.chunks(len)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                });
            }
            Op::GatherRows { x, idx, rows_in } => {
                let c = node.value.last_dim();
                let l = idx.len() / node.value.shape()[0].max(1);
                self.acc(grads, *x, |d| {
                    for (pos, &r) in idx.iter().enumerate() {
                        let bi = pos / l.max(1);
                        let dst = (bi * rows_in + r) * c;
                        add_into(&mut d[dst..dst + c], &g[pos * c..(pos + 1) * c]);
                    }
                });
            }
            Op::Concat1(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (la, lb, c) = (sa[1], sb[1], sa[2]);
                let batch = sa[0];
                self.acc(grads, *a, |d| {
                    for bi in 0..batch {
                        let src = bi * (la + lb) * c;
                        add_into(&mut d[bi * la * c..(bi + 1) * la * c], &g[src..src + la * c]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for bi in 0..batch {
                        let src = bi * (la + lb) * c + la * c;
                        add_into(&mut d[bi * lb * c..(bi + 1) * lb * c], &g[src..src + lb * c]);
                    }
                });
            }
            Op::Expand(v) => {
                let n = self.value(*v).numel();
                self.acc(grads, *v, |d| g.chunks(n).for_each(|row| add_into(d, row)));
            }
            Op::Conv2d { x, w, b, geom } => self.back_conv(*x, *w, *b, geom, g, grads),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn back_matmul(
        &self,
        a: Var,
        b: Var,
        geom: MatMulGeom,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let MatMulGeom {
            batch,
            m,
            k,
            n,
            ta,
            tb,
            b_shared,
        } = geom;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let a_stride = m * k;
        let b_stride = if b_shared { 0 } else { k * n };
        let (rsb, csb) = op_strides(k, n, tb);
        let (rsa, csa) = op_strides(m, k, ta);
        self.acc(grads, a, |d| {
            for bi in 0..batch {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let bb = &bv[bi * b_stride..bi * b_stride + k * n];
                let da = &mut d[bi * a_stride..(bi + 1) * a_stride];
                if ta {
                    // dA[k, m] = op(B)[k, n] * G^T[n, m]
                    T::gemm(k, n, m, T::one(), bb, (rsb, csb), gb, (1, n as isize), T::one(), da);
                } else {
                    // dA[m, k] = G[m, n] * op(B)^T[n, k]
                    T::gemm(m, n, k, T::one(), gb, (n as isize, 1), bb, (csb, rsb), T::one(), da);
                }
            }
        });
        self.acc(grads, b, |d| {
            for bi in 0..batch {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &av[bi * a_stride..(bi + 1) * a_stride];
                let db = &mut d[bi * b_stride..bi * b_stride + k * n];
                if tb {
                    // dB[n, k] = G^T[n, m] * op(A)[m, k]
                    T::gemm(n, m, k, T::one(), gb, (1, n as isize), ab, (rsa, csa), T::one(), db);
                } else {
                    // dB[k, n] = op(A)^T[k, m] * G[m, n]
                    T::gemm(k, m, n, T::one(), ab, (csa, rsa), gb, (n as isize, 1), T::one(), db);
                }
            }
        });
    }

    fn back_conv(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let per_out = ho * wo * geom.out_ch;
        let img = geom.height * geom.width * geom.in_ch;
        let patch = geom.patch();
        self.acc(grads, b, |d| {
            for row in g.chunks(geom.out_ch) {
                add_into(d, row);
            }
        });
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![T::zero(); ho * wo * patch];
        if self.rg(w) {
            self.acc(grads, w, |d| {
                for bi in 0..geom.batch {
                    im2col(&xd[bi * img..(bi + 1) * img], geom, &mut cols);
                    T::gemm(
                        patch,
                        ho * wo,
                        geom.out_ch,
                        T::one(),
                        &cols,
                        (1, patch as isize),
                        &g[bi * per_out..(bi + 1) * per_out],
                        (geom.out_ch as isize, 1),
                        T::one(),
                        d,
                    );
                }
            });
        }
        self.acc(grads, x, |d| {
            for bi in 0..geom.batch {
                T::gemm(
                    ho * wo,
                    geom.out_ch,
                    patch,
                    T::one(),
                    &g[bi * per_out..(bi + 1) * per_out],
                    (geom.out_ch as isize, 1),
                    wd,
                    (1, geom.out_ch as isize),
                    T::zero(),
                    &mut cols,
                );
                col2im_add(&cols, geom, &mut d[bi * img..(bi + 1) * img]);
            }
        });
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn permute_0213_data<T: Real>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn im2col<T: Real>(img: &[T], geom: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let pad = geom.pad() as isize;
    let ci = geom.in_ch;
    let k = geom.kernel;
    let patch = geom.patch();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - pad;
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - pad;
                    let dst = &mut row[(ky * k + kx) * ci..(ky * k + kx + 1) * ci];
                    if iy < 0 || ix < 0 || iy >= geom.height as isize || ix >= geom.width as isize
                    {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let src = (iy as usize * geom.width + ix as usize) * ci;
                        dst.copy_from_slice(&img[src..src + ci]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], geom: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let pad = geom.pad() as isize;
    let ci = geom.in_ch;
    let k = geom.kernel;
    let patch = geom.patch();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - pad;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - pad;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * geom.width + ix as usize) * ci;
                    add_into(&mut img[dst..dst + ci], &row[(ky * k + kx) * ci..(ky * k + kx + 1) * ci]);
                }
            }
        }
    }
}
