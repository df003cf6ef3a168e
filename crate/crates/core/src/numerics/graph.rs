//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its output
//! value immediately and appends a node remembering its inputs. [`Graph::backward`]
//! then walks the tape in reverse. Parameters are read from a borrowed
//! [`ParamStore`]; their gradients come back in a [`Grads`] value which the
//! caller folds into the store with [`ParamStore::accumulate`].

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Normalization layers behave differently in training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    AvgPool2d(Var, usize),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        /// One entry per slab; empty slabs list means frozen statistics.
        rstd: Vec<T>,
        slabs: Vec<Vec<(usize, usize)>>,
        channels: usize,
        spatial: usize,
        batch_stats: bool,
    },
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxes {
        a: Var,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    /// Parameters that received any gradient at all.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.param_grads().map(|(id, _)| id).collect()
    }
}

pub struct Graph<'p, T: Scalar = f32> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

fn axis_check(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn permute_data<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            buffer_updates: Vec::new(),
        }
    }

    /// A graph with no parameter store; only inputs and variables.
    pub fn detached(mode: Mode) -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates recorded by batch normalization in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        t.ensure_finite("graph input")?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        t.ensure_finite("graph variable")?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Store id of a named entry (parameters and buffers alike).
    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        self.params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .id(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let id = store.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let trainable = store.is_trainable(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb, op)?;
        kernels::pad4(&out_shape)?;
        let data = kernels::broadcast_zip(
            self.value(a).data(),
            &sa,
            self.value(b).data(),
            &sb,
            &out_shape,
            f,
        );
        Ok((Tensor::from_parts(out_shape.clone(), data), out_shape))
    }

    /// Elementwise sum with broadcasting over size-1 dims (equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a·scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let t = self.value(a).map(|x| x * s + c);
        self.push(t, Op::Affine(a, s), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Matrix product of `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution of NCHW `x` with OIHW `w` and optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.out_ch]));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_parts(geom.out_shape(), data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Nearest-neighbour 2× upsampling of NCHW.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", &s, &[0, 0, 0, 0]));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        Ok(self.push(t, Op::Upsample2x(x), &[x]))
    }

    /// Average pooling with a square `k×k` window and stride `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("avg_pool2d window {k} must tile H and W"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = T::of(1.0 / (k * k) as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += plane[y * w + xx] * inv;
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(self.push(t, Op::AvgPool2d(x, k), &[x]))
    }

    /// Mean over H and W, keeping them as size-1 dims.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("global_avg_pool", self.shape(x), &[0, 0, 0, 0]));
        }
        self.mean_axes(x, &[2, 3])
    }

    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        slabs: Vec<Vec<(usize, usize)>>,
        stats: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        let channels = shape[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape("norm affine", self.shape(gamma), &[channels]));
        }
        let spatial: usize = shape[2..].iter().product();
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstds = Vec::with_capacity(slabs.len());
        let mut means = Vec::with_capacity(slabs.len());
        let mut vars = Vec::with_capacity(slabs.len());
        for (i, runs) in slabs.iter().enumerate() {
            let (mean, var) = match stats {
                Some((m, v)) => (m[i], v[i]),
                None => {
                    let st = kernels::slab_stats(xs, runs);
                    (st.mean, st.var)
                }
            };
            let rstd = T::one() / (var + T::of(eps)).sqrt();
            for &(s, l) in runs {
                for k in s..s + l {
                    xhat[k] = (xs[k] - mean) * rstd;
                }
            }
            rstds.push(rstd);
            means.push(mean);
            vars.push(var);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = (k / spatial) % channels;
                v * g[c] + b[c]
            })
            .collect();
        let t = Tensor::from_parts(shape, out);
        let var = self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstds,
                slabs,
                channels,
                spatial,
                batch_stats: stats.is_none(),
            },
            &[x, gamma, beta],
        );
        Ok((var, means, vars))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("group_norm needs channels divisible by {groups}"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let per = c / groups * spatial;
        let slabs = (0..n * groups).map(|i| vec![(i * per, per)]).collect();
        Ok(self.affine_norm(x, gamma, beta, slabs, None, eps)?.0)
    }

    /// Batch normalization over `[N, C, ...]`, statistics per channel.
    ///
    /// Training mode normalizes with batch statistics and, when running
    /// buffers are given, records their momentum update. Eval mode uses the
    /// running buffers, which are then required.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(ParamId, ParamId)>,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "batch_norm needs [N, C, ...]".into(),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let slabs: Vec<Vec<(usize, usize)>> = (0..c)
            .map(|ch| (0..n).map(|i| ((i * c + ch) * spatial, spatial)).collect())
            .collect();
        match self.mode {
            Mode::Train => {
                let (v, means, vars) = self.affine_norm(x, gamma, beta, slabs, None, eps)?;
                if let Some((rm, rv)) = running {
                    let store = self.params.expect("running buffers imply a store");
                    let m = T::of(momentum);
                    let count = (n * spatial) as f64;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let new_mean = Tensor::from_fn(&[c], |i| {
                        (T::one() - m) * store.value(rm).data()[i] + m * means[i]
                    });
                    let new_var = Tensor::from_fn(&[c], |i| {
                        (T::one() - m) * store.value(rv).data()[i] + m * vars[i] * T::of(unbias)
                    });
                    self.buffer_updates.push((rm, new_mean));
                    self.buffer_updates.push((rv, new_var));
                }
                Ok(v)
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::InvalidArgument("batch_norm in eval mode needs running stats".into())
                })?;
                let store = self.params.expect("running buffers imply a store");
                let mean = store.value(rm).data().to_vec();
                let var = store.value(rv).data().to_vec();
                Ok(self
                    .affine_norm(x, gamma, beta, slabs, Some((&mean, &var)), eps)?
                    .0)
            }
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Natural log; rejects non-positive input.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::NonFinite("ln of non-positive value".into()));
        }
        Ok(self.unary(a, |x| x.ln(), Op::Ln(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, l, h))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        axis_check(&shape, axis, "softmax")?;
        let y = kernels::softmax_forward(self.value(a).data(), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax(a, axis), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| {
                Error::InvalidArgument("concat of nothing".into())
            })?)
            .to_vec();
        axis_check(&first, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            parts,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        axis_check(&shape, axis, "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) outside axis of size {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Narrow { a, axis, start },
            &[a],
        ))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        if start != self.shape(a)[axis] {
            return Err(Error::InvalidArgument(format!(
                "split sizes {sizes:?} do not cover axis of size {}",
                self.shape(a)[axis]
            )));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "bad permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute(a, perm.to_vec()),
            &[a],
        ))
    }

    fn reduce(&mut self, a: Var, axes: &[usize], scale: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        for &ax in axes {
            axis_check(&shape, ax, "reduce")?;
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let nd = shape.len();
        let mut ostrides = vec![0usize; nd];
        let mut acc = 1;
        for d in (0..nd).rev() {
            ostrides[d] = if out_shape[d] == 1 { 0 } else { acc };
            acc *= out_shape[d];
        }
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for &v in self.value(a).data() {
            out[off] += v;
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += ostrides[d];
                if idx[d] < shape[d] {
                    break;
                }
                off -= ostrides[d] * shape[d];
                idx[d] = 0;
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxes { a, scale },
            &[a],
        ))
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, T::one())
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        self.reduce(a, axes, T::of(1.0 / count as f64))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.mean_axes(a, &axes)?;
        self.reshape(s, &[1])
    }

    /// Reduces every non-leading axis: `[N, ...] -> [N]`.
    pub fn per_sample(&mut self, a: Var, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let axes: Vec<usize> = (1..shape.len()).collect();
        let r = if axes.is_empty() {
            a
        } else if mean {
            self.mean_axes(a, &axes)?
        } else {
            self.sum_axes(a, &axes)?
        };
        self.reshape(r, &[shape[0]])
    }

    /// Per-sample `‖a − b‖₁`, shape `[N]`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1_distance", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        self.per_sample(ad, false)
    }

    /// Per-sample `‖a − b‖₂²`, shape `[N]`.
    pub fn l2_distance_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l2_distance_sq", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        self.per_sample(sq, false)
    }

    /// Linear map on the last axis: `x [.., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || shape.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", &shape, &ws));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape("linear bias", self.shape(b), &[ws[1]]));
            }
            let b2 = self.reshape(b, &[1, ws[1]])?;
            y = self.add(y, b2)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc_reduced(&mut grads, *a, g.data(), node.value.shape());
                    self.acc_reduced(&mut grads, *b, g.data(), node.value.shape());
                }
                Op::Sub(a, b) => {
                    self.acc_reduced(&mut grads, *a, g.data(), node.value.shape());
                    let neg: Vec<T> = g.data().iter().map(|&v| -v).collect();
                    self.acc_reduced(&mut grads, *b, &neg, node.value.shape());
                }
                Op::Mul(a, b) => {
                    let out = node.value.shape();
                    if self.nodes[a.0].needs_grad {
                        let bv = self.value(*b);
                        let ga = kernels::broadcast_zip(g.data(), out, bv.data(), bv.shape(), out, |x, y| x * y);
                        self.acc_reduced(&mut grads, *a, &ga, out);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.value(*a);
                        let gb = kernels::broadcast_zip(g.data(), out, av.data(), av.shape(), out, |x, y| x * y);
                        self.acc_reduced(&mut grads, *b, &gb, out);
                    }
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    self.acc_with(&mut grads, *a, || g.data().iter().map(|&v| v * s).collect());
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (batch, m, k, n) = if sa.len() == 2 {
                        (1, sa[0], sa[1], sb[1])
                    } else {
                        (sa[0], sa[1], sa[2], sb[2])
                    };
                    let gd = g.data();
                    if self.nodes[a.0].needs_grad {
                        let bd = self.value(*b).data();
                        let mut ga = vec![T::zero(); batch * m * k];
                        for i in 0..batch {
                            gemm(m, n, k, &gd[i * m * n..], false, &bd[i * k * n..], true, T::zero(), &mut ga[i * m * k..]);
                        }
                        self.acc_vec(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let ad = self.value(*a).data();
                        let mut gb = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            gemm(k, m, n, &ad[i * m * k..], true, &gd[i * m * n..], false, T::zero(), &mut gb[i * k * n..]);
                        }
                        self.acc_vec(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let need_dx = self.nodes[x.0].needs_grad;
                    let need_dw = self.nodes[w.0].needs_grad;
                    let need_db = b.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false);
                    let (dx, dw, db) = kernels::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        need_dx,
                        need_dw,
                        need_db,
                    );
                    if let Some(dx) = dx {
                        self.acc_vec(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        self.acc_vec(&mut grads, *w, dw);
                    }
                    if let (Some(db), Some(b)) = (db, b) {
                        self.acc_vec(&mut grads, *b, db);
                    }
                }
                Op::Upsample2x(x) => {
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (p, plane) in g.data().chunks(4 * h * w).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                            }
                        }
                    }
                    self.acc_vec(&mut grads, *x, dx);
                }
                Op::AvgPool2d(x, k) => {
                    let k = *k;
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = T::of(1.0 / (k * k) as f64);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        for y in 0..h {
                            for xx in 0..w {
                                plane[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
                            }
                        }
                    }
                    self.acc_vec(&mut grads, *x, dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                    slabs,
                    channels,
                    spatial,
                    batch_stats,
                } => {
                    let (c, sp) = (*channels, *spatial);
                    let gd = g.data();
                    let chan = |k: usize| (k / sp) % c;
                    if self.nodes[beta.0].needs_grad {
                        let mut db = vec![T::zero(); c];
                        for (k, &v) in gd.iter().enumerate() {
                            db[chan(k)] += v;
                        }
                        self.acc_vec(&mut grads, *beta, db);
                    }
                    if self.nodes[gamma.0].needs_grad {
                        let mut dg = vec![T::zero(); c];
                        for (k, &v) in gd.iter().enumerate() {
                            dg[chan(k)] += v * xhat[k];
                        }
                        self.acc_vec(&mut grads, *gamma, dg);
                    }
                    if self.nodes[x.0].needs_grad {
                        let gam = self.value(*gamma).data();
                        let dxhat: Vec<T> = gd
                            .iter()
                            .enumerate()
                            .map(|(k, &v)| v * gam[chan(k)])
                            .collect();
                        let mut dx = vec![T::zero(); gd.len()];
                        for (runs, &r) in slabs.iter().zip(rstd) {
                            if *batch_stats {
                                kernels::slab_norm_backward(xhat, &dxhat, r, runs, &mut dx);
                            } else {
                                for &(s, l) in runs {
                                    for k in s..s + l {
                                        dx[k] += dxhat[k] * r;
                                    }
                                }
                            }
                        }
                        self.acc_vec(&mut grads, *x, dx);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(y)
                            .map(|(&d, &s)| d * s * (T::one() - s))
                            .collect()
                    });
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&d, &v)| {
                                let s = T::one() / (T::one() + (-v).exp());
                                d * s * (T::one() + v * (T::one() - s))
                            })
                            .collect()
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                            .collect()
                    });
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data().iter().zip(x).map(|(&d, &v)| d / v).collect()
                    });
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&d, &v)| {
                                if v > T::zero() {
                                    d
                                } else if v < T::zero() {
                                    -d
                                } else {
                                    T::zero()
                                }
                            })
                            .collect()
                    });
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&d, &v)| d * (v + v))
                            .collect()
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let x = self.value(*a).data();
                    self.acc_with(&mut grads, *a, || {
                        g.data()
                            .iter()
                            .zip(x)
                            .map(|(&d, &v)| if v > lo && v < hi { d } else { T::zero() })
                            .collect()
                    });
                }
                Op::Softmax(a, axis) => {
                    let dx = kernels::softmax_backward(
                        node.value.data(),
                        g.data(),
                        node.value.shape(),
                        *axis,
                    );
                    self.acc_vec(&mut grads, *a, dx);
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                gp.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            self.acc_vec(&mut grads, p, gp);
                        }
                        start += len;
                    }
                }
                Op::Narrow { a, axis, start } => {
                    let full_shape = self.shape(*a);
                    let (outer, full, inner) = kernels::axis_split(full_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut ga = vec![T::zero(); self.value(*a).len()];
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        ga[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.acc_vec(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    self.acc_vec(&mut grads, *a, g.into_data());
                }
                Op::Permute(a, perm) => {
                    let inv = inverse_perm(perm);
                    let (ga, _) = permute_data(g.data(), node.value.shape(), &inv);
                    self.acc_vec(&mut grads, *a, ga);
                }
                Op::SumAxes { a, scale } => {
                    let in_shape = self.shape(*a);
                    let s = *scale;
                    let ones = vec![T::one(); self.value(*a).len()];
                    let ga = kernels::broadcast_zip(
                        &ones,
                        in_shape,
                        g.data(),
                        node.value.shape(),
                        in_shape,
                        |_, d| d * s,
                    );
                    self.acc_vec(&mut grads, *a, ga);
                }
            }
        }

        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Grads {
            by_node: grads,
            params,
        })
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), g));
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Vec<T>) {
        if self.nodes[v.0].needs_grad {
            self.acc_vec(grads, v, f());
        }
    }

    fn acc_reduced(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &[T], out_shape: &[usize]) {
        if self.nodes[v.0].needs_grad {
            let r = kernels::reduce_to(g, out_shape, self.shape(v));
            self.acc_vec(grads, v, r);
        }
    }
}
