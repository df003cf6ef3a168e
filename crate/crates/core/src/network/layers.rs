//! Parameter initialization and the small layers the network is assembled from.
//!
//! Every layer is addressed by a name prefix in the [`ParamStore`]; forward
//! helpers look their tensors up by `{prefix}.weight`, `{prefix}.bias`, ...

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32)
}

/// Fan-in scaled uniform conv weight `[out, in, k, k]` and optional bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    bias: bool,
) -> Result<()> {
    let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
    store.insert(format!("{name}.weight"), uniform(&[out_ch, in_ch, k, k], bound, rng))?;
    if bias {
        store.insert(format!("{name}.bias"), uniform(&[out_ch], bound, rng))?;
    }
    Ok(())
}

/// Conv whose weight and bias start at exactly zero.
pub fn init_conv_zero(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::zeros(&[out_ch, in_ch, k, k]))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
    Ok(())
}

/// Linear weight stored `[in, out]`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    in_f: usize,
    out_f: usize,
    bias: bool,
) -> Result<()> {
    let bound = 1.0 / (in_f as f64).sqrt();
    store.insert(format!("{name}.weight"), uniform(&[in_f, out_f], bound, rng))?;
    if bias {
        store.insert(format!("{name}.bias"), uniform(&[out_f], bound, rng))?;
    }
    Ok(())
}

pub fn init_norm(store: &mut ParamStore, name: &str, ch: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::ones(&[ch]))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[ch]))?;
    Ok(())
}

pub fn init_batch_norm(store: &mut ParamStore, name: &str, ch: usize) -> Result<()> {
    init_norm(store, name, ch)?;
    store.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]))?;
    store.insert(format!("{name}.running_var"), Tensor::ones(&[ch]))?;
    Ok(())
}

fn optional_param<T: Scalar>(g: &mut Graph<T>, name: &str) -> Result<Option<Var>> {
    match g.param(name) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UnknownParam(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = optional_param(g, &format!("{name}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = optional_param(g, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

pub fn group_norm<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    g.group_norm(x, w, b, groups, NORM_EPS)
}

pub fn batch_norm<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    let rm = g.param_id(&format!("{name}.running_mean"))?;
    let rv = g.param_id(&format!("{name}.running_var"))?;
    g.batch_norm(x, w, b, Some((rm, rv)), BN_MOMENTUM, NORM_EPS)
}

/// Residual block: GroupNorm → SiLU → conv, time embedding added after the
/// first conv, GroupNorm → SiLU → conv, plus a 1×1 shortcut when widths differ.
pub fn init_res_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    temb_dim: usize,
) -> Result<()> {
    init_norm(store, &format!("{name}.norm1"), in_ch)?;
    init_conv(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, true)?;
    init_linear(store, rng, &format!("{name}.temb"), temb_dim, out_ch, true)?;
    init_norm(store, &format!("{name}.norm2"), out_ch)?;
    init_conv(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, true)?;
    if in_ch != out_ch {
        init_conv(store, rng, &format!("{name}.skip"), in_ch, out_ch, 1, true)?;
    }
    Ok(())
}

/// `temb_act` is the already SiLU-activated time embedding `[N, E]`.
pub fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    name: &str,
    x: Var,
    temb_act: Var,
    groups: usize,
) -> Result<Var> {
    let h = group_norm(g, &format!("{name}.norm1"), x, groups)?;
    let h = g.silu(h);
    let h = conv(g, &format!("{name}.conv1"), h, 1, 1)?;
    let out_ch = g.shape(h)[1];
    let te = linear(g, &format!("{name}.temb"), temb_act)?;
    let te = g.reshape(te, &[g.shape(te)[0], out_ch, 1, 1])?;
    let h = g.add(h, te)?;
    let h = group_norm(g, &format!("{name}.norm2"), h, groups)?;
    let h = g.silu(h);
    let h = conv(g, &format!("{name}.conv2"), h, 1, 1)?;
    let shortcut = match optional_param(g, &format!("{name}.skip.weight"))? {
        Some(_) => conv(g, &format!("{name}.skip"), x, 1, 0)?,
        None => x,
    };
    g.add(shortcut, h)
}

/// Sinusoidal encoding, interleaved: slot `2i` is `sin(t·ω_i)`, slot `2i+1`
/// is `cos(t·ω_i)` with `ω_i = 10000^(−i/(dim/2))`.
pub fn sinusoid(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

pub fn init_time_embed<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Result<()> {
    init_linear(store, rng, "time.lin1", dim, dim, true)?;
    init_linear(store, rng, "time.lin2", dim, dim, true)
}

/// Two-layer projection of the sinusoid; returns `[N, dim]`.
pub fn time_embed<T: Scalar>(g: &mut Graph<T>, ts: &[usize], dim: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        if t == 0 {
            return Err(Error::OutOfRange {
                op: "time_embed",
                index: 0,
                max: usize::MAX,
            });
        }
        data.extend(sinusoid(t, dim)?.into_iter().map(T::of));
    }
    let s = g.input(Tensor::new(&[ts.len(), dim], data)?)?;
    let h = linear(g, "time.lin1", s)?;
    let h = g.silu(h);
    linear(g, "time.lin2", h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_phase_zero() {
        let s = sinusoid(0, 8).unwrap();
        for (i, v) in s.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(sinusoid(3, 7).is_err());
    }

    #[test]
    fn distinct_timesteps_differ() {
        for (a, b) in [(1, 2), (10, 11), (500, 999), (1, 1000)] {
            let (x, y) = (sinusoid(a, 32).unwrap(), sinusoid(b, 32).unwrap());
            let d: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
            assert!(d > 0.0);
        }
    }
}
