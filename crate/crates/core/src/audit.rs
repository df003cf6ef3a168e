//! The gradient audit: every differentiable primitive, every layer type and
//! both fusion blocks checked against central differences on small random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dammp::{self, GateConfig};
use crate::error::Result;
use crate::fusion;
use crate::network::{self, layers, NetConfig};
use crate::numerics::{grad_check_with, GradCheckOptions, GradReport, Graph, Mode, ParamStore, Scalar, Tensor, Var};

/// One audited construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditCase {
    Elementwise,
    Broadcast,
    MatMul,
    Conv,
    ConvStrided,
    Linear,
    GroupNorm,
    BatchNorm,
    Resample,
    Softmax,
    ShapeOps,
    ResBlock,
    TimeEmbed,
    SpatialAttention,
    ChannelAttention,
    Mmfm,
    Uaca,
    Uafm,
    FeedbackLoss,
    Network,
}

impl AuditCase {
    pub const ALL: [AuditCase; 20] = [
        AuditCase::Elementwise,
        AuditCase::Broadcast,
        AuditCase::MatMul,
        AuditCase::Conv,
        AuditCase::ConvStrided,
        AuditCase::Linear,
        AuditCase::GroupNorm,
        AuditCase::BatchNorm,
        AuditCase::Resample,
        AuditCase::Softmax,
        AuditCase::ShapeOps,
        AuditCase::ResBlock,
        AuditCase::TimeEmbed,
        AuditCase::SpatialAttention,
        AuditCase::ChannelAttention,
        AuditCase::Mmfm,
        AuditCase::Uaca,
        AuditCase::Uafm,
        AuditCase::FeedbackLoss,
        AuditCase::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditCase::Elementwise => "elementwise",
            AuditCase::Broadcast => "broadcast",
            AuditCase::MatMul => "matmul",
            AuditCase::Conv => "conv3x3",
            AuditCase::ConvStrided => "conv_stride2",
            AuditCase::Linear => "linear",
            AuditCase::GroupNorm => "group_norm",
            AuditCase::BatchNorm => "batch_norm",
            AuditCase::Resample => "upsample_pool",
            AuditCase::Softmax => "softmax",
            AuditCase::ShapeOps => "shape_ops",
            AuditCase::ResBlock => "res_block",
            AuditCase::TimeEmbed => "time_embed",
            AuditCase::SpatialAttention => "spatial_attention",
            AuditCase::ChannelAttention => "channel_attention",
            AuditCase::Mmfm => "mmfm",
            AuditCase::Uaca => "uaca",
            AuditCase::Uafm => "uafm",
            AuditCase::FeedbackLoss => "dammp_loss",
            AuditCase::Network => "network",
        }
    }
}

/// Random instance: parameters plus the fixed readout weights that turn the
/// case output into a scalar.
struct Instance {
    store: ParamStore,
    side: usize,
}

/// Uniform in `[-scale, scale]`.
fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::rand_uniform(shape, -scale as f64, scale as f64, rng)
}

fn instance(case: AuditCase, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9e37_79b9));
    let side = [4usize, 6, 8][rng.random_range(0..3)];
    let ch = 4;
    let mut s = ParamStore::new();
    let img = [2, ch, side, side];
    // Batch statistics over two samples are nearly sign functions, which no
    // 32-bit difference can resolve.
    let wide = [4, ch, side, side];
    match case {
        AuditCase::Elementwise => {
            s.insert("a", uniform(&[2, 5], &mut rng, 1.0))?;
            s.insert("b", Tensor::rand_uniform(&[2, 5], 0.5, 2.0, &mut rng))?;
        }
        AuditCase::Broadcast => {
            s.insert("a", uniform(&[2, 3, 4], &mut rng, 1.0))?;
            s.insert("b", uniform(&[1, 3, 1], &mut rng, 1.0))?;
        }
        AuditCase::MatMul => {
            s.insert("a", uniform(&[2, 3, 4], &mut rng, 1.0))?;
            s.insert("b", uniform(&[2, 4, 5], &mut rng, 1.0))?;
            s.insert("c", uniform(&[4, 3], &mut rng, 1.0))?;
        }
        AuditCase::Conv | AuditCase::ConvStrided => {
            s.insert("x", uniform(&img, &mut rng, 1.0))?;
            layers::init_conv(&mut s, &mut rng, "conv", ch, 3, 3, true)?;
        }
        AuditCase::Linear => {
            s.insert("x", uniform(&[2, side, ch], &mut rng, 1.0))?;
            layers::init_linear(&mut s, &mut rng, "lin", ch, 3, true)?;
        }
        AuditCase::GroupNorm => {
            s.insert("x", uniform(&img, &mut rng, 1.0))?;
            s.insert("gn.weight", uniform(&[ch], &mut rng, 0.5).map(|v| v + 1.0))?;
            s.insert("gn.bias", uniform(&[ch], &mut rng, 0.5))?;
        }
        AuditCase::BatchNorm => {
            s.insert("x", uniform(&img, &mut rng, 1.0))?;
            layers::init_batch_norm(&mut s, "bn", ch)?;
            s.set("bn.weight", uniform(&[ch], &mut rng, 0.5).map(|v| v + 1.0))?;
            s.set("bn.bias", uniform(&[ch], &mut rng, 0.5))?;
        }
        AuditCase::Resample => {
            s.insert("x", uniform(&img, &mut rng, 1.0))?;
        }
        AuditCase::Softmax => {
            s.insert("x", uniform(&[2, 3, 5], &mut rng, 1.0))?;
        }
        AuditCase::ShapeOps => {
            s.insert("a", uniform(&[2, 3, 4], &mut rng, 1.0))?;
            s.insert("b", uniform(&[2, 2, 4], &mut rng, 1.0))?;
        }
        AuditCase::ResBlock => {
            s.insert("x", uniform(&img, &mut rng, 1.0))?;
            s.insert("temb", uniform(&[2, 8], &mut rng, 1.0))?;
            layers::init_res_block(&mut s, &mut rng, "rb", ch, 8, 8)?;
        }
        AuditCase::TimeEmbed => {
            layers::init_time_embed(&mut s, &mut rng, 8)?;
        }
        AuditCase::SpatialAttention | AuditCase::ChannelAttention | AuditCase::Mmfm => {
            s.insert("v", uniform(&wide, &mut rng, 1.0))?;
            s.insert("n", uniform(&wide, &mut rng, 1.0))?;
            fusion::init_mmfm(&mut s, &mut rng, "mm", ch, 2)?;
        }
        AuditCase::Uaca => {
            s.insert("q", uniform(&[2, side, 4], &mut rng, 1.0))?;
            s.insert("k", uniform(&[2, side, 4], &mut rng, 1.0))?;
            s.insert("v", uniform(&[2, side, 4], &mut rng, 1.0))?;
            s.insert("u_raw", uniform(&[2, side, 1], &mut rng, 1.0))?;
        }
        AuditCase::Uafm => {
            s.insert("xv", uniform(&[2, side, 8], &mut rng, 1.0))?;
            s.insert("xn", uniform(&[2, side, 8], &mut rng, 1.0))?;
            fusion::init_uafm(&mut s, &mut rng, "ua", 8, 4, 0.3)?;
            // Zero-initialized uncertainty weights would hide their own
            // gradient path from the audit.
            s.set("ua.wn.weight", uniform(&[8, 1], &mut rng, 0.3))?;
        }
        AuditCase::FeedbackLoss => {
            s.insert("eps_u", uniform(&[4, 1, side, side], &mut rng, 1.0))?;
            s.insert("eps_m", uniform(&[4, 1, side, side], &mut rng, 1.0))?;
            s.insert("d_raw", Tensor::new(&[4], vec![-1.2, -0.3, 0.4, 1.1])?)?;
        }
        AuditCase::Network => {
            let cfg = audit_net();
            let net = network::build_ummnet(&cfg, seed)?;
            s = net.params;
            // Give the zero-initialized output conv and uncertainty head a
            // nonzero value so every path carries gradient.
            let w = s.get("dec.conv_out.weight")?.shape().to_vec();
            s.set("dec.conv_out.weight", uniform(&w, &mut rng, 0.1))?;
            let w = s.get("uafm.wn.weight")?.shape().to_vec();
            s.set("uafm.wn.weight", uniform(&w, &mut rng, 0.1))?;
            return Ok(Instance { store: s, side: 8 });
        }
    }
    Ok(Instance { store: s, side })
}

fn audit_net() -> NetConfig {
    NetConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        blocks_per_level: 1,
        time_embed_dim: 4,
        groupnorm_groups: 2,
        reduction: 2,
        head_dim: 4,
        uncertainty_init: 0.4,
    }
}

/// Weights `out` elementwise by fixed pseudo-random values; the auditor sums.
fn readout<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::<f32>::randn(g.shape(out), &mut rng).cast::<T>();
    let r = g.input(r)?;
    g.mul(out, r)
}

fn forward<T: Scalar>(case: AuditCase, g: &mut Graph<T>, side: usize, seed: u64) -> Result<Var> {
    let out = match case {
        AuditCase::Elementwise => {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let p = g.mul(a, b)?;
            let s1 = g.sigmoid(p);
            let s2 = g.silu(a);
            let lb = g.ln(b)?;
            let sq = g.square(a);
            let diff = g.sub(sq, lb)?;
            let af = g.affine(diff, 0.7, -0.2);
            let t = g.add(s1, s2)?;
            let c = g.clamp(a, -0.8, 0.8);
            let t = g.add(t, c)?;
            let ab = g.abs(b);
            let r = g.relu(a);
            let t = g.add(t, ab)?;
            let t = g.add(t, r)?;
            g.mul(t, af)?
        }
        AuditCase::Broadcast => {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let s = g.add(a, b)?;
            let m = g.mul(s, b)?;
            g.sub(m, a)?
        }
        AuditCase::MatMul => {
            let (a, b, c) = (g.param("a")?, g.param("b")?, g.param("c")?);
            let ab = g.matmul(a, b)?;
            let a0 = g.narrow(a, 0, 0, 1)?;
            let a0 = g.reshape(a0, &[3, 4])?;
            let ac = g.matmul(a0, c)?;
            let ab = g.sum_all(ab)?;
            let ac = g.sum_all(ac)?;
            g.mul(ab, ac)?
        }
        AuditCase::Conv => {
            let x = g.param("x")?;
            layers::conv(g, "conv", x, 1, 1)?
        }
        AuditCase::ConvStrided => {
            let x = g.param("x")?;
            layers::conv(g, "conv", x, 2, 1)?
        }
        AuditCase::Linear => {
            let x = g.param("x")?;
            layers::linear(g, "lin", x)?
        }
        AuditCase::GroupNorm => {
            let x = g.param("x")?;
            let (w, b) = (g.param("gn.weight")?, g.param("gn.bias")?);
            g.group_norm(x, w, b, 2, layers::NORM_EPS)?
        }
        AuditCase::BatchNorm => {
            let x = g.param("x")?;
            layers::batch_norm(g, "bn", x)?
        }
        AuditCase::Resample => {
            let x = g.param("x")?;
            let u = g.upsample2x(x)?;
            let p = g.avg_pool2d(u, 2)?;
            let q = g.avg_pool2d(x, 2)?;
            let gp = g.global_avg_pool(x)?;
            let pq = g.mul(p, x)?;
            let s = g.sum_all(pq)?;
            let s2 = g.sum_all(q)?;
            let s3 = g.sum_all(gp)?;
            let t = g.add(s, s2)?;
            let t = g.mul(t, s3)?;
            return readout(g, t, seed);
        }
        AuditCase::Softmax => {
            let x = g.param("x")?;
            let a = g.softmax(x, 2)?;
            let b = g.softmax(x, 1)?;
            g.add(a, b)?
        }
        AuditCase::ShapeOps => {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let c = g.concat(&[a, b], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let parts = g.split(p, 2, &[2, 3])?;
            let r = g.reshape(parts[1], &[4, 6])?;
            let s = g.sum_axes(r, &[0])?;
            let m = g.mean_axes(parts[0], &[1, 2])?;
            let ss = g.sum_all(s)?;
            let sq = g.square(m);
            let ms = g.sum_all(sq)?;
            g.mul(ss, ms)?
        }
        AuditCase::ResBlock => {
            let (x, t) = (g.param("x")?, g.param("temb")?);
            layers::res_block(g, "rb", x, t, 2)?
        }
        AuditCase::TimeEmbed => layers::time_embed(g, &[1, 37, 999], 8)?,
        AuditCase::SpatialAttention => {
            let x = g.param("v")?;
            fusion::spatial_attention(g, "mm.sa_v", x)?.0
        }
        AuditCase::ChannelAttention => {
            let (v, n) = (g.param("v")?, g.param("n")?);
            let f = g.concat(&[v, n], 1)?;
            fusion::channel_attention(g, "mm.ca", f)?.0
        }
        AuditCase::Mmfm => {
            let (v, n) = (g.param("v")?, g.param("n")?);
            fusion::mmfm(g, "mm", v, n)?
        }
        AuditCase::Uaca => {
            let (q, k, v, ur) = (g.param("q")?, g.param("k")?, g.param("v")?, g.param("u_raw")?);
            let u = g.sigmoid(ur);
            fusion::uaca(g, q, k, v, u)?.0
        }
        AuditCase::Uafm => {
            let (xv, xn) = (g.param("xv")?, g.param("xn")?);
            let r = fusion::uafm(g, "ua", xv, xn)?;
            let u = g.sum_all(r.u)?;
            let o = g.sum_all(r.out)?;
            let both = g.mul(u, o)?;
            let both = g.reshape(both, &[1, 1, 1])?;
            let ro = readout(g, r.out, seed)?;
            return g.add(ro, both);
        }
        AuditCase::FeedbackLoss => {
            let (eu, em, dr) = (g.param("eps_u")?, g.param("eps_m")?, g.param("d_raw")?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = g.input(Tensor::<f32>::randn(g.shape(eu), &mut rng).cast::<T>())?;
            let d = g.sigmoid(dr);
            let cfg = GateConfig {
                lambda: 0.5,
                ..GateConfig::default()
            };
            return Ok(dammp::total_loss(g, eps, eu, em, d, &cfg)?.total);
        }
        AuditCase::Network => {
            let cfg = audit_net();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [4, 1, side, side];
            let mut mk = |g: &mut Graph<T>| -> Result<Var> { g.input(Tensor::<f32>::randn(&shape, &mut rng).cast::<T>()) };
            let (x, v, n, eps) = (mk(g)?, mk(g)?, mk(g)?, mk(g)?);
            let b = network::forward_dual(g, &cfg, x, v, n, &[3, 700, 120, 999])?;
            let gate = GateConfig {
                lambda: 0.5,
                ..GateConfig::default()
            };
            return Ok(dammp::total_loss(g, eps, b.eps_u, b.eps_m, b.d, &gate)?.total);
        }
    };
    readout(g, out, seed)
}

#[derive(Clone, Debug)]
pub struct AuditOutcome {
    pub case: AuditCase,
    pub report: GradReport,
}

/// Options for either precision; the differences are always taken at 64-bit.
pub fn default_options(seed: u64, tolerance: f64) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: 1e-6,
        tolerance,
        mode: Mode::Train,
        max_per_param: Some(12),
        seed,
    }
}

/// Audits one case: reverse-mode gradients in precision `T` against 64-bit
/// central differences of the same function.
pub fn audit_case<T: Scalar>(case: AuditCase, seed: u64, opts: &GradCheckOptions) -> Result<AuditOutcome> {
    let inst = instance(case, seed)?;
    let store: ParamStore<T> = inst.store.cast();
    let side = inst.side;
    let report = grad_check_with(
        |g: &mut Graph<T>| forward(case, g, side, seed),
        |g: &mut Graph<f64>| forward(case, g, side, seed),
        &store,
        opts,
    )?;
    Ok(AuditOutcome { case, report })
}

/// Audits every case.
pub fn audit_all<T: Scalar>(seed: u64, opts: &GradCheckOptions) -> Result<Vec<AuditOutcome>> {
    AuditCase::ALL.iter().map(|&c| audit_case::<T>(c, seed, opts)).collect()
}
