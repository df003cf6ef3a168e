//! Feature fusion between the vessel and nuclei streams.
//!
//! The multi-modal fusion module gates each modality spatially, gates the
//! concatenation channel-wise and compresses back to `C` channels. The
//! uncertainty-aware fusion module is cross-attention from vessel queries to
//! nuclei keys/values whose logits are attenuated per key by `1 − U`, where
//! `U = σ(X_n·W_n + b)` is a learned per-token uncertainty.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::layers::{self, batch_norm, conv, init_batch_norm, init_conv, init_linear};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Width of the reduced hidden layer in the gating branches.
pub fn reduced(ch: usize, r: usize) -> usize {
    (ch / r).max(1)
}

fn init_spatial(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, r: usize) -> Result<()> {
    let h = reduced(c, r);
    init_conv(store, rng, &format!("{name}.conv1"), c, h, 3, false)?;
    init_batch_norm(store, &format!("{name}.bn1"), h)?;
    init_conv(store, rng, &format!("{name}.conv2"), h, 1, 3, false)?;
    init_batch_norm(store, &format!("{name}.bn2"), 1)
}

/// Parameters of one multi-modal fusion module at width `c`.
pub fn init_mmfm(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, r: usize) -> Result<()> {
    init_spatial(store, rng, &format!("{name}.sa_v"), c, r)?;
    init_spatial(store, rng, &format!("{name}.sa_n"), c, r)?;
    let h = reduced(2 * c, r);
    init_linear(store, rng, &format!("{name}.ca.w1"), 2 * c, h, false)?;
    init_batch_norm(store, &format!("{name}.ca.bn1"), h)?;
    init_linear(store, rng, &format!("{name}.ca.w2"), h, 2 * c, false)?;
    init_batch_norm(store, &format!("{name}.ca.bn2"), 2 * c)?;
    init_conv(store, rng, &format!("{name}.proj"), 2 * c, c, 1, true)
}

/// Parameters of the uncertainty-aware fusion module: `W_q, W_k, W_v` (C×d),
/// the uncertainty head `W_n` (C×1) with its bias, and the d×C output
/// projection. `W_n` starts at zero and the bias at `logit(u_init)`, so every
/// entry of `U` equals `u_init` before training.
pub fn init_uafm(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, d: usize, u_init: f64) -> Result<()> {
    if !(u_init > 0.0 && u_init < 1.0) {
        return Err(Error::InvalidArgument(format!("initial uncertainty {u_init} outside (0,1)")));
    }
    init_linear(store, rng, &format!("{name}.wq"), c, d, false)?;
    init_linear(store, rng, &format!("{name}.wk"), c, d, false)?;
    init_linear(store, rng, &format!("{name}.wv"), c, d, false)?;
    store.insert(format!("{name}.wn.weight"), Tensor::zeros(&[c, 1]))?;
    store.insert(format!("{name}.wn.bias"), Tensor::full(&[1], (u_init / (1.0 - u_init)).ln() as f32))?;
    init_linear(store, rng, &format!("{name}.wo"), d, c, false)
}

/// Output and the single-channel gate map `w = σ(BN(Conv(ReLU(BN(Conv(x))))))`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, name: &str, x: Var) -> Result<(Var, Var)> {
    let h = conv(g, &format!("{name}.conv1"), x, 1, 1)?;
    let h = batch_norm(g, &format!("{name}.bn1"), h)?;
    let h = g.relu(h);
    let h = conv(g, &format!("{name}.conv2"), h, 1, 1)?;
    let h = batch_norm(g, &format!("{name}.bn2"), h)?;
    let w = g.sigmoid(h);
    Ok((g.mul(x, w)?, w))
}

/// Output and the per-channel gates `σ(BN(W₂·ReLU(BN(W₁·Avgpool(f)))))`, shape `[N, 2C, 1, 1]`.
pub fn channel_attention<T: Scalar>(g: &mut Graph<T>, name: &str, f: Var) -> Result<(Var, Var)> {
    let s = g.shape(f).to_vec();
    let pooled = g.global_avg_pool(f)?;
    let pooled = g.reshape(pooled, &[s[0], s[1]])?;
    let h = layers::linear(g, &format!("{name}.w1"), pooled)?;
    let h = batch_norm(g, &format!("{name}.bn1"), h)?;
    let h = g.relu(h);
    let h = layers::linear(g, &format!("{name}.w2"), h)?;
    if g.shape(h)[1] != s[1] {
        return Err(Error::shape("channel_attention", &s, g.shape(h)));
    }
    let h = batch_norm(g, &format!("{name}.bn2"), h)?;
    let w = g.sigmoid(h);
    let w = g.reshape(w, &[s[0], s[1], 1, 1])?;
    Ok((g.mul(f, w)?, w))
}

/// Fuses two `[N, C, H, W]` features into one of the same shape.
pub fn mmfm<T: Scalar>(g: &mut Graph<T>, name: &str, v: Var, n: Var) -> Result<Var> {
    if g.shape(v) != g.shape(n) {
        return Err(Error::shape("mmfm", g.shape(v), g.shape(n)));
    }
    let (v_sp, _) = spatial_attention(g, &format!("{name}.sa_v"), v)?;
    let (n_sp, _) = spatial_attention(g, &format!("{name}.sa_n"), n)?;
    let f_sp = g.concat(&[v_sp, n_sp], 1)?;
    let (f_se, _) = channel_attention(g, &format!("{name}.ca"), f_sp)?;
    conv(g, &format!("{name}.proj"), f_se, 1, 0)
}

/// Uncertainty-aware cross-attention `softmax(QKᵀ·(1−U)/√d)·V`.
///
/// `q: [N, Lq, d]`, `k, v: [N, Lk, d]`, `u: [N, Lk, 1]` with entries in
/// `[0, 1]`; a saturated sigmoid can reach either end. Column `j` of the logits is scaled by `1 − U_j`.
/// Returns the output `[N, Lq, d]` and the attention matrix `[N, Lq, Lk]`.
pub fn uaca<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, u: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv, su) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
        g.shape(u).to_vec(),
    );
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::shape("uaca q/k", &sq, &sk));
    }
    if sv.len() != 3 || sv[0] != sk[0] || sv[1] != sk[1] {
        return Err(Error::shape("uaca k/v", &sk, &sv));
    }
    if su != [sk[0], sk[1], 1] {
        return Err(Error::shape("uaca u", &su, &[sk[0], sk[1], 1]));
    }
    if g
        .value(u)
        .data()
        .iter()
        .any(|&x| !(x >= T::zero() && x <= T::one()))
    {
        return Err(Error::InvalidArgument("uncertainty must lie in [0, 1]".into()));
    }
    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.matmul(q, kt)?;
    let keep = g.affine(u, -1.0, 1.0);
    let keep = g.permute(keep, &[0, 2, 1])?;
    let logits = g.mul(logits, keep)?;
    let logits = g.scale(logits, 1.0 / (sq[2] as f64).sqrt());
    let attn = g.softmax(logits, 2)?;
    Ok((g.matmul(attn, v)?, attn))
}

/// Outputs of the uncertainty-aware fusion module.
#[derive(Clone, Copy, Debug)]
pub struct UafmVars {
    /// `[N, L, C]`, residual on the vessel tokens.
    pub out: Var,
    /// `[N, L, 1]` in [0, 1].
    pub u: Var,
    /// `[N, L, L]`.
    pub attn: Var,
}

/// `x_v, x_n: [N, L, C]` token sequences.
pub fn uafm<T: Scalar>(g: &mut Graph<T>, name: &str, x_v: Var, x_n: Var) -> Result<UafmVars> {
    if g.shape(x_v) != g.shape(x_n) || g.shape(x_v).len() != 3 {
        return Err(Error::shape("uafm", g.shape(x_v), g.shape(x_n)));
    }
    let q = layers::linear(g, &format!("{name}.wq"), x_v)?;
    let k = layers::linear(g, &format!("{name}.wk"), x_n)?;
    let v = layers::linear(g, &format!("{name}.wv"), x_n)?;
    let raw_u = layers::linear(g, &format!("{name}.wn"), x_n)?;
    let u = g.sigmoid(raw_u);
    let (ctx, attn) = uaca(g, q, k, v, u)?;
    let proj = layers::linear(g, &format!("{name}.wo"), ctx)?;
    let out = g.add(x_v, proj)?;
    Ok(UafmVars { out, u, attn })
}

/// `[N, C, H, W]` feature map to `[N, H·W, C]` tokens.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], h, w, s[2]])?;
    g.permute(r, &[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn uaca_two_by_two_brute_force() {
        // Q = [1, -2], K = [0.5, 1.5], V = [3, -1], U = [0.2, 0.7], d = 1.
        let mut g = Graph::<f64>::detached(Mode::Eval);
        let q = g.input(Tensor::new(&[1, 2, 1], vec![1.0, -2.0]).unwrap()).unwrap();
        let k = g.input(Tensor::new(&[1, 2, 1], vec![0.5, 1.5]).unwrap()).unwrap();
        let v = g.input(Tensor::new(&[1, 2, 1], vec![3.0, -1.0]).unwrap()).unwrap();
        let u = g.input(Tensor::new(&[1, 2, 1], vec![0.2, 0.7]).unwrap()).unwrap();
        let (out, attn) = uaca(&mut g, q, k, v, u).unwrap();
        let (qs, ks, vs, us) = ([1.0, -2.0], [0.5, 1.5], [3.0, -1.0], [0.2, 0.7]);
        for i in 0..2 {
            let l: Vec<f64> = (0..2).map(|j| qs[i] * ks[j] * (1.0 - us[j])).collect();
            let z: f64 = l.iter().map(|x| x.exp()).sum();
            let a: Vec<f64> = l.iter().map(|x| x.exp() / z).collect();
            let o = a[0] * vs[0] + a[1] * vs[1];
            assert!((g.value(out).data()[i] - o).abs() < 1e-12);
            assert!((g.value(attn).data()[2 * i] - a[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn uaca_rejects_out_of_range_uncertainty() {
        let mut g = Graph::<f64>::detached(Mode::Eval);
        let q = g.input(Tensor::ones(&[1, 2, 1])).unwrap();
        for bad in [1.5, -0.1, 1.0 + 1e-9] {
            let u = g.input(Tensor::new(&[1, 2, 1], vec![0.5, bad]).unwrap()).unwrap();
            assert!(uaca(&mut g, q, q, q, u).is_err());
        }
    }

    #[test]
    fn uafm_zero_uncertainty_head_gives_half() {
        let mut store = ParamStore::new();
        init_uafm(&mut store, &mut rng(), "u", 6, 4, 0.5).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let mut r = rng();
        let xv = g.input(Tensor::randn(&[2, 5, 6], &mut r)).unwrap();
        let xn = g.input(Tensor::randn(&[2, 5, 6], &mut r)).unwrap();
        let o = uafm(&mut g, "u", xv, xn).unwrap();
        assert!(g.value(o.u).data().iter().all(|&x| x == 0.5));
        assert_eq!(g.shape(o.out), g.shape(xv));
    }

    #[test]
    fn mmfm_shape_contract() {
        for c in [8, 16] {
            for hw in [8, 16] {
                let mut store = ParamStore::new();
                init_mmfm(&mut store, &mut rng(), "m", c, 4).unwrap();
                let mut g = Graph::new(&store, Mode::Train);
                let mut r = rng();
                let v = g.input(Tensor::randn(&[2, c, hw, hw], &mut r)).unwrap();
                let n = g.input(Tensor::randn(&[2, c, hw, hw], &mut r)).unwrap();
                let out = mmfm(&mut g, "m", v, n).unwrap();
                assert_eq!(g.shape(out), &[2, c, hw, hw]);
                assert!(g.value(out).is_finite());
                let bad = g.input(Tensor::randn(&[2, c, hw, 2 * hw], &mut r)).unwrap();
                assert!(mmfm(&mut g, "m", v, bad).is_err());
            }
        }
    }

    #[test]
    fn tokens_roundtrip() {
        let mut g = Graph::<f32>::detached(Mode::Eval);
        let x = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32)).unwrap();
        let t = to_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[2, 20, 3]);
        assert_eq!(g.value(t).at(&[1, 7, 2]), g.value(x).at(&[1, 2, 1, 2]));
        let back = from_tokens(&mut g, t, 4, 5).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
