//! The unified uni-modal / multi-modal noise predictor.
//!
//! Two modality encoders (vessel, nuclei) each see their condition image
//! concatenated with the noisy target. One decoder, with one set of weights,
//! runs twice: on the vessel bottleneck and skips alone (uni-modal branch),
//! and on fused skips and a fused bottleneck (multi-modal branch). Skips are
//! fused per level by [`crate::fusion::mmfm`]; the bottleneck by
//! [`crate::fusion::uafm`], which also yields the uncertainty map `U` whose
//! spatial mean is the divergence `d`.

pub mod layers;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion;
use crate::numerics::{Graph, Mode, ParamStore, Scalar, Tensor, Var};

use layers::{conv, group_norm, init_conv, init_conv_zero, init_norm, init_res_block, res_block};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub groupnorm_groups: usize,
    /// Reduction ratio of the fusion gating branches.
    pub reduction: usize,
    /// Attention width of the uncertainty-aware fusion.
    pub head_dim: usize,
    /// Value of every uncertainty entry at initialization.
    pub uncertainty_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            time_embed_dim: 64,
            groupnorm_groups: 8,
            reduction: 4,
            head_dim: 32,
            uncertainty_init: 0.05,
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_mults[l]
    }

    /// Side length of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.is_empty() {
            return bad("channel_mults must not be empty".into());
        }
        let positive = [
            ("image_size", self.image_size),
            ("base_channels", self.base_channels),
            ("blocks_per_level", self.blocks_per_level),
            ("time_embed_dim", self.time_embed_dim),
            ("groupnorm_groups", self.groupnorm_groups),
            ("reduction", self.reduction),
            ("head_dim", self.head_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !(self.uncertainty_init > 0.0 && self.uncertainty_init < 1.0) {
            return bad(format!("uncertainty_init {} outside (0,1)", self.uncertainty_init));
        }
        if self.channel_mults.contains(&0) {
            return bad("channel_mults entries must be positive".into());
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size % div != 0 {
            return bad(format!(
                "image_size {} not divisible by 2^(levels-1) = {div}",
                self.image_size
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even".into());
        }
        for l in 0..self.levels() {
            if self.level_channels(l) % self.groupnorm_groups != 0 {
                return bad(format!(
                    "level {l} width {} not divisible by {} groups",
                    self.level_channels(l),
                    self.groupnorm_groups
                ));
            }
        }
        Ok(())
    }

    /// `key = value` lines, the checkpoint sidecar format.
    pub fn to_kv(&self) -> String {
        let mults: Vec<String> = self.channel_mults.iter().map(|m| m.to_string()).collect();
        format!(
            "image_size = {}\nbase_channels = {}\nchannel_mults = {}\nblocks_per_level = {}\n\
             time_embed_dim = {}\ngroupnorm_groups = {}\nreduction = {}\nhead_dim = {}\n\
             uncertainty_init = {}\n",
            self.image_size,
            self.base_channels,
            mults.join(","),
            self.blocks_per_level,
            self.time_embed_dim,
            self.groupnorm_groups,
            self.reduction,
            self.head_dim,
            self.uncertainty_init
        )
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "image_size" => self.image_size = num(value)?,
            "base_channels" => self.base_channels = num(value)?,
            "channel_mults" => {
                self.channel_mults = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(num)
                    .collect::<Result<_>>()?
            }
            "blocks_per_level" => self.blocks_per_level = num(value)?,
            "time_embed_dim" => self.time_embed_dim = num(value)?,
            "groupnorm_groups" => self.groupnorm_groups = num(value)?,
            "reduction" => self.reduction = num(value)?,
            "head_dim" => self.head_dim = num(value)?,
            "uncertainty_init" => {
                self.uncertainty_init = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{value}`")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}

/// Names of the two encoders.
pub const VESSEL_ENCODER: &str = "enc_v";
pub const NUCLEI_ENCODER: &str = "enc_n";

#[derive(Clone, Debug)]
pub struct UMMNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

fn init_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig, enc: &str) -> Result<()> {
    let temb = cfg.time_embed_dim;
    init_conv(store, rng, &format!("{enc}.conv_in"), 2, cfg.base_channels, 3, true)?;
    let mut ch = cfg.base_channels;
    for l in 0..cfg.levels() {
        let out = cfg.level_channels(l);
        for b in 0..cfg.blocks_per_level {
            init_res_block(store, rng, &format!("{enc}.down{l}.res{b}"), ch, out, temb)?;
            ch = out;
        }
        if l + 1 < cfg.levels() {
            init_conv(store, rng, &format!("{enc}.down{l}.pool"), ch, ch, 3, true)?;
        }
    }
    init_res_block(store, rng, &format!("{enc}.mid"), ch, ch, temb)
}

fn init_decoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Result<()> {
    let temb = cfg.time_embed_dim;
    let top = cfg.level_channels(cfg.levels() - 1);
    init_res_block(store, rng, "dec.mid", top, top, temb)?;
    for l in (0..cfg.levels()).rev() {
        let ch = cfg.level_channels(l);
        for b in 0..cfg.blocks_per_level {
            let in_ch = if b == 0 { 2 * ch } else { ch };
            init_res_block(store, rng, &format!("dec.up{l}.res{b}"), in_ch, ch, temb)?;
        }
        if l > 0 {
            init_conv(store, rng, &format!("dec.up{l}.conv"), ch, cfg.level_channels(l - 1), 3, true)?;
        }
    }
    init_norm(store, "dec.norm_out", cfg.base_channels)?;
    init_conv_zero(store, "dec.conv_out", cfg.base_channels, 1, 3)
}

/// Builds and initializes every parameter; a pure function of `(cfg, seed)`.
pub fn build_ummnet(cfg: &NetConfig, seed: u64) -> Result<UMMNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    layers::init_time_embed(&mut store, &mut rng, cfg.time_embed_dim)?;
    init_encoder(&mut store, &mut rng, cfg, VESSEL_ENCODER)?;
    init_encoder(&mut store, &mut rng, cfg, NUCLEI_ENCODER)?;
    for l in 0..cfg.levels() {
        fusion::init_mmfm(&mut store, &mut rng, &format!("mmfm{l}"), cfg.level_channels(l), cfg.reduction)?;
    }
    let top = cfg.level_channels(cfg.levels() - 1);
    fusion::init_uafm(&mut store, &mut rng, "uafm", top, cfg.head_dim, cfg.uncertainty_init)?;
    init_decoder(&mut store, &mut rng, cfg)?;
    Ok(UMMNet {
        config: cfg.clone(),
        params: store,
    })
}

struct EncoderOut {
    skips: Vec<Var>,
    bottleneck: Var,
}

fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    enc: &str,
    x_t: Var,
    cond: Var,
    temb_act: Var,
) -> Result<EncoderOut> {
    let groups = cfg.groupnorm_groups;
    let x = g.concat(&[x_t, cond], 1)?;
    let mut h = conv(g, &format!("{enc}.conv_in"), x, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        for b in 0..cfg.blocks_per_level {
            h = res_block(g, &format!("{enc}.down{l}.res{b}"), h, temb_act, groups)?;
        }
        skips.push(h);
        if l + 1 < cfg.levels() {
            h = conv(g, &format!("{enc}.down{l}.pool"), h, 2, 1)?;
        }
    }
    let bottleneck = res_block(g, &format!("{enc}.mid"), h, temb_act, groups)?;
    Ok(EncoderOut { skips, bottleneck })
}

fn decode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    bottleneck: Var,
    skips: &[Var],
    temb_act: Var,
) -> Result<Var> {
    let groups = cfg.groupnorm_groups;
    let mut h = res_block(g, "dec.mid", bottleneck, temb_act, groups)?;
    for l in (0..cfg.levels()).rev() {
        h = g.concat(&[h, skips[l]], 1)?;
        for b in 0..cfg.blocks_per_level {
            h = res_block(g, &format!("dec.up{l}.res{b}"), h, temb_act, groups)?;
        }
        if l > 0 {
            h = g.upsample2x(h)?;
            h = conv(g, &format!("dec.up{l}.conv"), h, 1, 1)?;
        }
    }
    let h = group_norm(g, "dec.norm_out", h, groups)?;
    let h = g.silu(h);
    conv(g, "dec.conv_out", h, 1, 1)
}

/// Graph handles of one dual forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// Uni-modal noise prediction, shape of `x_t`.
    pub eps_u: Var,
    /// Multi-modal noise prediction, shape of `x_t`.
    pub eps_m: Var,
    /// Uncertainty map `[N, L, 1]` over bottleneck tokens.
    pub u: Var,
    /// Divergence per sample, `[N]`.
    pub d: Var,
}

fn check_inputs<T: Scalar>(g: &Graph<T>, cfg: &NetConfig, x_t: Var, conds: &[Var], ts: &[usize]) -> Result<()> {
    let s = g.shape(x_t);
    let want = [s[0], 1, cfg.image_size, cfg.image_size];
    if s != want {
        return Err(Error::shape("forward x_t", s, &want));
    }
    for &c in conds {
        if g.shape(c) != s {
            return Err(Error::shape("forward condition", g.shape(c), s));
        }
    }
    if ts.len() != s[0] {
        return Err(Error::InvalidArgument(format!(
            "{} timesteps for batch of {}",
            ts.len(),
            s[0]
        )));
    }
    Ok(())
}

fn shared_time<T: Scalar>(g: &mut Graph<T>, cfg: &NetConfig, ts: &[usize]) -> Result<Var> {
    let temb = layers::time_embed(g, ts, cfg.time_embed_dim)?;
    Ok(g.silu(temb))
}

/// Runs both branches. Inputs are `[N, 1, S, S]` in model space; `ts` are
/// original-chain timesteps, one per sample.
pub fn forward_dual<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    x_t: Var,
    y_v: Var,
    y_n: Var,
    ts: &[usize],
) -> Result<BranchVars> {
    check_inputs(g, cfg, x_t, &[y_v, y_n], ts)?;
    let temb = shared_time(g, cfg, ts)?;
    let ev = encode(g, cfg, VESSEL_ENCODER, x_t, y_v, temb)?;
    let en = encode(g, cfg, NUCLEI_ENCODER, x_t, y_n, temb)?;

    let eps_u = decode(g, cfg, ev.bottleneck, &ev.skips, temb)?;

    let mut fused = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        fused.push(fusion::mmfm(g, &format!("mmfm{l}"), ev.skips[l], en.skips[l])?);
    }
    let side = cfg.bottleneck_size();
    let tv = fusion::to_tokens(g, ev.bottleneck)?;
    let tn = fusion::to_tokens(g, en.bottleneck)?;
    let ua = fusion::uafm(g, "uafm", tv, tn)?;
    let bottleneck = fusion::from_tokens(g, ua.out, side, side)?;
    let eps_m = decode(g, cfg, bottleneck, &fused, temb)?;

    let d = g.per_sample(ua.u, true)?;
    Ok(BranchVars {
        eps_u,
        eps_m,
        u: ua.u,
        d,
    })
}

/// The uni-modal branch alone; never touches the nuclei encoder.
pub fn forward_uni<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    x_t: Var,
    y_v: Var,
    ts: &[usize],
) -> Result<Var> {
    check_inputs(g, cfg, x_t, &[y_v], ts)?;
    let temb = shared_time(g, cfg, ts)?;
    let ev = encode(g, cfg, VESSEL_ENCODER, x_t, y_v, temb)?;
    decode(g, cfg, ev.bottleneck, &ev.skips, temb)
}

/// Tensor-valued branch outputs.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub eps_u: Tensor,
    pub eps_m: Tensor,
    pub u: Tensor,
    pub d: Vec<f32>,
}

impl UMMNet {
    pub fn forward_dual(
        &self,
        x_t: &Tensor,
        y_v: &Tensor,
        y_n: &Tensor,
        ts: &[usize],
        mode: Mode,
    ) -> Result<BranchOutputs> {
        let mut g = Graph::new(&self.params, mode);
        let (x, v, n) = (g.input(x_t.clone())?, g.input(y_v.clone())?, g.input(y_n.clone())?);
        let b = forward_dual(&mut g, &self.config, x, v, n, ts)?;
        Ok(BranchOutputs {
            eps_u: g.value(b.eps_u).clone(),
            eps_m: g.value(b.eps_m).clone(),
            u: g.value(b.u).clone(),
            d: g.value(b.d).data().to_vec(),
        })
    }

    pub fn forward_uni(&self, x_t: &Tensor, y_v: &Tensor, ts: &[usize], mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, mode);
        let (x, v) = (g.input(x_t.clone())?, g.input(y_v.clone())?);
        let e = forward_uni(&mut g, &self.config, x, v, ts)?;
        Ok(g.value(e).clone())
    }

    /// Trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> NetConfig {
        NetConfig {
            image_size: 8,
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            time_embed_dim: 8,
            groupnorm_groups: 4,
            reduction: 4,
            head_dim: 4,
            uncertainty_init: 0.3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = small();
        c.image_size = 10;
        c.channel_mults = vec![1, 2, 2];
        assert!(c.validate().is_err());
        let mut c = small();
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
        let mut c = small();
        c.groupnorm_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let c = small();
        let mut d = NetConfig::default();
        for line in c.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(d.set(k.trim(), v.trim()).unwrap());
        }
        assert_eq!(c, d);
    }

    #[test]
    fn deterministic_build_and_zero_head() {
        let a = build_ummnet(&small(), 5).unwrap();
        let b = build_ummnet(&small(), 5).unwrap();
        assert!(a.params.same_values(&b.params));
        let c = build_ummnet(&small(), 6).unwrap();
        assert!(!a.params.same_values(&c.params));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 1, 8, 8], &mut rng);
        let v = Tensor::randn(&[3, 1, 8, 8], &mut rng);
        let n = Tensor::randn(&[3, 1, 8, 8], &mut rng);
        let out = a.forward_dual(&x, &v, &n, &[1, 500, 1000], Mode::Train).unwrap();
        assert!(out.eps_u.data().iter().all(|&e| e == 0.0));
        assert!(out.eps_m.data().iter().all(|&e| e == 0.0));
        assert!(out.u.data().iter().all(|&u| u > 0.0 && u < 1.0));
        assert_eq!(out.d.len(), 3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = build_ummnet(&small(), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let bad = Tensor::zeros(&[1, 1, 8, 4]);
        assert!(net.forward_dual(&x, &x, &bad, &[3], Mode::Eval).is_err());
        assert!(net.forward_uni(&x, &x, &[3, 4], Mode::Eval).is_err());
    }
}
