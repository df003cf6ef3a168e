//! Training loop, checkpoints, the sampling chain with per-step branch
//! selection, and the evaluation harness.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dammp::{self, DflSign, GateConfig, LossBundle};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::{self, build_ummnet, NetConfig, UMMNet};
use crate::numerics::io::{decode_pack, encode_pack, write_atomic};
use crate::numerics::{Graph, Mode, ParamId, ParamStore, Tensor};
use crate::schedule::{to_image_space, to_model_space, NoiseSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub gate: GateConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 150,
            log_interval: 50,
            checkpoint_interval: 0,
            gate: GateConfig::default(),
            net: NetConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.timesteps == 0 || self.sample_steps == 0 {
            return Err(Error::Config("batch, timesteps and sample_steps must be positive".into()));
        }
        if self.sample_steps > self.timesteps {
            return Err(Error::Config(format!(
                "sample_steps {} exceeds timesteps {}",
                self.sample_steps, self.timesteps
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be positive and moment decays in [0,1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("adam_eps must be positive and clip_norm >= 0".into()));
        }
        self.gate.validate()?;
        self.net.validate()
    }

    /// Applies one `key = value`; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "sample_steps" => self.sample_steps = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "gamma" => self.gate.gamma = parse(key, value)?,
            "alpha" => self.gate.alpha = parse(key, value)?,
            "lambda" => self.gate.lambda = parse(key, value)?,
            "paper_literal_dfl" => {
                self.gate.dfl_sign = if parse::<bool>(key, value)? {
                    DflSign::PaperLiteral
                } else {
                    DflSign::Corrected
                }
            }
            _ => {
                if !self.net.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let literal = self.gate.dfl_sign == DflSign::PaperLiteral;
        format!(
            "steps = {}\nbatch = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nclip_norm = {}\n\
             seed = {}\ntimesteps = {}\nbeta_start = {}\nbeta_end = {}\nsample_steps = {}\n\
             log_interval = {}\ncheckpoint_interval = {}\ngamma = {}\nalpha = {}\nlambda = {}\n\
             paper_literal_dfl = {}\n{}",
            self.steps,
            self.batch,
            self.lr,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.clip_norm,
            self.seed,
            self.timesteps,
            self.beta_start,
            self.beta_end,
            self.sample_steps,
            self.log_interval,
            self.checkpoint_interval,
            self.gate.gamma,
            self.gate.alpha,
            self.gate.lambda,
            literal,
            self.net.to_kv()
        )
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampling_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule()?.respace(self.sample_steps)
    }
}

/// Bias-corrected adaptive-moment optimizer over the trainable entries.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<(ParamId, Tensor)>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<(ParamId, Tensor)> = params
            .ids()
            .filter(|&id| params.is_trainable(id))
            .map(|id| (id, Tensor::zeros(params.value(id).shape())))
            .collect();
        let v = m.iter().map(|(_, t)| t.clone()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently held by `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(self.t as i32)) as f32;
        let c2 = (1.0 - self.beta2.powi(self.t as i32)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for ((id, m), v) in self.m.iter_mut().zip(&mut self.v) {
            let (value, grad) = params.value_and_grad_mut(*id);
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn state_entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for ((id, m), v) in self.m.iter().zip(&self.v) {
            out.push((format!("{OPT_M}{}", params.name(*id)), m.clone()));
            out.push((format!("{OPT_V}{}", params.name(*id)), v.clone()));
        }
        out
    }
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

/// Conditions and target of a batch, stacked to `[N, 1, S, S]` in model space.
pub struct BatchTensors {
    pub x0: Tensor,
    pub y_v: Tensor,
    pub y_n: Tensor,
}

fn stack(parts: Vec<&Tensor>) -> Result<Tensor> {
    let s = Tensor::stack_rows(&parts)?;
    let sh = s.shape().to_vec();
    match sh.as_slice() {
        [n, h, w] => s.reshape(&[*n, 1, *h, *w]),
        _ => Err(Error::InvalidShape {
            shape: sh,
            reason: "samples must be [1, H, W]".into(),
        }),
    }
}

pub fn batch_tensors(batch: &[&SamplePair]) -> Result<BatchTensors> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(BatchTensors {
        x0: to_model_space(&stack(batch.iter().map(|s| &s.target).collect())?),
        y_v: to_model_space(&stack(batch.iter().map(|s| &s.vessel).collect())?),
        y_n: to_model_space(&stack(batch.iter().map(|s| &s.nuclei).collect())?),
    })
}

/// One optimization step on `batch`: uniform `t`, Gaussian `ε`, dual forward,
/// gated objective with feedback loss, backward, clip, update.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut UMMNet,
    opt: &mut Adam,
    batch: &[&SamplePair],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut R,
) -> Result<LossBundle> {
    let bt = batch_tensors(batch)?;
    let n = batch.len();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(bt.x0.shape(), rng);
    let x_t = sched.q_sample_batch(&bt.x0, &ts, &eps)?;

    let (bundle, grads, updates) = {
        let mut g = Graph::new(&net.params, Mode::Train);
        let x = g.input(x_t)?;
        let v = g.input(bt.y_v)?;
        let nn = g.input(bt.y_n)?;
        let e = g.input(eps)?;
        let b = network::forward_dual(&mut g, &net.config, x, v, nn, &ts)?;
        let vars = dammp::total_loss(&mut g, e, b.eps_u, b.eps_m, b.d, &cfg.gate)?;
        let bundle = LossBundle::read(&g, &vars, b.d);
        if !bundle.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l_u: bundle.l_u,
                l_m: bundle.l_m,
                l_dfl: bundle.l_dfl,
            });
        }
        let grads = g.backward(vars.total)?;
        (bundle, grads, g.take_buffer_updates())
    };
    net.params.zero_grads();
    net.params.accumulate(&grads);
    let norm = net.params.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            l_u: bundle.l_u,
            l_m: bundle.l_m,
            l_dfl: bundle.l_dfl,
        });
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        net.params.scale_grads((cfg.clip_norm / norm) as f32);
    }
    opt.step(&mut net.params);
    net.params.apply_buffer_updates(updates);
    Ok(bundle)
}

/// `step, l_u, l_m, l_dfl, total, mean_d`.
pub fn log_line(step: u64, b: &LossBundle) -> String {
    format!(
        "{step}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
        b.l_u,
        b.l_m,
        b.l_dfl,
        b.total,
        b.mean_d()
    )
}

pub const LOG_HEADER: &str = "step, l_u, l_m, l_dfl, total, mean_d";

#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: UMMNet,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    /// Completed optimization steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = build_ummnet(&cfg.net, cfg.seed)?;
        let opt = Adam::new(&net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            sched: cfg.schedule()?,
            net,
            opt,
            cfg,
            step: 0,
        })
    }

    /// Randomness of step `k` depends only on `(seed, k)`, so a resumed run
    /// continues the original trace.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7472_6169_6e00_0000);
        r.set_stream(self.step);
        r
    }

    /// Draws a batch without replacement from `data` and takes one step.
    pub fn train_step(&mut self, data: &[SamplePair]) -> Result<LossBundle> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let mut rng = self.step_rng();
        let k = self.cfg.batch.min(data.len());
        let picks = index::sample(&mut rng, data.len(), k);
        let batch: Vec<&SamplePair> = picks.iter().map(|i| &data[i]).collect();
        let b = train_step(&mut self.net, &mut self.opt, &batch, &self.sched, &self.cfg, self.step + 1, &mut rng)?;
        self.step += 1;
        Ok(b)
    }

    /// Runs until `cfg.steps` steps are complete, calling `on_step` after each.
    pub fn run(&mut self, data: &[SamplePair], mut on_step: impl FnMut(&Trainer, &LossBundle) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let b = self.train_step(data)?;
            on_step(self, &b)?;
        }
        Ok(())
    }

    /// Writes the parameters and optimizer moments as one DPACK1 file plus a
    /// `key = value` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.net.params.clone();
        for (name, t) in self.opt.state_entries(&self.net.params) {
            store.insert(name, t)?;
        }
        write_atomic(path, &encode_pack(&store))?;
        let side = format!(
            "step = {}\nadam_t = {}\n{}",
            self.step,
            self.opt.t,
            self.cfg.to_kv()
        );
        write_atomic(&sidecar_path(path), side.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let mut cfg = TrainConfig::default();
        let (mut step, mut adam_t) = (0u64, 0u64);
        for (k, v) in crate::config::parse_kv(&text)? {
            match k.as_str() {
                "step" => step = parse(&k, &v)?,
                "adam_t" => adam_t = parse(&k, &v)?,
                _ => cfg.set(&k, &v)?,
            }
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let stored = decode_pack(&bytes)?;
        let mut tr = Self::new(cfg)?;
        for name in tr.net.params.names().map(String::from).collect::<Vec<_>>() {
            let t = stored.get(&name)?;
            tr.net.params.set(&name, t.clone())?;
        }
        let expected = tr.net.params.len() + tr.opt.m.len() * 2;
        if stored.len() != expected {
            return Err(Error::Format {
                offset: 0,
                reason: format!("checkpoint holds {} entries, expected {expected}", stored.len()),
            });
        }
        for ((id, m), v) in tr.opt.m.iter_mut().zip(&mut tr.opt.v) {
            let name = tr.net.params.name(*id);
            *m = load_same(&stored, &format!("{OPT_M}{name}"), m.shape())?;
            *v = load_same(&stored, &format!("{OPT_V}{name}"), v.shape())?;
        }
        tr.opt.t = adam_t;
        tr.step = step;
        Ok(tr)
    }
}

fn load_same(store: &ParamStore, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = store.get(name)?;
    if t.shape() != shape {
        return Err(Error::shape("checkpoint entry", t.shape(), shape));
    }
    Ok(t.clone())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Which noise prediction drives the reverse chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Per-sample, per-step choice by the divergence gate.
    Dammp,
    Uni,
    Multi,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Dammp => "dammp",
            Branch::Uni => "uni",
            Branch::Multi => "multi",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dammp" => Ok(Branch::Dammp),
            "uni" => Ok(Branch::Uni),
            "multi" => Ok(Branch::Multi),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Generated images `[N, 1, S, S]` in [0,1].
    pub images: Tensor,
    /// Per sample, the divergence averaged over the reverse chain; empty for
    /// the uni-modal chain, which never computes it.
    pub mean_d: Vec<f64>,
    /// Per sample, the share of reverse steps that used the fused prediction.
    pub multi_share: Vec<f64>,
}

fn check_sampling_schedule(sched: &NoiseSchedule) -> Result<()> {
    let idx = sched.original_indices();
    if idx.len() != sched.steps() || idx.first() == Some(&0) || idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "sampling schedule needs strictly increasing original timesteps".into(),
        ));
    }
    Ok(())
}

fn draw_noise(shape: &[usize], rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(shape.iter().product());
    for r in rngs.iter_mut() {
        flat.extend_from_slice(Tensor::randn(&shape[1..], r).data());
    }
    Tensor::new(shape, flat)
}

/// Ancestral sampling over `sched` from `x_T ~ N(0, I)` of `shape`, with
/// `predict(x_t, step, original_t)` supplying the noise estimate. `rngs`
/// holds one stream per sample so results do not depend on batching.
pub fn reverse_chain(
    sched: &NoiseSchedule,
    shape: &[usize],
    rngs: &mut [ChaCha8Rng],
    mut predict: impl FnMut(&Tensor, usize, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    check_sampling_schedule(sched)?;
    if rngs.len() != shape[0] {
        return Err(Error::InvalidArgument(format!(
            "{} noise streams for batch of {}",
            rngs.len(),
            shape[0]
        )));
    }
    let mut x = draw_noise(shape, rngs)?;
    for i in (1..=sched.steps()).rev() {
        let eps = predict(&x, i, sched.original_index(i)?)?;
        let noise = if i > 1 { Some(draw_noise(shape, rngs)?) } else { None };
        x = sched.p_step(&x, i, &eps, noise.as_ref())?;
        x.ensure_finite("sampling chain")?;
    }
    Ok(x)
}

/// Samples targets for conditions `[N, 1, S, S]` in model space; `y_n` may
/// be `None` only for [`Branch::Uni`], which never reads it.
pub fn sample(
    net: &UMMNet,
    y_v: &Tensor,
    y_n: Option<&Tensor>,
    sched: &NoiseSchedule,
    gamma: f64,
    branch: Branch,
    rngs: &mut [ChaCha8Rng],
) -> Result<SampleOutput> {
    let n = y_v.batch();
    let y_n = match (branch, y_n) {
        (Branch::Uni, _) => None,
        (_, Some(t)) => Some(t),
        (_, None) => return Err(Error::InvalidArgument(format!("{branch} sampling needs the nuclei channel"))),
    };
    let mut d_sum = vec![0.0; n];
    let mut multi = vec![0usize; n];
    let x = reverse_chain(sched, y_v.shape(), rngs, |x, _, t| {
        let ts = vec![t; n];
        let Some(yn) = y_n else {
            return net.forward_uni(x, y_v, &ts, Mode::Eval);
        };
        let out = net.forward_dual(x, y_v, yn, &ts, Mode::Eval)?;
        for (s, &d) in d_sum.iter_mut().zip(&out.d) {
            *s += d as f64;
        }
        let d = match branch {
            Branch::Multi => vec![f32::NEG_INFINITY; n],
            _ => out.d,
        };
        for (c, &dd) in multi.iter_mut().zip(&d) {
            *c += dammp::trusts_fusion(dd, gamma as f32) as usize;
        }
        dammp::select_output(&out.eps_u, &out.eps_m, &d, gamma)
    })?;
    let steps = sched.steps() as f64;
    Ok(SampleOutput {
        images: to_image_space(&x),
        mean_d: if y_n.is_some() {
            d_sum.iter().map(|s| s / steps).collect()
        } else {
            Vec::new()
        },
        multi_share: multi.iter().map(|&c| c as f64 / steps).collect(),
    })
}

/// Per-sample noise stream for evaluation sample `index`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub branch: Branch,
    pub metrics: MetricReport,
    /// Chain-averaged divergence per sample (empty for the uni chain).
    pub d: Vec<f64>,
    pub consistent: Vec<bool>,
    pub multi_share: Vec<f64>,
    pub gamma: f64,
}

impl EvalReport {
    fn mean_d_where(&self, flag: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .d
            .iter()
            .zip(&self.consistent)
            .filter(|(_, &c)| c == flag)
            .map(|(&d, _)| d)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_d_clean(&self) -> Option<f64> {
        self.mean_d_where(true)
    }

    pub fn mean_d_corrupt(&self) -> Option<f64> {
        self.mean_d_where(false)
    }

    /// Share of samples whose chain-averaged divergence sends them to the
    /// branch their consistency flag calls for.
    pub fn selection_accuracy(&self) -> Option<f64> {
        if self.d.is_empty() {
            return None;
        }
        let hits = self
            .d
            .iter()
            .zip(&self.consistent)
            .filter(|(&d, &c)| dammp::trusts_fusion(d as f32, self.gamma as f32) == c)
            .count();
        Some(hits as f64 / self.d.len() as f64)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}\n", self.metrics);
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        if !self.d.is_empty() {
            s.push_str(&format!(
                "mean_d clean {}  corrupted {}  selection accuracy {}\n",
                fmt(self.mean_d_clean()),
                fmt(self.mean_d_corrupt()),
                fmt(self.selection_accuracy())
            ));
        }
        s
    }
}

/// Samples every pair with `branch` and scores it against its target.
pub fn evaluate(
    net: &UMMNet,
    samples: &[SamplePair],
    sched: &NoiseSchedule,
    gamma: f64,
    branch: Branch,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let batch = batch.max(1);
    let mut preds = Vec::with_capacity(samples.len());
    let mut d = Vec::new();
    let mut share = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(batch).enumerate() {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let y_v = to_model_space(&stack(refs.iter().map(|s| &s.vessel).collect())?);
        let y_n = match branch {
            Branch::Uni => None,
            _ => Some(to_model_space(&stack(refs.iter().map(|s| &s.nuclei).collect())?)),
        };
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len()).map(|k| sample_rng(seed, c * batch + k)).collect();
        let out = sample(net, &y_v, y_n.as_ref(), sched, gamma, branch, &mut rngs)?;
        for k in 0..chunk.len() {
            let img = Tensor::new(&chunk[k].target.shape().to_vec(), out.images.row(k).to_vec())?;
            preds.push(img);
        }
        d.extend(out.mean_d);
        share.extend(out.multi_share);
    }
    let targets: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(EvalReport {
        branch,
        metrics: MetricReport::compute(branch.name(), &preds, &targets)?,
        d,
        consistent: samples.iter().map(|s| s.consistent).collect(),
        multi_share: share,
        gamma,
    })
}
