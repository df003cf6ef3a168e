//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `DAMM_ACCEPTANCE_ONLY=1,2,8` restricts the run to the listed criteria;
//! everything else is reported as SKIP.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use damm_core::audit::{audit_all, default_options};
use damm_core::data::{make_dataset, DatasetSpec, SamplePair};
use damm_core::dammp::{dfl, fusion_indicator, gate_mask, select_output, trusts_fusion, GateConfig};
use damm_core::fusion::uaca;
use damm_core::metrics::{psnr, ssim};
use damm_core::numerics::io::{decode_pack, decode_tensor, encode_pack, encode_tensor};
use damm_core::schedule::{to_image_space, to_model_space};
use damm_core::trainer::{evaluate, reverse_chain, sample_rng, Branch, EvalReport};
use damm_core::{Graph, Mode, NetConfig, NoiseSchedule, ParamStore, Tensor, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn gradient_audit() -> Verdict {
    let start = Instant::now();
    let outcomes = audit_all::<f32>(1, &default_options(1, 1e-3)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for o in &outcomes {
        ensure(
            o.report.passed,
            format!("{} failed, max rel err {:.2e}", o.case.name(), o.report.max_rel_error()),
        )?;
        worst = worst.max(o.report.max_rel_error());
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} cases, worst rel err {worst:.2e}, {:.1}s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn recover(sched: &NoiseSchedule) -> Result<f32, String> {
    let x0 = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (y, x) = ((i / 32) as f32, (i % 32) as f32);
        0.5 + 0.4 * ((x / 5.0).sin() * (y / 7.0).cos())
    });
    let x0m = to_model_space(&x0);
    let out = reverse_chain(sched, x0.shape(), &mut [sample_rng(4, 0)], |x, i, _| {
        Ok(common::analytic_eps(x, &x0m, sched.alpha_bar(i)?))
    })
    .map_err(|e| e.to_string())?;
    let img = to_image_space(&out);
    Ok(img.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
}

fn diffusion_correctness() -> Verdict {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let r = s.respace(150).map_err(|e| e.to_string())?;
    for sched in [&s, &r] {
        let mut p = 1.0f64;
        for t in 1..=sched.steps() {
            p *= 1.0 - sched.beta(t).unwrap();
            ensure((sched.alpha_bar(t).unwrap() - p).abs() <= 1e-7, format!("alpha_bar product off at t={t}"))?;
        }
    }
    let n = 10_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (t, x0) in [(1usize, 0.8f64), (250, -0.3), (600, 0.5), (1000, 1.0)] {
        let ab = s.alpha_bar(t).unwrap();
        let eps = Tensor::randn(&[n], &mut rng);
        let v = to64(&s.q_sample(&Tensor::full(&[n], x0 as f32), t, &eps).unwrap());
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sig2) = (ab.sqrt() * x0, 1.0 - ab);
        ensure((mean - mu).abs() <= 3.0 * (sig2 / n as f64).sqrt(), format!("q_sample mean at t={t}"))?;
        ensure(
            (var - sig2).abs() <= 3.0 * sig2 * (2.0 / (n - 1) as f64).sqrt(),
            format!("q_sample variance at t={t}"),
        )?;
    }
    let full = recover(&s)?;
    let short = recover(&r)?;
    ensure(full < 0.05 && short < 0.05, format!("recovery error {full:.4} / {short:.4}"))?;
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "recovery max-abs {full:.4} (1000 steps) {short:.4} (150 steps), {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn attention_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let (lq, lk, d) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..6));
        let q: Tensor = Tensor::rand_uniform(&[1, lq, d], -2.0, 2.0, &mut rng);
        let k: Tensor = Tensor::rand_uniform(&[1, lk, d], -2.0, 2.0, &mut rng);
        let v: Tensor = Tensor::rand_uniform(&[1, lk, d], -2.0, 2.0, &mut rng);
        let random_u: Tensor = Tensor::rand_uniform(&[1, lk, 1], 0.0, 1.0, &mut rng);
        let run = |u: Tensor| {
            let mut g = Graph::<f32>::detached(Mode::Eval);
            let (qv, kv, vv, uv) = (
                g.input(q.clone()).unwrap(),
                g.input(k.clone()).unwrap(),
                g.input(v.clone()).unwrap(),
                g.input(u).unwrap(),
            );
            let (o, a) = uaca(&mut g, qv, kv, vv, uv).unwrap();
            (to64(g.value(o)), to64(g.value(a)))
        };
        let (out, attn) = run(Tensor::zeros(&[1, lk, 1]));
        let (eo, ea) = common::plain_attention(&to64(&q), &to64(&k), &to64(&v), lq, lk, d, &vec![1.0; lk]);
        for (a, b) in out.iter().chain(&attn).zip(eo.iter().chain(&ea)) {
            worst[0] = worst[0].max((a - b).abs());
        }
        let (out, attn) = run(Tensor::ones(&[1, lk, 1]));
        let vv = to64(&v);
        for a in &attn {
            worst[1] = worst[1].max((a - 1.0 / lk as f64).abs());
        }
        for i in 0..lq {
            for c in 0..d {
                let mean = (0..lk).map(|j| vv[j * d + c]).sum::<f64>() / lk as f64;
                worst[1] = worst[1].max((out[i * d + c] - mean).abs());
            }
        }
        let (_, attn) = run(random_u);
        for row in attn.chunks(lk) {
            worst[2] = worst[2].max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst[0] <= 1e-6, format!("U=0 differs from plain attention by {:.2e}", worst[0]))?;
    ensure(worst[1] <= 1e-6, format!("U=1 differs from uniform attention by {:.2e}", worst[1]))?;
    ensure(worst[2] <= 1e-5, format!("row sums off by {:.2e}", worst[2]))?;
    Ok(format!(
        "U=0 {:.1e}, U=1 {:.1e}, row sums {:.1e} over 100 instances",
        worst[0], worst[1], worst[2]
    ))
}

fn dfl_value(d: f64, e: bool, cfg: &GateConfig) -> f64 {
    let mut g = Graph::<f64>::detached(Mode::Eval);
    let dv = g.input(Tensor::new(&[1], vec![d]).unwrap()).unwrap();
    let v = dfl(&mut g, dv, &[e], cfg).unwrap();
    g.value(v).item()
}

fn grid_argmin(f: impl Fn(f64) -> f64) -> f64 {
    (1..1000)
        .map(|k| k as f64 / 1000.0)
        .min_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap())
        .unwrap()
}

fn dammp_logic() -> Verdict {
    let rows = |r: &[&[f32]]| Tensor::new(&[r.len(), 1, 1, r[0].len()], r.concat()).unwrap();
    let eps = rows(&[&[1.0, -1.0], &[1.0, -1.0], &[1.0, -1.0], &[0.0, 0.0]]);
    let eps_u = rows(&[&[0.0, 0.0], &[1.0, -1.0], &[0.5, -1.0], &[0.25, 0.0]]);
    let eps_m = rows(&[&[1.0, -1.0], &[0.0, 0.0], &[1.0, -0.5], &[0.0, -0.25]]);
    let e = fusion_indicator(&eps, &eps_u, &eps_m).map_err(|e| e.to_string())?;
    ensure(e == vec![true, false, true, true], format!("indicator table {e:?}"))?;
    for (d, fused) in [(0.3f32, true), (0.5, true), (0.7, false), (0.0, true), (1.0, false)] {
        ensure(trusts_fusion(d, 0.5) == fused, format!("gate at d={d}"))?;
    }
    ensure(gate_mask(&[0.3, 0.5, 0.7], 0.5) == vec![true, true, false], "gate mask")?;
    let su = rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let sm = rows(&[&[-1.0, -2.0], &[-3.0, -4.0], &[-5.0, -6.0]]);
    let out = select_output(&su, &sm, &[0.3, 0.5, 0.7], 0.5).map_err(|e| e.to_string())?;
    ensure(out.data() == [-1.0, -2.0, -3.0, -4.0, 5.0, 6.0], "selector table")?;

    let cfg = GateConfig::default();
    for c in [cfg, GateConfig { alpha: 0.0, ..cfg }] {
        ensure(dfl_value(0.1, true, &c) < dfl_value(0.9, true, &c), "feedback does not favour low d when e=1")?;
        ensure(dfl_value(0.9, false, &c) < dfl_value(0.1, false, &c), "feedback does not favour high d when e=0")?;
    }
    let mut notes = Vec::new();
    for (alpha, gamma) in [(cfg.alpha, cfg.gamma), (5.0, 0.5), (20.0, 0.3)] {
        let c = GateConfig { alpha, gamma, ..cfg };
        let best = grid_argmin(|d| dfl_value(d, false, &c));
        // Root of -1/d + 2α(d-γ) = 0; when it lies beyond 1 the loss falls
        // monotonically over the grid.
        let root = (2.0 * alpha * gamma + (4.0 * alpha * alpha * gamma * gamma + 8.0 * alpha).sqrt()) / (4.0 * alpha);
        let expect = if root < 1.0 { root } else { 0.999 };
        ensure(
            (best - expect).abs() <= 1e-3,
            format!("α={alpha} γ={gamma}: grid {best} vs stationary {expect:.4}"),
        )?;
        notes.push(format!("α={alpha}:{best}"));
    }
    Ok(format!("truth tables exact; grid minimizers {}", notes.join(" ")))
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(11..24), rng.random_range(11..24));
        let a: Tensor = Tensor::rand_uniform(&[h, w], 0.0, 1.0, &mut rng);
        let jitter: Tensor = Tensor::rand_uniform(&[h, w], -0.5, 0.5, &mut rng);
        let amp = rng.random_range(0.0..0.3) as f32;
        let b = a.zip_map(&jitter, |v, j| (v + amp * j).clamp(0.0, 1.0)).unwrap();
        worst = worst.max((ssim(&a, &b).unwrap() - common::naive_ssim(&a, &b)).abs());
    }
    ensure(worst <= 1e-6, format!("ssim differs from naive loop by {worst:.2e}"))?;
    let z = Tensor::zeros(&[10, 10]);
    let mut one = Tensor::zeros(&[10, 10]);
    one.data_mut()[37] = 1.0;
    ensure(psnr(&z, &z, 1.0).unwrap() == f64::INFINITY, "psnr of identical images")?;
    ensure(psnr(&z, &Tensor::ones(&[10, 10]), 1.0).unwrap() == 0.0, "psnr at mse 1")?;
    ensure(psnr(&z, &one, 1.0).unwrap() == 20.0, "psnr at mse 0.01")?;
    Ok(format!("ssim max diff {worst:.1e} over 20 pairs; psnr cases exact"))
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        steps: 3,
        batch: 4,
        seed: 5,
        sample_steps: 10,
        net: NetConfig {
            image_size: 16,
            base_channels: 8,
            channel_mults: vec![1, 2],
            time_embed_dim: 16,
            groupnorm_groups: 4,
            head_dim: 8,
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn formats() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t: Tensor = Tensor::randn(&[2, 3, 5], &mut rng);
    t.data_mut()[..4].copy_from_slice(&[f32::NAN, -0.0, f32::INFINITY, 1e-45]);
    let mut bytes = Vec::new();
    encode_tensor(&t, &mut bytes);
    let back = decode_tensor(&bytes).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(back.shape() == t.shape() && bits(&back) == bits(&t), "tensor roundtrip not bit-exact")?;
    let mut store = ParamStore::new();
    store.insert("a.weight", t.clone()).unwrap();
    store.insert("a.bn.running_var", Tensor::ones(&[3])).unwrap();
    let packed = encode_pack(&store);
    let again = encode_pack(&decode_pack(&packed).map_err(|e| e.to_string())?);
    ensure(packed == again, "pack roundtrip not bit-exact")?;

    let data = make_dataset(&DatasetSpec { count: 6, image_size: 16, corrupt_fraction: 0.5, seed: 2, ..Default::default() })
        .map_err(|e| e.to_string())?
        .samples;
    let mut tr = Trainer::new(tiny_train_config()).map_err(|e| e.to_string())?;
    tr.run(&data, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.dpack");
    tr.save(&path).map_err(|e| e.to_string())?;
    let loaded = Trainer::load(&path).map_err(|e| e.to_string())?;
    let sched = tr.cfg.sampling_schedule().map_err(|e| e.to_string())?;
    for branch in [Branch::Dammp, Branch::Uni, Branch::Multi] {
        let a = evaluate(&tr.net, &data, &sched, 0.5, branch, 1, 3).map_err(|e| e.to_string())?;
        let b = evaluate(&loaded.net, &data, &sched, 0.5, branch, 1, 3).map_err(|e| e.to_string())?;
        let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(
            same(&a.metrics.ssim, &b.metrics.ssim) && same(&a.metrics.psnr, &b.metrics.psnr) && same(&a.d, &b.d),
            format!("{} metrics changed after reload", branch.name()),
        )?;
    }
    Ok("tensor and pack bit-exact; reloaded checkpoint reproduces all three evaluations".into())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn progress(tag: &str, step: u64, total: f64, start: Instant) {
    eprintln!("  [{tag}] step {step:>5} total {total:.4} ({:.0}s)", start.elapsed().as_secs_f64());
}

fn overfit() -> Verdict {
    let start = Instant::now();
    let ds = make_dataset(&DatasetSpec { count: 32, image_size: 32, corrupt_fraction: 0.0, seed: 11, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { steps: 2000, seed: 11, ..TrainConfig::default() };
    let mut tr = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    tr.run(&ds.samples, |tr, b| {
        trace.push(b.total);
        if tr.step % 250 == 0 {
            progress("overfit", tr.step, b.total, start);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure(trace.iter().all(|v| v.is_finite()), "non-finite loss")?;
    let early = mean(&trace[..10]);
    let late = mean(&trace[trace.len() - 10..]);
    ensure(late < 0.3 * early, format!("final {late:.4} vs 0.3 × {early:.4}"))?;
    within(start, Duration::from_secs(30 * 60))?;
    Ok(format!(
        "10-step average {early:.4} -> {late:.4} (ratio {:.3}), {:.0}s",
        late / early,
        start.elapsed().as_secs_f64()
    ))
}

struct MixedRun {
    dammp: EvalReport,
    uni: EvalReport,
    multi: EvalReport,
}

fn mixed_run() -> Result<MixedRun, String> {
    let start = Instant::now();
    let ds = make_dataset(&DatasetSpec {
        count: 512,
        image_size: 32,
        corrupt_fraction: 0.5,
        seed: 1,
        train_fraction: 0.875,
        val_fraction: 0.125,
    })
    .map_err(|e| e.to_string())?;
    let train = ds.subset(&ds.split.train);
    let val: Vec<SamplePair> = ds.subset(&ds.split.val);
    let cfg = TrainConfig { steps: 5000, seed: 1, ..TrainConfig::default() };
    let mut tr = Trainer::new(cfg).map_err(|e| e.to_string())?;
    tr.run(&train, |tr, b| {
        if tr.step % 500 == 0 {
            progress("mixed", tr.step, b.total, start);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let sched = tr.cfg.sampling_schedule().map_err(|e| e.to_string())?;
    let gamma = tr.cfg.gate.gamma;
    let run = |branch| evaluate(&tr.net, &val, &sched, gamma, branch, 77, 16).map_err(|e| e.to_string());
    let out = MixedRun { dammp: run(Branch::Dammp)?, uni: run(Branch::Uni)?, multi: run(Branch::Multi)? };
    eprintln!("  [mixed] trained and evaluated in {:.0}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn divergence_discrimination(run: &MixedRun) -> Verdict {
    let r = &run.dammp;
    let (clean, corrupt) = (r.mean_d_clean().unwrap_or(f64::NAN), r.mean_d_corrupt().unwrap_or(f64::NAN));
    let acc = r.selection_accuracy().unwrap_or(0.0);
    let detail = format!(
        "mean d clean {clean:.4} corrupted {corrupt:.4} (gap {:.4}), selection accuracy {acc:.3} on {} samples",
        corrupt - clean,
        r.d.len()
    );
    ensure(corrupt - clean >= 0.10 && acc >= 0.80, detail.clone())?;
    Ok(detail)
}

fn fusion_direction(run: &MixedRun) -> Verdict {
    let clean_mean = |r: &EvalReport| {
        let v: Vec<f64> = r.metrics.ssim.iter().zip(&r.consistent).filter(|(_, &c)| c).map(|(&s, _)| s).collect();
        mean(&v)
    };
    let (uni_c, multi_c) = (clean_mean(&run.uni), clean_mean(&run.multi));
    let (dammp, uni, multi) = (mean(&run.dammp.metrics.ssim), mean(&run.uni.metrics.ssim), mean(&run.multi.metrics.ssim));
    let detail = format!(
        "clean: multi {multi_c:.4} uni {uni_c:.4}; mixed: dammp {dammp:.4} uni {uni:.4} multi {multi:.4}"
    );
    ensure(multi_c >= uni_c - 0.005 && dammp >= uni.max(multi) - 0.005, detail.clone())?;
    Ok(detail)
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("DAMM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "gradient audit",
        "diffusion correctness",
        "attention algebra",
        "gate and feedback logic",
        "overfit sanity",
        "divergence discrimination",
        "fusion benefit direction",
        "metrics oracle",
        "formats and checkpoints",
    ];
    let mut results: Vec<Option<Verdict>> = vec![None; 9];
    let quick: [(usize, fn() -> Verdict); 6] = [
        (0, gradient_audit),
        (1, diffusion_correctness),
        (2, attention_algebra),
        (3, dammp_logic),
        (7, metrics_oracle),
        (8, formats),
    ];
    for (i, f) in quick {
        if wanted(i as u32 + 1) {
            results[i] = Some(guarded(f));
        }
    }
    if wanted(5) {
        results[4] = Some(guarded(overfit));
    }
    if wanted(6) || wanted(7) {
        match guarded(mixed_run) {
            Ok(run) => {
                results[5] = wanted(6).then(|| guarded(|| divergence_discrimination(&run)));
                results[6] = wanted(7).then(|| guarded(|| fusion_direction(&run)));
            }
            Err(e) => {
                results[5] = wanted(6).then(|| Err(e.clone()));
                results[6] = wanted(7).then(|| Err(e));
            }
        }
    }
    println!();
    let mut failed = 0;
    for (i, (name, r)) in names.iter().zip(&results).enumerate() {
        match r {
            None => println!("criterion {} {name:<26} SKIP", i + 1),
            Some(Ok(d)) => println!("criterion {} {name:<26} PASS  {d}", i + 1),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {} {name:<26} FAIL  {d}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
