use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use damm_core::audit::{audit_all, default_options, AuditOutcome};
use damm_core::config::{load_train_config, parse_kv};
use damm_core::data::{corpus_checksum, make_dataset, read_dataset, write_dataset, write_png, Dataset, DatasetSpec, SamplePair};
use damm_core::numerics::io::{read_tensor, write_atomic, write_tensor};
use damm_core::schedule::to_model_space;
use damm_core::trainer::{evaluate, log_line, sample_rng, Branch, EvalReport};
use damm_core::{Error, NoiseSchedule, Tensor, TrainConfig, Trainer};

use crate::error::{CliError, CliResult};
use crate::manifest::{file_digest, input_hash, RunManifest};
use crate::{EvalArgs, EvalMode, GenDataArgs, GradcheckArgs, Mode, Precision, SampleArgs, SplitChoice, Subset, TrainArgs};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn branch(mode: Mode) -> Branch {
    match mode {
        Mode::Dammp => Branch::Dammp,
        Mode::Uni => Branch::Uni,
        Mode::Multi => Branch::Multi,
    }
}

/// `<path>.manifest`, next to a single-file artifact.
fn manifest_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn dataset_digest(ds: &Dataset) -> String {
    let idx = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "{};train={};val={};test={}",
        corpus_checksum(&ds.samples),
        idx(&ds.split.train),
        idx(&ds.split.val),
        idx(&ds.split.test)
    )
}

fn checkpoint_digest(path: &Path) -> CliResult<String> {
    Ok(format!(
        "{}+{}",
        file_digest(path)?,
        file_digest(&damm_core::trainer::sidecar_path(path))?
    ))
}

fn split_indices(ds: &Dataset, split: SplitChoice) -> Vec<usize> {
    match split {
        SplitChoice::Train => ds.split.train.clone(),
        SplitChoice::Val => ds.split.val.clone(),
        SplitChoice::Test => ds.split.test.clone(),
        SplitChoice::All => (0..ds.samples.len()).collect(),
    }
}

fn split_name(s: SplitChoice) -> &'static str {
    match s {
        SplitChoice::Train => "train",
        SplitChoice::Val => "val",
        SplitChoice::Test => "test",
        SplitChoice::All => "all",
    }
}

fn check_image_size(samples: &[SamplePair], size: usize) -> CliResult<()> {
    match samples.first() {
        Some(s) if s.vessel.shape()[1..] != [size, size] => Err(usage(format!(
            "corpus images are {:?}, network expects {size}x{size}",
            &s.vessel.shape()[1..]
        ))),
        _ => Ok(()),
    }
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let spec = DatasetSpec {
        count: a.count,
        image_size: a.size,
        corrupt_fraction: a.corrupt_fraction,
        seed: a.seed,
        train_fraction: a.train_fraction,
        val_fraction: a.val_fraction,
    };
    let ds = make_dataset(&spec)?;
    write_dataset(&a.out, &ds, a.png)?;
    let config = vec![
        kv("count", a.count),
        kv("size", a.size),
        kv("seed", a.seed),
        kv("corrupt_fraction", a.corrupt_fraction),
        kv("train_fraction", a.train_fraction),
        kv("val_fraction", a.val_fraction),
        kv("png", a.png),
    ];
    let digest = dataset_digest(&ds);
    let m = RunManifest {
        command: "gen-data".into(),
        argv: argv.to_vec(),
        input_hash: input_hash("gen-data", &config, &[]),
        config,
        seed: a.seed,
        artifacts: vec![("corpus".into(), a.out.clone())],
        outputs: vec![kv("corpus", &digest)],
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!(
        "wrote {} samples ({} corrupted) to {}; corpus sha256 {}",
        ds.samples.len(),
        ds.samples.iter().filter(|s| !s.consistent).count(),
        a.out.display(),
        corpus_checksum(&ds.samples)
    );
    Ok(())
}

/// Keys that may change when continuing a run.
const RESUMABLE: [&str; 3] = ["steps", "log_interval", "checkpoint_interval"];

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let mut overrides = a.overrides.clone();
    if a.paper_literal_dfl {
        overrides.push(kv("paper_literal_dfl", true));
    }
    let mut inputs = Vec::new();
    let mut tr = match &a.resume {
        Some(path) => {
            if a.config.is_some() {
                return Err(usage("--config cannot be combined with --resume"));
            }
            let mut tr = Trainer::load(path)?;
            for (k, v) in &overrides {
                let before = tr.cfg.clone();
                tr.cfg.set(k, v)?;
                if !RESUMABLE.contains(&k.as_str()) && tr.cfg != before {
                    return Err(usage(format!("`{k}` cannot change when resuming")));
                }
            }
            tr.cfg.validate()?;
            inputs.push(kv("resume", checkpoint_digest(path)?));
            tr
        }
        None => {
            if let Some(c) = &a.config {
                inputs.push(kv("config_file", file_digest(c)?));
            }
            Trainer::new(load_train_config(a.config.as_deref(), &overrides)?)?
        }
    };
    let data = match &a.data {
        Some(dir) => {
            let ds = read_dataset(dir)?;
            inputs.push(kv("data", dataset_digest(&ds)));
            let samples = ds.subset(&split_indices(&ds, a.split));
            check_image_size(&samples, tr.cfg.net.image_size)?;
            samples
        }
        None => Vec::new(),
    };
    if tr.step < tr.cfg.steps && data.is_empty() {
        return Err(usage("training steps requested but no samples (pass --data, check --split)"));
    }

    let log_path = {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let (log_every, ck_every) = (tr.cfg.log_interval.max(1), tr.cfg.checkpoint_interval);
    let mut last = None;
    tr.run(&data, |tr, b| {
        if tr.step % log_every == 0 || tr.step == tr.cfg.steps {
            let line = log_line(tr.step, b);
            println!("{line}");
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
        }
        if ck_every > 0 && tr.step % ck_every == 0 {
            tr.save(&a.out)?;
        }
        last = Some(b.total);
        Ok(())
    })?;
    tr.save(&a.out)?;

    let config = parse_kv(&tr.cfg.to_kv())?;
    let mut outputs = vec![kv("checkpoint", checkpoint_digest(&a.out)?), kv("step", tr.step)];
    if let Some(t) = last {
        outputs.push(kv("final_total_loss", t));
    }
    let m = RunManifest {
        command: "train".into(),
        argv: argv.to_vec(),
        input_hash: input_hash("train", &config, &inputs),
        config,
        seed: tr.cfg.seed,
        artifacts: vec![("checkpoint".into(), a.out.clone()), ("log".into(), log_path)],
        outputs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    m.write(&manifest_beside(&a.out))?;
    println!("checkpoint at step {} written to {}", tr.step, a.out.display());
    Ok(())
}

/// Loads a condition tensor as `[N, 1, S, S]`.
fn load_condition(path: &Path, size: usize) -> CliResult<Tensor> {
    let t = read_tensor(path)?;
    let shape = match t.shape() {
        [h, w] | [1, h, w] => vec![1, 1, *h, *w],
        [n, 1, h, w] => vec![*n, 1, *h, *w],
        s => return Err(usage(format!("{}: expected [S,S], [1,S,S] or [N,1,S,S], got {s:?}", path.display()))),
    };
    if shape[2..] != [size, size] {
        return Err(usage(format!(
            "{}: images are {}x{}, network expects {size}x{size}",
            path.display(),
            shape[2],
            shape[3]
        )));
    }
    t.ensure_finite("condition")?;
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(usage(format!("{}: values must lie in [0,1]", path.display())));
    }
    Ok(t.reshape(&shape)?)
}

fn sampling_setup(cfg: &TrainConfig, steps: Option<usize>, gamma: Option<f64>) -> CliResult<(TrainConfig, NoiseSchedule)> {
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.sample_steps = s;
    }
    if let Some(g) = gamma {
        cfg.gate.gamma = g;
    }
    cfg.validate()?;
    let sched = cfg.sampling_schedule()?;
    Ok((cfg, sched))
}

pub fn sample(a: &SampleArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let tr = Trainer::load(&a.checkpoint)?;
    let (cfg, sched) = sampling_setup(&tr.cfg, a.steps, a.gamma)?;
    let size = cfg.net.image_size;
    let y_v = load_condition(&a.vessel, size)?;
    let mut inputs = vec![
        kv("checkpoint", checkpoint_digest(&a.checkpoint)?),
        kv("vessel", file_digest(&a.vessel)?),
    ];
    let y_n = match (a.mode, &a.nuclei) {
        (Mode::Uni, _) => None,
        (_, None) => return Err(usage("--nuclei is required unless --mode uni")),
        (_, Some(p)) => {
            let t = load_condition(p, size)?;
            if t.shape() != y_v.shape() {
                return Err(usage(format!("nuclei {:?} vs vessel {:?}", t.shape(), y_v.shape())));
            }
            inputs.push(kv("nuclei", file_digest(p)?));
            Some(to_model_space(&t))
        }
    };
    let n = y_v.batch();
    let mut rngs: Vec<_> = (0..n).map(|i| sample_rng(a.seed, i)).collect();
    let out = damm_core::trainer::sample(
        &tr.net,
        &to_model_space(&y_v),
        y_n.as_ref(),
        &sched,
        cfg.gate.gamma,
        branch(a.mode),
        &mut rngs,
    )?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut artifacts = Vec::new();
    let mut summary = String::from("index,mean_d,multi_share\n");
    for i in 0..n {
        let img = Tensor::new(&[1, size, size], out.images.row(i).to_vec())?;
        let base = a.out.join(format!("sample_{i:04}"));
        write_tensor(base.with_extension("dtnsr"), &img)?;
        write_png(&base.with_extension("png"), &img)?;
        artifacts.push((format!("sample_{i}"), base.with_extension("dtnsr")));
        let d = out.mean_d.get(i).map_or("n/a".to_string(), |d| format!("{d:.6}"));
        summary.push_str(&format!("{i},{d},{:.4}\n", out.multi_share[i]));
    }
    let summary_path = a.out.join("samples.csv");
    write_atomic(&summary_path, summary.as_bytes())?;
    artifacts.push(("summary".into(), summary_path));
    let config = vec![
        kv("mode", branch(a.mode)),
        kv("sample_steps", cfg.sample_steps),
        kv("gamma", cfg.gate.gamma),
        kv("seed", a.seed),
    ];
    let m = RunManifest {
        command: "sample".into(),
        argv: argv.to_vec(),
        input_hash: input_hash("sample", &config, &inputs),
        config,
        seed: a.seed,
        artifacts,
        outputs: vec![],
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    m.write(&a.out.join(RUN_MANIFEST))?;
    print!("{summary}");
    Ok(())
}

fn divergence_csv(r: &EvalReport) -> String {
    let mut s = String::from("index,consistent,mean_d,multi_share\n");
    for (i, c) in r.consistent.iter().enumerate() {
        let d = r.d.get(i).map_or("n/a".to_string(), |d| format!("{d:.6}"));
        s.push_str(&format!("{i},{c},{d},{:.4}\n", r.multi_share[i]));
    }
    s
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let tr = Trainer::load(&a.checkpoint)?;
    let (cfg, sched) = sampling_setup(&tr.cfg, a.steps, a.gamma)?;
    let ds = read_dataset(&a.data)?;
    let samples: Vec<SamplePair> = ds
        .subset(&split_indices(&ds, a.split))
        .into_iter()
        .filter(|s| match a.subset {
            Subset::All => true,
            Subset::Clean => s.consistent,
            Subset::Corrupt => !s.consistent,
        })
        .collect();
    if samples.is_empty() {
        return Err(usage("no samples left after --split and --subset"));
    }
    check_image_size(&samples, cfg.net.image_size)?;
    let branches = match a.mode {
        EvalMode::Dammp => vec![Branch::Dammp],
        EvalMode::Uni => vec![Branch::Uni],
        EvalMode::Multi => vec![Branch::Multi],
        EvalMode::All => vec![Branch::Dammp, Branch::Uni, Branch::Multi],
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut artifacts = Vec::new();
    let mut outputs = Vec::new();
    for b in branches {
        let r = evaluate(&tr.net, &samples, &sched, cfg.gate.gamma, b, a.seed, a.batch)?;
        let name = b.name();
        let files = [
            (format!("{name}_metrics.csv"), r.metrics.csv_rows()),
            (format!("{name}_report.txt"), r.summary()),
            (format!("{name}_divergence.csv"), divergence_csv(&r)),
        ];
        for (file, text) in files {
            let p = a.out.join(&file);
            write_atomic(&p, text.as_bytes())?;
            artifacts.push((file, p));
        }
        outputs.push(kv(&format!("{name}_ssim_mean"), r.metrics.ssim_summary().mean));
        outputs.push(kv(&format!("{name}_psnr_mean"), r.metrics.psnr_summary().mean));
        print!("{}", r.summary());
    }
    let config = vec![
        kv("mode", format!("{:?}", a.mode).to_lowercase()),
        kv("split", split_name(a.split)),
        kv("subset", format!("{:?}", a.subset).to_lowercase()),
        kv("sample_steps", cfg.sample_steps),
        kv("gamma", cfg.gate.gamma),
        kv("seed", a.seed),
    ];
    let inputs = vec![
        kv("checkpoint", checkpoint_digest(&a.checkpoint)?),
        kv("data", dataset_digest(&ds)),
    ];
    let m = RunManifest {
        command: "eval".into(),
        argv: argv.to_vec(),
        input_hash: input_hash("eval", &config, &inputs),
        config,
        seed: a.seed,
        artifacts,
        outputs,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    m.write(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

fn gradcheck_report(outcomes: &[AuditOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        let audited: usize = o.report.params.iter().map(|p| p.audited).sum();
        let kinks: usize = o.report.params.iter().map(|p| p.non_smooth.len()).sum();
        s.push_str(&format!(
            "{:<18} {}  max rel err {:.3e}  {} params, {audited} elements, {kinks} kinks skipped\n",
            o.case.name(),
            if o.report.passed { "PASS" } else { "FAIL" },
            o.report.max_rel_error(),
            o.report.params.len(),
        ));
    }
    s
}

pub fn gradcheck(a: &GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    if !(a.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let opts = default_options(a.seed, a.tolerance);
    let outcomes = match a.precision {
        Precision::F32 => audit_all::<f32>(a.seed, &opts)?,
        Precision::F64 => audit_all::<f64>(a.seed, &opts)?,
    };
    let report = gradcheck_report(&outcomes);
    print!("{report}");
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.report.passed).map(|o| o.case.name()).collect();
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("gradcheck_report.txt");
        write_atomic(&path, report.as_bytes())?;
        let config = vec![
            kv("seed", a.seed),
            kv("tolerance", a.tolerance),
            kv("precision", format!("{:?}", a.precision).to_lowercase()),
        ];
        let m = RunManifest {
            command: "gradcheck".into(),
            argv: argv.to_vec(),
            input_hash: input_hash("gradcheck", &config, &[]),
            config,
            seed: a.seed,
            artifacts: vec![("report".into(), path)],
            outputs: vec![kv("failed", failed.len())],
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        m.write(&dir.join(RUN_MANIFEST))?;
    }
    if failed.is_empty() {
        println!("all {} cases passed in {:.1}s", outcomes.len(), start.elapsed().as_secs_f64());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient audit failed for {}", failed.join(", "))))
    }
}
