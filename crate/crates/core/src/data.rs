//! Procedural vessel / nuclei / target triplets with a controllable fraction
//! of samples whose nuclei channel does not match the target.
//!
//! The target decays with distance from the vessels and is modulated by the
//! local nuclei density, so vessels alone predict it reasonably and the
//! nuclei channel only helps when it is the one the target was built from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, read_tensor, write_atomic, write_tensor};
use crate::numerics::Tensor;

pub const MIN_SIZE: usize = 16;
/// Distance decay of the target, in pixels.
pub const TARGET_TAU: f64 = 4.0;
/// Vessel intensity at or above which a pixel counts as vessel.
pub const VESSEL_THRESHOLD: f32 = 0.5;
pub const NUCLEI_MIN: usize = 20;
pub const NUCLEI_MAX: usize = 60;
/// Share of nuclei whose centre is drawn from the dilated vessel mask.
pub const NUCLEI_NEAR_VESSEL: f64 = 0.7;
pub const DILATION_RADIUS: i64 = 3;

const VESSEL_STREAM: u64 = 0x5645_5353;
const NUCLEI_STREAM: u64 = 0x4e55_434c;
const DECOY_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image size {size} below minimum {MIN_SIZE}"
        )));
    }
    Ok(())
}

/// The seed whose nuclei drive the target of a corrupted sample.
pub fn decoy_seed(seed: u64) -> u64 {
    seed.wrapping_add(DECOY_OFFSET)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    sigma: f64,
}

fn segment_dist_sq(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

fn grow(rng: &mut ChaCha8Rng, size: f64, start: (f64, f64), heading: f64, sigma: f64, depth: u32, out: &mut Vec<Segment>) {
    let step = size / 8.0;
    let n = rng.random_range(4..=9);
    let (mut p, mut h) = (start, heading);
    for _ in 0..n {
        h += rng.random_range(-0.5..0.5);
        let q = (p.0 + step * h.cos(), p.1 + step * h.sin());
        out.push(Segment { a: p, b: q, sigma });
        if depth < 2 && rng.random_bool(0.2) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let bh = h + side * rng.random_range(0.5..1.2);
            grow(rng, size, q, bh, (sigma * 0.8).max(1.0), depth + 1, out);
        }
        p = q;
        if p.0 < -step || p.1 < -step || p.0 > size + step || p.1 > size + step {
            break;
        }
    }
}

fn vessel_segments(seed: u64, size: usize) -> Vec<Segment> {
    let mut rng = stream(seed, VESSEL_STREAM);
    let s = size as f64;
    let count = rng.random_range(2..=5);
    let mut segs = Vec::new();
    for _ in 0..count {
        let start = (rng.random_range(2.0..s - 2.0), rng.random_range(2.0..s - 2.0));
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let sigma = rng.random_range(1.0..=2.0);
        grow(&mut rng, s, start, heading, sigma, 0, &mut segs);
    }
    segs
}

/// Number of root polylines drawn for `seed`.
pub fn vessel_count(seed: u64) -> usize {
    stream(seed, VESSEL_STREAM).random_range(2..=5)
}

/// `[1, size, size]` vessel image in [0,1]. Averaged over seeds 0..100 the
/// foreground (`v ≥ 0.5`) covers 0.20–0.33 of a 32 px image and 0.10–0.18 of
/// a 64 px one.
pub fn gen_vessels(seed: u64, size: usize) -> Result<Tensor> {
    check_size(size)?;
    let segs = vessel_segments(seed, size);
    let img = Tensor::from_fn(&[1, size, size], |k| {
        let p = ((k % size) as f64, (k / size) as f64);
        segs.iter()
            .map(|s| (-segment_dist_sq(p, s) / (2.0 * s.sigma * s.sigma)).exp())
            .fold(0.0, f64::max)
            .clamp(0.0, 1.0) as f32
    });
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

fn dilated_mask(vessel: &Tensor, size: usize) -> Vec<usize> {
    let r = DILATION_RADIUS;
    let v = vessel.data();
    (0..size * size)
        .filter(|&k| {
            let (x, y) = ((k % size) as i64, (k / size) as i64);
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    dx * dx + dy * dy <= r * r
                        && (0..size as i64).contains(&xx)
                        && (0..size as i64).contains(&yy)
                        && v[yy as usize * size + xx as usize] >= VESSEL_THRESHOLD
                })
            })
        })
        .collect()
}

/// The nuclei placed for `seed`, denser near that seed's vessels.
pub fn nuclei_blobs(seed: u64, size: usize) -> Result<Vec<Blob>> {
    let vessel = gen_vessels(seed, size)?;
    let near = dilated_mask(&vessel, size);
    let mut rng = stream(seed, NUCLEI_STREAM);
    let count = rng.random_range(NUCLEI_MIN..=NUCLEI_MAX);
    let s = size as f64;
    Ok((0..count)
        .map(|_| {
            let (x, y) = if !near.is_empty() && rng.random_bool(NUCLEI_NEAR_VESSEL) {
                let k = near[rng.random_range(0..near.len())];
                (
                    (k % size) as f64 + rng.random_range(-0.5..0.5),
                    (k / size) as f64 + rng.random_range(-0.5..0.5),
                )
            } else {
                (rng.random_range(0.0..s), rng.random_range(0.0..s))
            };
            Blob {
                x,
                y,
                sigma: rng.random_range(1.0..=3.0),
                amplitude: rng.random_range(0.6..=1.0),
            }
        })
        .collect())
}

/// `[1, size, size]` nuclei image in [0,1].
pub fn gen_nuclei(seed: u64, size: usize) -> Result<Tensor> {
    let blobs = nuclei_blobs(seed, size)?;
    Ok(Tensor::from_fn(&[1, size, size], |k| {
        let (x, y) = ((k % size) as f64, (k / size) as f64);
        blobs
            .iter()
            .map(|b| b.amplitude * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
            .sum::<f64>()
            .clamp(0.0, 1.0) as f32
    }))
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [1, H, W]".into(),
        }),
    }
}

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let Some(q0) = f.iter().position(|x| x.is_finite()) else {
        return vec![f64::INFINITY; n];
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never pops the last parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Euclidean distance from every pixel to the nearest `true` pixel;
/// `+∞` everywhere when the mask is empty.
pub fn distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * w];
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| if mask[y * w + x] { 0.0 } else { f64::INFINITY }).collect();
        for (y, v) in edt_1d(&col).into_iter().enumerate() {
            g[y * w + x] = v;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &g[y * w..(y + 1) * w];
        for (x, v) in edt_1d(row).into_iter().enumerate() {
            out[y * w + x] = v.sqrt();
        }
    }
    out
}

/// 3×3 mean over the in-bounds neighbourhood.
pub fn box_smooth(x: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xs) = (y as i64 + dy, xx as i64 + dx);
                    if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xs) {
                        s += x[yy as usize * w + xs as usize] as f64;
                        n += 1.0;
                    }
                }
            }
            out[y * w + xx] = s / n;
        }
    }
    out
}

/// Target from a vessel image and the nuclei image that actually drives it.
pub fn target_map(vessel: &Tensor, driver: &Tensor) -> Result<Tensor> {
    if vessel.shape() != driver.shape() {
        return Err(Error::shape("gen_target", vessel.shape(), driver.shape()));
    }
    let (h, w) = image_dims(vessel)?;
    let mask: Vec<bool> = vessel.data().iter().map(|&v| v >= VESSEL_THRESHOLD).collect();
    let dist = distance_transform(&mask, h, w);
    let smooth = box_smooth(driver.data(), h, w);
    let raw: Vec<f64> = dist
        .iter()
        .zip(&smooth)
        .map(|(&d, &s)| (-d / TARGET_TAU).exp() * (0.5 + 0.5 * s))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Tensor::new(vessel.shape(), raw.iter().map(|&r| (r * scale) as f32).collect())
}

/// When `consistent` is false the nuclei factor comes from the decoy seed's
/// nuclei image, so the stored `nuclei` channel misleads.
pub fn gen_target(vessel: &Tensor, nuclei: &Tensor, consistent: bool, seed: u64) -> Result<Tensor> {
    if vessel.shape() != nuclei.shape() {
        return Err(Error::shape("gen_target", vessel.shape(), nuclei.shape()));
    }
    if consistent {
        target_map(vessel, nuclei)
    } else {
        let (h, _) = image_dims(vessel)?;
        target_map(vessel, &gen_nuclei(decoy_seed(seed), h)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub vessel: Tensor,
    pub nuclei: Tensor,
    pub target: Tensor,
    pub consistent: bool,
    pub seed: u64,
}

impl SamplePair {
    pub fn generate(seed: u64, size: usize, consistent: bool) -> Result<Self> {
        let vessel = gen_vessels(seed, size)?;
        let nuclei = gen_nuclei(seed, size)?;
        let target = gen_target(&vessel, &nuclei, consistent, seed)?;
        Ok(Self {
            vessel,
            nuclei,
            target,
            consistent,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.vessel.shape();
        image_dims(&self.vessel)?;
        for (what, t) in [("nuclei", &self.nuclei), ("target", &self.target)] {
            if t.shape() != s {
                return Err(Error::shape(if what == "nuclei" { "sample nuclei" } else { "sample target" }, t.shape(), s));
            }
        }
        for (what, t) in [("vessel", &self.vessel), ("nuclei", &self.nuclei), ("target", &self.target)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!("{what} values outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub image_size: usize,
    pub corrupt_fraction: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 64,
            image_size: 32,
            corrupt_fraction: 0.0,
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.2,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        check_size(self.image_size)?;
        if !unit(self.corrupt_fraction) || !unit(self.train_fraction) || !unit(self.val_fraction) {
            return Err(Error::Config("dataset fractions must lie in [0,1]".into()));
        }
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12 {
            return Err(Error::Config("train + val fractions exceed 1".into()));
        }
        Ok(())
    }

    pub fn corrupted_count(&self) -> usize {
        (self.count as f64 * self.corrupt_fraction).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub split: Split,
}

/// Seed of sample `index` in a corpus seeded with `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);
    let mut consistent = vec![true; spec.count];
    for &i in &order[..spec.corrupted_count()] {
        consistent[i] = false;
    }
    let samples = (0..spec.count)
        .map(|i| SamplePair::generate(sample_seed(spec.seed, i), spec.image_size, consistent[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut perm: Vec<usize> = (0..spec.count).collect();
    perm.shuffle(&mut rng);
    let n_train = (spec.count as f64 * spec.train_fraction).round() as usize;
    let n_val = ((spec.count as f64 * spec.val_fraction).round() as usize).min(spec.count - n_train);
    let split = Split {
        train: perm[..n_train].to_vec(),
        val: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    };
    Ok(Dataset { samples, split })
}

impl Dataset {
    pub fn subset(&self, indices: &[usize]) -> Vec<SamplePair> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// SHA-256 over every sample's flags and encoded tensors, as hex.
pub fn corpus_checksum(samples: &[SamplePair]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for s in samples {
        h.update(s.seed.to_le_bytes());
        h.update([s.consistent as u8]);
        for t in [&s.vessel, &s.nuclei, &s.target] {
            buf.clear();
            encode_tensor(t, &mut buf);
            h.update(&buf);
        }
    }
    hex::encode(h.finalize())
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// One manifest row: `index, seed, consistent, vessel, nuclei, target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub consistent: bool,
    pub paths: [PathBuf; 3],
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!(
            "{}, {}, {}, {}, {}, {}",
            self.index,
            self.seed,
            self.consistent,
            self.paths[0].display(),
            self.paths[1].display(),
            self.paths[2].display()
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::InvalidArgument(format!("malformed manifest line `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            index: f[0].parse().map_err(|_| bad())?,
            seed: f[1].parse().map_err(|_| bad())?,
            consistent: f[2].parse().map_err(|_| bad())?,
            paths: [f[3].into(), f[4].into(), f[5].into()],
        })
    }
}

/// Split file rows: `train|val|test, index`.
fn split_text(split: &Split) -> String {
    let mut s = String::new();
    for (name, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for i in ids {
            s.push_str(&format!("{name}, {i}\n"));
        }
    }
    s
}

fn parse_split(text: &str) -> Result<Split> {
    let mut split = Split::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (name, idx) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("malformed split line `{line}`")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("malformed split line `{line}`")))?;
        match name.trim() {
            "train" => split.train.push(idx),
            "val" => split.val.push(idx),
            "test" => split.test.push(idx),
            other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
    Ok(split)
}

pub const SPLIT_NAME: &str = "split.txt";

/// Writes DTNSR1 triplets, optional PNG previews, the manifest and the split.
pub fn write_dataset(dir: &Path, ds: &Dataset, png: bool) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let names = ["vessel", "nuclei", "target"].map(|k| PathBuf::from(format!("{i:05}_{k}.dtnsr")));
        for (name, t) in names.iter().zip([&s.vessel, &s.nuclei, &s.target]) {
            write_tensor(dir.join(name), t)?;
            if png {
                write_png(&dir.join(name.with_extension("png")), t)?;
            }
        }
        entries.push(ManifestEntry {
            index: i,
            seed: s.seed,
            consistent: s.consistent,
            paths: names,
        });
    }
    let text: String = entries.iter().map(|e| e.line() + "\n").collect();
    write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())?;
    write_atomic(&dir.join(SPLIT_NAME), split_text(&ds.split).as_bytes())?;
    Ok(entries)
}

/// Loads a corpus written by [`write_dataset`] or assembled by hand; relative
/// paths resolve against `dir`. A missing split file puts everything in test.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut samples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let e = ManifestEntry::parse(line)?;
        if e.index != samples.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest index {} out of order (expected {})",
                e.index,
                samples.len()
            )));
        }
        let [v, n, t] = e.paths.clone().map(|p| dir.join(p));
        let s = SamplePair {
            vessel: read_tensor(&v)?,
            nuclei: read_tensor(&n)?,
            target: read_tensor(&t)?,
            consistent: e.consistent,
            seed: e.seed,
        };
        s.validate()?;
        samples.push(s);
    }
    let spath = dir.join(SPLIT_NAME);
    let split = if spath.exists() {
        parse_split(&fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?)?
    } else {
        Split {
            test: (0..samples.len()).collect(),
            ..Split::default()
        }
    };
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if i >= samples.len() {
            return Err(Error::OutOfRange {
                op: "split",
                index: i,
                max: samples.len(),
            });
        }
    }
    Ok(Dataset { samples, split })
}

/// 8-bit grayscale PNG of a single-channel image, linear on [0,1].
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "png export needs one single-channel image".into(),
            })
        }
    };
    let pixels: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        wr.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    write_atomic(path, &bytes)
}
