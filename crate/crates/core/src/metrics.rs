//! PSNR and SSIM on single-channel images in [0,1].

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        4 if s[0] == 1 && s[1] == 1 => (s[2], s[3]),
        _ => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected one single-channel image".into(),
            })
        }
    };
    Ok((h, w))
}

/// Peak signal-to-noise ratio in dB; `+∞` when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val must be positive, got {max_val}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 Gaussian windows, data
/// range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (h, w) = plane(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("ssim needs both sides >= {SSIM_WINDOW}"),
        });
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, h, w, &taps));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation; infinities propagate to the mean.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return Summary { mean, std: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl MetricReport {
    /// Scores each prediction against its target.
    pub fn compute(label: impl Into<String>, preds: &[Tensor], targets: &[Tensor]) -> Result<Self> {
        if preds.is_empty() || preds.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} targets",
                preds.len(),
                targets.len()
            )));
        }
        let mut ssim_v = Vec::with_capacity(preds.len());
        let mut psnr_v = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(targets) {
            ssim_v.push(ssim(p, t)?);
            psnr_v.push(psnr(p, t, 1.0)?);
        }
        Ok(Self {
            label: label.into(),
            ssim: ssim_v,
            psnr: psnr_v,
        })
    }

    pub fn n(&self) -> usize {
        self.ssim.len()
    }

    pub fn ssim_summary(&self) -> Summary {
        summarize(&self.ssim)
    }

    pub fn psnr_summary(&self) -> Summary {
        summarize(&self.psnr)
    }

    /// `label,index,ssim,psnr` rows.
    pub fn csv_rows(&self) -> String {
        let mut s = String::from("label,index,ssim,psnr\n");
        for (i, (a, b)) in self.ssim.iter().zip(&self.psnr).enumerate() {
            s.push_str(&format!("{},{i},{a:.8},{b:.6}\n", self.label));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (s, p) = (self.ssim_summary(), self.psnr_summary());
        write!(
            f,
            "{:<8} n={:<5} ssim {:.4} ± {:.4}   psnr {:.2} ± {:.2} dB",
            self.label,
            self.n(),
            s.mean,
            s.std,
            p.mean,
            p.std
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_analytic() {
        let a = Tensor::zeros(&[4, 4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &Tensor::ones(&[4, 4]), 1.0).unwrap(), 0.0);
        let b = Tensor::full(&[4, 4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_trivial_cases() {
        let a = Tensor::full(&[16, 16], 0.4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[10, 16]), &Tensor::zeros(&[10, 16])).is_err());
    }

    #[test]
    fn taps_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn summary_of_constant() {
        let s = summarize(&[2.0, 2.0, 2.0]);
        assert_eq!((s.mean, s.std), (2.0, 0.0));
    }
}
