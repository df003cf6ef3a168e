//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use damm_core::Tensor;

/// Double-loop SSIM: explicit 2-D Gaussian window, every valid position.
pub fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![vec![0.0f64; k]; k];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |t: &Tensor, y: usize, x: usize| t.data()[y * w + x] as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i][j] / z;
                    mx += wt * px(a, y0 + i, x0 + j);
                    my += wt * px(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = win[i][j] / z;
                    let (p, q) = (px(a, y0 + i, x0 + j) - mx, px(b, y0 + i, x0 + j) - my);
                    vx += wt * p * p;
                    vy += wt * q * q;
                    cov += wt * p * q;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Exact noise of a point-mass data distribution at `x0`:
/// `(x_t − √ᾱ·x0) / √(1 − ᾱ)`.
pub fn analytic_eps(x_t: &Tensor, x0: &Tensor, alpha_bar: f64) -> Tensor {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x_t.zip_map(x0, |x, z| ((x as f64 - a * z as f64) / s) as f32).unwrap()
}

/// Per-pixel target: nearest-mask distance by exhaustive search, 3×3 mean of
/// the in-bounds neighbours, then division by the maximum.
pub fn brute_target(vessel: &[f32], driver: &[f32], h: usize, w: usize, tau: f64) -> Vec<f64> {
    let mask: Vec<(usize, usize)> = (0..h * w)
        .filter(|&k| vessel[k] >= 0.5)
        .map(|k| (k / w, k % w))
        .collect();
    let mut raw = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = mask
                .iter()
                .map(|&(my, mx)| (((y as f64 - my as f64).powi(2) + (x as f64 - mx as f64).powi(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min);
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += driver[yy * w + xx] as f64;
                    n += 1.0;
                }
            }
            raw[y * w + x] = (-d / tau).exp() * (0.5 + 0.5 * s / n);
        }
    }
    let m = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter().map(|r| r / m).collect()
}

/// Plain scaled dot-product attention for one batch element, row-major.
pub fn plain_attention(q: &[f64], k: &[f64], v: &[f64], lq: usize, lk: usize, d: usize, key_scale: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut attn = vec![0.0; lq * lk];
    let mut out = vec![0.0; lq * d];
    for i in 0..lq {
        let logits: Vec<f64> = (0..lk)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * key_scale[j] / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..lk {
            attn[i * lk + j] = e[j] / z;
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    (out, attn)
}

/// Least squares `argmin ‖Xb − y‖²` via normal equations and Gaussian
/// elimination with partial pivoting; returns the residual mean square.
pub fn least_squares_mse(x: &[Vec<f64>], y: &[f64]) -> f64 {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * t;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += 1e-9;
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot_row = a[c].clone();
                for (v, pv) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    let b: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
    x.iter()
        .zip(y)
        .map(|(row, t)| (row.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() - t).powi(2))
        .sum::<f64>()
        / y.len() as f64
}
