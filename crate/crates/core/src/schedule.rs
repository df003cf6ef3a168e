//! Noise schedules, the closed-form forward marginal, the fixed-variance
//! reverse step and timestep respacing.
//!
//! Timesteps are 1-based throughout: `t ∈ 1..=T`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-step tables of a discrete diffusion chain. Tables are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    original_indices: Vec<usize>,
}

impl NoiseSchedule {
    /// `beta_start..=beta_end` linearly over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas, (1..=steps).collect()))
    }

    fn from_betas(betas: Vec<f64>, original_indices: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            original_indices,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Timestep of the source chain each step corresponds to (identity unless respaced).
    pub fn original_indices(&self) -> &[usize] {
        &self.original_indices
    }

    fn check(&self, t: usize, op: &'static str) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                op,
                index: t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t, "beta")?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t, "alpha_bar")?])
    }

    /// Original timestep of step `t`.
    pub fn original_index(&self, t: usize) -> Result<usize> {
        Ok(self.original_indices[self.check(t, "original_index")?])
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let i = self.check(t, "q_sample")?;
        let a = self.alpha_bars[i].sqrt() as f32;
        let s = (1.0 - self.alpha_bars[i]).sqrt() as f32;
        x0.zip_map(eps, |x, e| a * x + s * e)
    }

    /// Per-sample timesteps over the leading axis.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape("q_sample_batch", x0.shape(), eps.shape()));
        }
        if ts.len() != x0.batch() {
            return Err(Error::InvalidArgument(format!(
                "{} timesteps for batch of {}",
                ts.len(),
                x0.batch()
            )));
        }
        let r = x0.row_len();
        let mut out = Vec::with_capacity(x0.len());
        for (n, &t) in ts.iter().enumerate() {
            let i = self.check(t, "q_sample_batch")?;
            let a = self.alpha_bars[i].sqrt() as f32;
            let s = (1.0 - self.alpha_bars[i]).sqrt() as f32;
            out.extend(
                x0.data()[n * r..(n + 1) * r]
                    .iter()
                    .zip(&eps.data()[n * r..(n + 1) * r])
                    .map(|(&x, &e)| a * x + s * e),
            );
        }
        Tensor::new(x0.shape(), out)
    }

    /// One ancestral reverse step with fixed variance `β_t`:
    /// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `√β_t·noise` unless `t = 1`.
    pub fn p_step(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let i = self.check(t, "p_step")?;
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::shape("p_step", x_t.shape(), eps_hat.shape()));
        }
        let beta = self.betas[i];
        let inv_sqrt_alpha = (1.0 / self.alphas[i].sqrt()) as f32;
        let coef = (beta / (1.0 - self.alpha_bars[i]).sqrt()) as f32;
        let mean = x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e))?;
        match noise {
            Some(z) if t > 1 => {
                let sigma = beta.sqrt() as f32;
                mean.zip_map(z, |m, n| m + sigma * n)
            }
            _ => Ok(mean),
        }
    }

    /// Sub-chain of `n_steps` approximately evenly spaced steps ending at `T`,
    /// with `β'_k = 1 − ᾱ_{t_k}/ᾱ_{t_{k−1}}` so the kept marginals are unchanged.
    pub fn respace(&self, n_steps: usize) -> Result<Self> {
        let total = self.steps();
        if n_steps == 0 || n_steps > total {
            return Err(Error::InvalidArgument(format!(
                "respace to {n_steps} steps needs 1 ≤ n ≤ {total}"
            )));
        }
        let kept: Vec<usize> = (1..=n_steps)
            .map(|k| (k * total + n_steps / 2) / n_steps)
            .collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(n_steps);
        let mut alpha_bars = Vec::with_capacity(n_steps);
        for &t in &kept {
            let ab = self.alpha_bars[t - 1];
            betas.push(1.0 - ab / prev);
            alpha_bars.push(ab);
            prev = ab;
        }
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            original_indices: kept.iter().map(|&t| self.original_indices[t - 1]).collect(),
        })
    }
}

/// `[0,1]` image space to the `[−1,1]` diffusion space.
pub fn to_model_space(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// `[−1,1]` back to `[0,1]`, clipped.
pub fn to_image_space(t: &Tensor) -> Tensor {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn bounds_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn beta_500_matches_interpolation() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // Direct evaluation of the endpoint-inclusive interpolation at t = 500.
        let expect = 1e-4 + (0.02 - 1e-4) * 499.0 / 999.0;
        assert!((s.beta(500).unwrap() - expect).abs() < 1e-15);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn index_out_of_range() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(s.q_sample(&x, 0, &x).is_err());
        assert!(s.q_sample(&x, 11, &x).is_err());
        assert!(s.p_step(&x, 11, &x, None).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[16], &mut rng);
        let eps = Tensor::randn(&[16], &mut rng);
        let t = 300;
        let ab = s.alpha_bar(t).unwrap();
        let a = s.q_sample(&x0, t, &Tensor::zeros(&[16])).unwrap();
        assert_eq!(a, x0.map(|v| ab.sqrt() as f32 * v));
        let b = s.q_sample(&Tensor::zeros(&[16]), t, &eps).unwrap();
        assert_eq!(b, eps.map(|v| (1.0 - ab).sqrt() as f32 * v));
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x = Tensor::full(&[4], 0.3f32);
        let e = Tensor::full(&[4], -0.2f32);
        let z = Tensor::full(&[4], 5.0f32);
        assert_eq!(
            s.p_step(&x, 1, &e, Some(&z)).unwrap(),
            s.p_step(&x, 1, &e, None).unwrap()
        );
        assert_ne!(
            s.p_step(&x, 2, &e, Some(&z)).unwrap(),
            s.p_step(&x, 2, &e, None).unwrap()
        );
    }

    #[test]
    fn tiny_beta_step_is_identity() {
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x = Tensor::new(&[3], vec![0.5f32, -1.0, 0.25]).unwrap();
        let e = Tensor::new(&[3], vec![1.0f32, 2.0, -3.0]).unwrap();
        let y = s.p_step(&x, 1, &e, None).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn identity_respacing() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let r = s.respace(50).unwrap();
        for (a, b) in r.betas().iter().zip(s.betas()) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(r.original_indices(), s.original_indices());
    }

    #[test]
    fn respace_150_keeps_marginals() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let r = s.respace(150).unwrap();
        assert_eq!(r.steps(), 150);
        assert_eq!(*r.original_indices().last().unwrap(), 1000);
        let mut prod = 1.0;
        for (k, &t) in r.original_indices().iter().enumerate() {
            prod *= r.alphas()[k];
            assert_eq!(r.alpha_bars()[k].to_bits(), s.alpha_bars()[t - 1].to_bits());
            assert!((prod - s.alpha_bars()[t - 1]).abs() < 1e-12);
        }
        assert!(r.original_indices().windows(2).all(|w| w[0] < w[1]));
        assert!(s.respace(1001).is_err());
        assert!(s.respace(0).is_err());
    }

    #[test]
    fn alpha_bar_product_identity() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let ab = s.alpha_bars();
        assert!((ab[0] - s.alphas()[0]).abs() <= 1e-7);
        for t in 1..1000 {
            assert!((ab[t] - ab[t - 1] * s.alphas()[t]).abs() <= 1e-7);
            assert!(ab[t] < ab[t - 1]);
            assert!(s.betas()[t] >= s.betas()[t - 1]);
        }
    }
}
