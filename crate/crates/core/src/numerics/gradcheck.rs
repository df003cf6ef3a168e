//! Central-difference audit of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub mode: Mode,
    /// Audit at most this many elements per parameter (chosen by `seed`).
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            tolerance: 1e-3,
            mode: Mode::Train,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamAudit {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over audited smooth elements.
    pub max_rel_error: f64,
    pub audited: usize,
    /// Flat indices where the one-sided slopes disagree (a kink).
    pub non_smooth: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamAudit>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn has_non_smooth(&self) -> bool {
        self.params.iter().any(|p| !p.non_smooth.is_empty())
    }
}

/// Sum of all output elements, accumulated in 64-bit so that the reduction
/// itself adds no rounding to the differences.
fn eval_scalar<T: Scalar, F>(f: &F, store: &ParamStore<T>, mode: Mode) -> Result<f64>
where
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new(store, mode);
    let out = f(&mut g)?;
    Ok(g.value(out).data().iter().map(|v| v.as_f64()).sum())
}

/// One-sided slopes of a smooth function differ by about `f''·ε`, so halving
/// the step halves the gap. A kink inside the stencil breaks that scaling.
fn is_kink<T: Scalar, F>(
    f: &F,
    work: &mut ParamStore<T>,
    id: ParamId,
    k: usize,
    orig: T,
    opts: &GradCheckOptions,
    (fp, f0, fm): (f64, f64, f64),
) -> Result<bool>
where
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    let eps = opts.epsilon;
    let slopes = |p: f64, m: f64, h: f64| ((p - f0) / h, (f0 - m) / h);
    let (fwd, bwd) = slopes(fp, fm, eps);
    let jump = (fwd - bwd).abs();
    if jump <= 0.05 * fwd.abs().max(bwd.abs()) {
        return Ok(false);
    }
    let half = T::of(eps / 2.0);
    work.value_mut(id).data_mut()[k] = orig + half;
    let hp = eval_scalar(f, work, opts.mode)?;
    work.value_mut(id).data_mut()[k] = orig - half;
    let hm = eval_scalar(f, work, opts.mode)?;
    work.value_mut(id).data_mut()[k] = orig;
    let (hf, hb) = slopes(hp, hm, eps / 2.0);
    let ratio = (hf - hb).abs() / jump;
    Ok(!(0.3..=0.7).contains(&ratio))
}

/// Compares reverse-mode gradients of `f` at `point` with central differences
/// `(f(p+ε) − f(p−ε)) / 2ε`, one trainable element at a time. A non-scalar
/// output is audited through the sum of its elements.
pub fn grad_check<T: Scalar, F>(f: F, point: &ParamStore<T>, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    grad_check_with::<T, T, _, _>(&f, &f, point, opts)
}

/// Like [`grad_check`], but the differences are taken on `reference`, the
/// same function evaluated in precision `R`. Used to audit 32-bit gradients
/// against differences that 32-bit rounding cannot resolve.
pub fn grad_check_with<T: Scalar, R: Scalar, FA, FR>(
    f: FA,
    reference: FR,
    point: &ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    FA: Fn(&mut Graph<T>) -> Result<Var>,
    FR: Fn(&mut Graph<R>) -> Result<Var>,
{
    if opts.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("grad_check epsilon must be positive".into()));
    }
    let analytic = {
        let mut g = Graph::new(point, opts.mode);
        let out = f(&mut g)?;
        let root = g.sum_all(out)?;
        let grads = g.backward(root)?;
        let mut s = point.clone();
        s.zero_grads();
        s.accumulate(&grads);
        s
    };
    let f = reference;
    let mut work: ParamStore<R> = point.cast();
    let f0 = eval_scalar(&f, &work, opts.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = Vec::new();
    for id in point.ids().filter(|&id| point.is_trainable(id)) {
        let n = point.value(id).len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        let mut non_smooth = Vec::new();
        for &k in &indices {
            let orig = work.value(id).data()[k];
            let plus = orig + R::of(opts.epsilon);
            let minus = orig - R::of(opts.epsilon);
            // Actual representable step, not the nominal one.
            let h = (plus - minus).as_f64();
            work.value_mut(id).data_mut()[k] = plus;
            let fp = eval_scalar(&f, &work, opts.mode)?;
            work.value_mut(id).data_mut()[k] = minus;
            let fm = eval_scalar(&f, &work, opts.mode)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / h;
            if is_kink(&f, &mut work, id, k, orig, opts, (fp, f0, fm))? {
                non_smooth.push(k);
                continue;
            }
            let a = analytic.grad(id).data()[k].as_f64();
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
        params.push(ParamAudit {
            name: point.name(id).to_string(),
            max_rel_error: rel,
            audited: indices.len() - non_smooth.len(),
            non_smooth,
        });
    }
    let passed = params.iter().all(|p| p.max_rel_error <= opts.tolerance);
    Ok(GradReport {
        params,
        tolerance: opts.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::scalar(3.0)).unwrap();
        let opts = GradCheckOptions {
            epsilon: 1e-3,
            ..Default::default()
        };
        let r = grad_check(
            |g| {
                let w = g.param("w")?;
                Ok(g.square(w))
            },
            &p,
            &opts,
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.params[0].max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn abs_kink_is_flagged() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(
            |g| {
                let w = g.param("w")?;
                Ok(g.abs(w))
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.params[0].non_smooth, vec![0]);
        assert!(r.has_non_smooth());
    }

    #[test]
    fn vector_output_is_summed() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::new(&[2], vec![0.3, -1.2]).unwrap()).unwrap();
        let r = grad_check(
            |g| {
                let w = g.param("w")?;
                g.mul(w, w)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // sum(w * stop_grad(w)) has true derivative 2w but the tape sees w.
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let r = grad_check(
            |g| {
                let w = g.param("w")?;
                let c = g.input(g.value(w).clone())?;
                let y = g.mul(w, c)?;
                g.sum_all(y)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed);
    }
}
