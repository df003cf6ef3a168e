//! Divergence-aware prediction: the gated branch loss, the fusion indicator,
//! the divergence feedback loss and the per-sample output selector.
//!
//! One predicate, [`trusts_fusion`], decides both which samples train the
//! multi-modal branch and which samples take its output at inference.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Bounds applied to `d` before the logarithms of the feedback loss.
pub const DFL_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DflSign {
    /// Standard binary cross entropy: pulls `d` toward 0 when the fused
    /// branch was better and toward 1 otherwise.
    #[default]
    Corrected,
    /// The expression exactly as printed, without the leading negation.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub dfl_sign: DflSign,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 0.1,
            lambda: 1e-4,
            dfl_sign: DflSign::Corrected,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        // γ = 1 is allowed: it makes the gate always pass.
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1], got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// The gate: the multi-modal branch is used iff `d ≤ γ`, compared in f32.
pub fn trusts_fusion(d: f32, gamma: f32) -> bool {
    d <= gamma
}

pub fn gate_mask(d: &[f32], gamma: f64) -> Vec<bool> {
    d.iter().map(|&x| trusts_fusion(x, gamma as f32)).collect()
}

/// Mean of an uncertainty map; every entry must lie in (0,1).
pub fn divergence<T: Scalar>(u: &Tensor<T>) -> Result<f64> {
    let mut sum = 0.0;
    for &x in u.data() {
        let x = x.as_f64();
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "uncertainty value {x} outside (0,1)"
            )));
        }
        sum += x;
    }
    Ok(sum / u.len() as f64)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_batch(op: &str, d: usize, n: usize) -> Result<()> {
    if d != n {
        return Err(Error::InvalidArgument(format!(
            "{op}: {d} divergences for batch of {n}"
        )));
    }
    Ok(())
}

fn per_sample_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    (0..a.batch())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&x, &y)| (x - y).as_f64().abs())
                .sum()
        })
        .collect()
}

/// `e_i = 1` iff the fused branch's L1 error is no larger than the
/// uni-modal one (ties count for fusion).
pub fn fusion_indicator<T: Scalar>(eps: &Tensor<T>, eps_u: &Tensor<T>, eps_m: &Tensor<T>) -> Result<Vec<bool>> {
    same_shape("fusion_indicator", eps, eps_u)?;
    same_shape("fusion_indicator", eps, eps_m)?;
    let lu = per_sample_l1(eps, eps_u);
    let lm = per_sample_l1(eps, eps_m);
    Ok(lm.iter().zip(&lu).map(|(m, u)| m <= u).collect())
}

/// Per sample, a bitwise copy of `eps_m` where the gate trusts fusion and of
/// `eps_u` elsewhere.
pub fn select_output<T: Scalar>(eps_u: &Tensor<T>, eps_m: &Tensor<T>, d: &[f32], gamma: f64) -> Result<Tensor<T>> {
    same_shape("select_output", eps_u, eps_m)?;
    check_batch("select_output", d.len(), eps_u.batch())?;
    let mask = gate_mask(d, gamma);
    let rows: Vec<&[T]> = mask
        .iter()
        .enumerate()
        .map(|(i, &m)| if m { eps_m.row(i) } else { eps_u.row(i) })
        .collect();
    Tensor::new(eps_u.shape(), rows.concat())
}

fn flags<T: Scalar>(g: &mut Graph<T>, bits: &[bool]) -> Result<Var> {
    let t = Tensor::new(&[bits.len()], bits.iter().map(|&b| T::of(b as u8 as f64)).collect())?;
    g.input(t)
}

/// Per-sample mean squared noise residual, `[N]`.
pub fn branch_loss<T: Scalar>(g: &mut Graph<T>, eps: Var, eps_hat: Var) -> Result<Var> {
    if g.shape(eps) != g.shape(eps_hat) {
        return Err(Error::shape("branch_loss", g.shape(eps), g.shape(eps_hat)));
    }
    let diff = g.sub(eps, eps_hat)?;
    let sq = g.square(diff);
    g.per_sample(sq, true)
}

/// Batch mean of `l_u + mask·l_m`; the mask is a constant.
pub fn gated_loss<T: Scalar>(g: &mut Graph<T>, l_u: Var, l_m: Var, mask: &[bool]) -> Result<Var> {
    check_batch("gated_loss", mask.len(), g.shape(l_u)[0])?;
    let m = flags(g, mask)?;
    let lm = g.mul(l_m, m)?;
    let s = g.add(l_u, lm)?;
    g.mean_all(s)
}

/// Feedback loss on per-sample divergences `d [N]` with constant targets `e`.
pub fn dfl<T: Scalar>(g: &mut Graph<T>, d: Var, e: &[bool], cfg: &GateConfig) -> Result<Var> {
    check_batch("dfl", e.len(), g.shape(d)[0])?;
    let dc = g.clamp(d, DFL_CLAMP, 1.0 - DFL_CLAMP);
    let ln_d = g.ln(dc)?;
    let one_minus = g.affine(dc, -1.0, 1.0);
    let ln_1md = g.ln(one_minus)?;
    let we = flags(g, e)?;
    let not_e: Vec<bool> = e.iter().map(|b| !b).collect();
    let wn = flags(g, &not_e)?;
    let a = g.mul(we, ln_1md)?;
    let b = g.mul(wn, ln_d)?;
    let ll = g.add(a, b)?;
    let sign = match cfg.dfl_sign {
        DflSign::Corrected => -1.0,
        DflSign::PaperLiteral => 1.0,
    };
    let bce = g.scale(ll, sign);
    let off = g.affine(dc, 1.0, -cfg.gamma);
    let reg = g.square(off);
    let reg = g.scale(reg, cfg.alpha);
    let per = g.add(bce, reg)?;
    g.mean_all(per)
}

/// Graph handles and constants of one assembled objective.
#[derive(Clone, Debug)]
pub struct LossVars {
    /// Batch mean of the uni-modal residual.
    pub l_u: Var,
    /// Batch mean of the multi-modal residual, ungated.
    pub l_m: Var,
    pub gated: Var,
    pub l_dfl: Var,
    pub total: Var,
    pub e: Vec<bool>,
    pub gate: Vec<bool>,
    /// Number of divergences that hit the clamp.
    pub clamped: usize,
}

/// Builds the full objective: gated branch loss plus `λ·dfl`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    eps: Var,
    eps_u: Var,
    eps_m: Var,
    d: Var,
    cfg: &GateConfig,
) -> Result<LossVars> {
    let n = g.shape(eps)[0];
    check_batch("total_loss", g.shape(d)[0], n)?;
    let e = fusion_indicator(g.value(eps), g.value(eps_u), g.value(eps_m))?;
    let dv: Vec<f32> = g.value(d).data().iter().map(|x| x.as_f64() as f32).collect();
    let clamped = dv
        .iter()
        .filter(|&&x| (x as f64) < DFL_CLAMP || (x as f64) > 1.0 - DFL_CLAMP)
        .count();
    let gate = gate_mask(&dv, cfg.gamma);

    let lu = branch_loss(g, eps, eps_u)?;
    let lm = branch_loss(g, eps, eps_m)?;
    let gated = gated_loss(g, lu, lm, &gate)?;
    let l_dfl = dfl(g, d, &e, cfg)?;
    let weighted = g.scale(l_dfl, cfg.lambda);
    let total = g.add(gated, weighted)?;
    let l_u = g.mean_all(lu)?;
    let l_m = g.mean_all(lm)?;
    Ok(LossVars {
        l_u,
        l_m,
        gated,
        l_dfl,
        total,
        e,
        gate,
        clamped,
    })
}

/// Values of one assembled objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub l_u: f64,
    pub l_m: f64,
    pub gated: f64,
    pub l_dfl: f64,
    pub total: f64,
    pub e: Vec<bool>,
    pub d: Vec<f32>,
    pub clamped: usize,
}

impl LossBundle {
    pub fn read<T: Scalar>(g: &Graph<T>, vars: &LossVars, d: Var) -> Self {
        let item = |v: Var| g.value(v).item().as_f64();
        Self {
            l_u: item(vars.l_u),
            l_m: item(vars.l_m),
            gated: item(vars.gated),
            l_dfl: item(vars.l_dfl),
            total: item(vars.total),
            e: vars.e.clone(),
            d: g.value(d).data().iter().map(|x| x.as_f64() as f32).collect(),
            clamped: vars.clamped,
        }
    }

    pub fn mean_d(&self) -> f64 {
        self.d.iter().map(|&x| x as f64).sum::<f64>() / self.d.len().max(1) as f64
    }
}

/// Evaluates the objective on plain tensors.
pub fn evaluate_loss<T: Scalar>(
    eps: &Tensor<T>,
    eps_u: &Tensor<T>,
    eps_m: &Tensor<T>,
    d: &[T],
    cfg: &GateConfig,
) -> Result<LossBundle> {
    let mut g = Graph::<T>::detached(crate::numerics::Mode::Eval);
    let e = g.input(eps.clone())?;
    let u = g.input(eps_u.clone())?;
    let m = g.input(eps_m.clone())?;
    let dv = g.input(Tensor::new(&[d.len()], d.to_vec())?)?;
    let vars = total_loss(&mut g, e, u, m, dv, cfg)?;
    Ok(LossBundle::read(&g, &vars, dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_boundary_is_inclusive() {
        assert!(trusts_fusion(0.3, 0.5));
        assert!(trusts_fusion(0.5, 0.5));
        assert!(!trusts_fusion(0.7, 0.5));
        assert!(!trusts_fusion(f32::from_bits(0.5f32.to_bits() + 1), 0.5));
    }

    #[test]
    fn divergence_means() {
        assert!((divergence(&Tensor::full(&[4, 1], 0.3f32)).unwrap() - 0.3).abs() < 1e-7);
        let u = Tensor::new(&[2, 1], vec![0.2f64, 0.8]).unwrap();
        assert_eq!(divergence(&u).unwrap(), 0.5);
        assert!(divergence(&Tensor::new(&[2], vec![0.0f64, 0.5]).unwrap()).is_err());
    }

    #[test]
    fn dfl_scalar_case() {
        let z = Tensor::<f64>::zeros(&[1, 2]);
        let b = evaluate_loss(&z, &z, &z, &[0.5], &GateConfig::default()).unwrap();
        assert!((b.l_dfl - 2f64.ln()).abs() < 1e-12);
        assert_eq!(b.e, vec![true]);
        let lit = GateConfig {
            dfl_sign: DflSign::PaperLiteral,
            ..GateConfig::default()
        };
        let b = evaluate_loss(&z, &z, &z, &[0.5], &lit).unwrap();
        assert!((b.l_dfl + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clamp_is_counted() {
        let z = Tensor::<f64>::zeros(&[2, 1]);
        let b = evaluate_loss(&z, &z, &z, &[0.0, 0.5], &GateConfig::default()).unwrap();
        assert_eq!(b.clamped, 1);
        assert!(b.total.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig { gamma: 1.0, ..GateConfig::default() }.validate().is_ok());
        for gamma in [0.0, 1.5, -0.1, f64::NAN] {
            let c = GateConfig {
                gamma,
                ..GateConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
