//! Alternative sparsity regularizers and their assembly into the joint loss.
//!
//! All regularizers act on the soft masks `psi(latent)` and can be plugged
//! into the training objective in place of the phase-field energy, or
//! jointly with a balanced (`alpha = 0`) phase-field term. The l0 count is
//! non-differentiable; it is replaced by the smooth Gaussian-bump surrogate
//! `1 - exp(-(m/tau)^2)`, which matches the step shape for `m >> tau`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasefield::{phase_field_energy_var, PhaseFieldParams};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Guard for `0 log 0` terms in the entropy regularizer; the only place in
/// the crate where the log is clamped.
pub const ENTROPY_LOG_FLOOR: f64 = 1e-12;

/// Default width of the l0 surrogate bump.
pub const DEFAULT_L0_TAU: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("target pruning rate must lie in (0, 1), got {0}")]
    BadTargetRate(f64),
    #[error("l0 surrogate width tau must be positive, got {0}")]
    BadTau(f64),
    #[error("kind `pfm` already includes the phase-field energy; pfm_joint is redundant")]
    PfmWithJoint,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which penalty to plug into the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    Pfm,
    L0,
    L1,
    L2Cost,
    Entropy,
}

impl RegKind {
    pub fn label(&self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Pfm => "pfm",
            RegKind::L0 => "l0",
            RegKind::L1 => "l1",
            RegKind::L2Cost => "l2cost",
            RegKind::Entropy => "entropy",
        }
    }

    pub const ALL: [RegKind; 6] = [
        RegKind::None,
        RegKind::Pfm,
        RegKind::L0,
        RegKind::L1,
        RegKind::L2Cost,
        RegKind::Entropy,
    ];
}

/// A fully resolved regularizer choice: the kind, its weight, whether a
/// balanced phase-field term rides along, and the targeted pruning rate
/// (used by `pfm` and `l2cost`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub lambda: f64,
    pub pfm_joint: bool,
    pub target_tpr: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_L0_TAU
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self {
            kind: RegKind::None,
            lambda: 0.0,
            pfm_joint: false,
            target_tpr: 0.5,
            tau: DEFAULT_L0_TAU,
        }
    }

    pub fn validate(&self) -> Result<(), RegularizerError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(RegularizerError::BadLambda(self.lambda));
        }
        if !self.target_tpr.is_finite() || self.target_tpr <= 0.0 || self.target_tpr >= 1.0 {
            return Err(RegularizerError::BadTargetRate(self.target_tpr));
        }
        if self.tau <= 0.0 {
            return Err(RegularizerError::BadTau(self.tau));
        }
        if self.kind == RegKind::Pfm && self.pfm_joint {
            return Err(RegularizerError::PfmWithJoint);
        }
        Ok(())
    }
}

/// `sum |m_i|`; equals `sum m_i` since masks are non-negative.
pub fn l1_reg_var<'t>(masks: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    sum_over(masks, |m| m.sum())
}

/// `sum -m log m - (1-m) log(1-m)` with guarded logs, so both endpoint
/// terms vanish.
pub fn entropy_reg_var<'t>(masks: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    sum_over(masks, |m| {
        let left = m.mul(m.log_guarded(ENTROPY_LOG_FLOOR)?)?;
        let one_minus = m.scale(-1.0)?.add_scalar(1.0)?;
        let right = one_minus.mul(one_minus.log_guarded(ENTROPY_LOG_FLOOR)?)?;
        left.add(right)?.scale(-1.0)?.sum()
    })
}

/// Squared gap between the mean mask value (the keep-fraction proxy) and
/// the budget `1 - target_tpr`. Mean, not sum, so lambda is independent of
/// the architecture size.
pub fn l2_cost_reg_var<'t>(masks: &[Var<'t>], target_tpr: f64) -> Result<Var<'t>, TensorError> {
    let total: usize = masks
        .iter()
        .map(|m| m.shape().iter().product::<usize>())
        .sum();
    let mut mean: Option<Var<'t>> = None;
    for &m in masks {
        let s = m.sum()?;
        mean = Some(match mean {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    let mean = mean
        .expect("l2 cost needs at least one mask")
        .scale(1.0 / total as f64)?;
    let budget = 1.0 - target_tpr;
    mean.add_scalar(-budget)?.square()
}

/// Smooth non-zero count: `sum 1 - exp(-(m/tau)^2)`.
pub fn l0_reg_var<'t>(masks: &[Var<'t>], tau: f64) -> Result<Var<'t>, RegularizerError> {
    if tau <= 0.0 {
        return Err(RegularizerError::BadTau(tau));
    }
    Ok(sum_over(masks, |m| {
        m.scale(1.0 / tau)?
            .square()?
            .scale(-1.0)?
            .exp()?
            .scale(-1.0)?
            .add_scalar(1.0)?
            .sum()
    })?)
}

fn sum_over<'t>(
    masks: &[Var<'t>],
    f: impl Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
) -> Result<Var<'t>, TensorError> {
    assert!(!masks.is_empty(), "regularizer needs at least one mask");
    let mut total: Option<Var<'t>> = None;
    for &m in masks {
        let term = f(m)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty masks"))
}

/// Assembles the full penalty: `lambda * (chosen regularizer)`, plus
/// `lambda * E_P` with balanced wells when `pfm_joint` is set. Kind `pfm`
/// uses the imbalanced energy itself (its tilt encodes the targeted rate).
pub fn assemble_regularizer_var<'t>(
    tape: &'t Tape,
    spec: &RegularizerSpec,
    masks: &[Var<'t>],
    pfm: PhaseFieldParams,
) -> Result<Var<'t>, RegularizerError> {
    spec.validate()?;
    let base = match spec.kind {
        RegKind::None => tape.constant(0.0),
        RegKind::Pfm => phase_field_energy_var(masks, pfm)?,
        RegKind::L0 => l0_reg_var(masks, spec.tau)?,
        RegKind::L1 => l1_reg_var(masks)?,
        RegKind::L2Cost => l2_cost_reg_var(masks, spec.target_tpr)?,
        RegKind::Entropy => entropy_reg_var(masks)?,
    };
    let mut total = base.scale(spec.lambda)?;
    if spec.pfm_joint {
        let balanced = PhaseFieldParams::balanced(pfm.beta())
            .expect("positive beta always yields valid balanced params");
        let joint = phase_field_energy_var(masks, balanced)?.scale(spec.lambda)?;
        total = total.add(joint)?;
    }
    Ok(total)
}

/// Per-entry curve samples used for plotting; `l2` follows the
/// penalize-large-masks reading `m^2`.
pub fn l1_point(m: f64) -> f64 {
    m.abs()
}

pub fn l2_point(m: f64) -> f64 {
    m * m
}

pub fn l0_point(m: f64, tau: f64) -> f64 {
    1.0 - (-(m / tau) * (m / tau)).exp()
}

pub fn entropy_point(m: f64) -> f64 {
    -m * m.max(ENTROPY_LOG_FLOOR).ln() - (1.0 - m) * (1.0 - m).max(ENTROPY_LOG_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn mask(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    fn eval_reg<F>(values: &[f64], f: F) -> f64
    where
        F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TensorError>,
    {
        let tape = Tape::new();
        let m = tape.leaf(&mask(values));
        f(&[m]).unwrap().scalar_value()
    }

    #[test]
    fn l1_reference_values() {
        assert_eq!(eval_reg(&[0.0, 0.0], l1_reg_var), 0.0);
        assert_eq!(eval_reg(&[0.2, 0.8], l1_reg_var), 1.0);
    }

    #[test]
    fn l1_gradient_is_one_on_open_interval() {
        let tape = Tape::new();
        let m = tape.leaf(&mask(&[0.2, 0.5, 0.9]).requiring_grad(true));
        let loss = l1_reg_var(&[m]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(m.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(eval_reg(&[0.0], entropy_reg_var), 0.0);
        let at_half = eval_reg(&[0.5], entropy_reg_var);
        assert!((at_half - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_peaks_at_half() {
        // Grid check: maximum at 0.5, minima at the ends.
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=1000 {
            let m = i as f64 / 1000.0;
            let e = entropy_point(m);
            assert!(e >= -1e-12);
            if e > best.1 {
                best = (m, e);
            }
        }
        assert!((best.0 - 0.5).abs() < 1e-3);
        assert!(entropy_point(0.0).abs() < 1e-9);
        assert!(entropy_point(1.0).abs() < 1e-9);
    }

    #[test]
    fn l2_cost_reference_values() {
        let v = eval_reg(&[1.0, 0.0], |m| l2_cost_reg_var(m, 0.5));
        assert_eq!(v, 0.0);
        let v = eval_reg(&[1.0, 1.0], |m| l2_cost_reg_var(m, 0.5));
        assert!((v - 0.25).abs() < 1e-15);
        // Budget -> 1 as tpr -> 0: all-ones masks cost nothing.
        let v = eval_reg(&[1.0, 1.0, 1.0], |m| l2_cost_reg_var(m, 1e-9));
        assert!(v < 1e-15);
    }

    #[test]
    fn l0_reference_values() {
        let v = eval_reg(&[0.0], |m| Ok(l0_reg_var(m, 0.1).unwrap()));
        assert_eq!(v, 0.0);
        let v = eval_reg(&[0.1], |m| Ok(l0_reg_var(m, 0.1).unwrap()));
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        // m >> tau approaches the exact count.
        let v = eval_reg(&[0.9, 0.95], |m| Ok(l0_reg_var(m, 0.05).unwrap()));
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l0_rejects_non_positive_tau() {
        let tape = Tape::new();
        let m = tape.leaf(&mask(&[0.5]));
        assert!(matches!(
            l0_reg_var(&[m], 0.0).unwrap_err(),
            RegularizerError::BadTau(_)
        ));
    }

    #[test]
    fn l0_counts_corners_exactly() {
        // On binary masks the surrogate matches brute-force counting for
        // tau <= 0.25: check all 2^3 corner patterns.
        let tau = 0.25;
        for bits in 0..8u32 {
            let values: Vec<f64> = (0..3).map(|i| ((bits >> i) & 1) as f64).collect();
            let expected = values.iter().filter(|&&v| v != 0.0).count() as f64;
            let got = eval_reg(&values, |m| Ok(l0_reg_var(m, tau).unwrap()));
            assert!(
                (got - expected).abs() < 1e-6,
                "pattern {values:?}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = RegularizerSpec::none();
        spec.lambda = -1.0;
        assert!(matches!(
            spec.validate().unwrap_err(),
            RegularizerError::BadLambda(_)
        ));

        let spec = RegularizerSpec {
            kind: RegKind::Pfm,
            lambda: 1.0,
            pfm_joint: true,
            target_tpr: 0.5,
            tau: 0.1,
        };
        assert!(matches!(
            spec.validate().unwrap_err(),
            RegularizerError::PfmWithJoint
        ));
    }

    #[test]
    fn assemble_none_is_zero() {
        let tape = Tape::new();
        let m = tape.leaf(&mask(&[0.3, 0.6]));
        let pfm = PhaseFieldParams::balanced(3.0).unwrap();
        let spec = RegularizerSpec::none();
        let v = assemble_regularizer_var(&tape, &spec, &[m], pfm).unwrap();
        assert_eq!(v.scalar_value(), 0.0);
    }

    #[test]
    fn assemble_pfm_uses_energy() {
        let tape = Tape::new();
        let m = tape.leaf(&mask(&[0.5, 0.5]));
        let pfm = PhaseFieldParams::for_target_rate(0.5, 3.0).unwrap();
        assert_eq!(pfm.alpha(), 0.0);
        let spec = RegularizerSpec {
            kind: RegKind::Pfm,
            lambda: 2.0,
            pfm_joint: false,
            target_tpr: 0.5,
            tau: 0.1,
        };
        // V(0.5) = 0, so the assembled penalty is zero regardless of lambda.
        let v = assemble_regularizer_var(&tape, &spec, &[m], pfm).unwrap();
        assert_eq!(v.scalar_value(), 0.0);
    }

    #[test]
    fn assemble_joint_is_additive() {
        // lambda (sum m + E_P|alpha=0) on a 3-entry mask, verified against
        // the two component oracles evaluated independently.
        let values = [0.2, 0.55, 0.9];
        let lambda = 1.7;
        let pfm = PhaseFieldParams::balanced(3.0).unwrap();
        let spec = RegularizerSpec {
            kind: RegKind::L1,
            lambda,
            pfm_joint: true,
            target_tpr: 0.5,
            tau: 0.1,
        };
        let tape = Tape::new();
        let m = tape.leaf(&mask(&values));
        let got = assemble_regularizer_var(&tape, &spec, &[m], pfm)
            .unwrap()
            .scalar_value();

        let l1: f64 = values.iter().sum();
        let energy: f64 = values
            .iter()
            .map(|&v| crate::phasefield::ultra_local(v, pfm))
            .sum();
        assert!((got - lambda * (l1 + energy)).abs() < 1e-12);
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        let m = mask(&[0.12, 0.37, 0.5, 0.66, 0.91]);
        let pfm = PhaseFieldParams::for_target_rate(0.8, 3.0).unwrap();
        for kind in RegKind::ALL {
            let spec = RegularizerSpec {
                kind,
                lambda: 1.3,
                pfm_joint: false,
                target_tpr: 0.8,
                tau: 0.1,
            };
            let err = grad_check(
                |tape, v| {
                    assemble_regularizer_var(tape, &spec, &[v], pfm)
                        .map_err(|_| TensorError::NonFinite { op: "assemble" })
                },
                &m,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: rel err {err}");
        }
    }

    proptest! {
        #[test]
        fn non_pfm_regularizers_are_non_negative(
            values in proptest::collection::vec(0.0f64..1.0, 1..8),
            tpr in 0.05f64..0.95,
        ) {
            prop_assert!(eval_reg(&values, l1_reg_var) >= 0.0);
            prop_assert!(eval_reg(&values, entropy_reg_var) >= -1e-12);
            prop_assert!(eval_reg(&values, |m| Ok(l0_reg_var(m, 0.1).unwrap())) >= 0.0);
            prop_assert!(eval_reg(&values, |m| l2_cost_reg_var(m, tpr)) >= 0.0);
        }

        #[test]
        fn pfm_respects_its_lower_bound(
            values in proptest::collection::vec(0.0f64..1.0, 1..8),
            alpha in -2.5f64..2.5,
        ) {
            let p = PhaseFieldParams::new(alpha, 3.0).unwrap();
            let n = values.len() as f64;
            let floor = n * crate::phasefield::ultra_local(0.0, p)
                .min(crate::phasefield::ultra_local(1.0, p));
            let masks = vec![mask(&values)];
            let e = crate::phasefield::phase_field_energy(&masks, p).unwrap();
            prop_assert!(e >= floor - 1e-9);
        }
    }
}
