//! Double-well phase-field machinery.
//!
//! The ultra-local term
//!
//! ```text
//! V(t) = beta*((2t-1)^4/4 - (2t-1)^2/2) + alpha*((2t-1) - (2t-1)^3/3)
//! ```
//!
//! has minima at both phases t = 0 and t = 1 whenever `beta > |alpha|`, an
//! interior maximum at `z = (alpha + beta) / (2 beta)`, and well-depth
//! imbalance `V(1) - V(0) = 4 alpha / 3`. Summing `V` over the entries of
//! the soft masks gives the discrete energy that drives mask entries to
//! binary values during training.
//!
//! The soft mask itself is `psi(w) = 2*sigmoid(w^2) - 1`, a symmetric
//! `[0,1)`-valued gate of the latent weight; the effective weight is the
//! reparametrization `w * psi(w)`, so the topology (mask) and the weights
//! share one set of latent variables.
//!
//! Picking `alpha = 2*beta*tpr - beta` places the interior maximum of `V`
//! (and hence the keep/prune threshold) exactly at the targeted pruning
//! rate `tpr`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::Var;
use crate::tensor::{sigmoid, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PhaseFieldError {
    #[error("invalid phase-field params: beta ({beta}) must be positive and exceed |alpha| ({alpha})")]
    InvalidParams { alpha: f64, beta: f64 },
    #[error("targeted pruning rate {tpr} must lie strictly in (0, 1)")]
    TprOutOfRange { tpr: f64 },
    #[error("mask entry {value} outside [0, 1]")]
    MaskOutOfRange { value: f64 },
}

/// The `(alpha, beta)` pair of the ultra-local term. `beta` sets the well
/// depth, `alpha` the imbalance between the two phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseFieldParams {
    alpha: f64,
    beta: f64,
}

impl PhaseFieldParams {
    /// `beta` fixed to 3 throughout the experiments.
    pub const DEFAULT_BETA: f64 = 3.0;

    pub fn new(alpha: f64, beta: f64) -> Result<Self, PhaseFieldError> {
        if !(beta.is_finite() && alpha.is_finite() && beta > 0.0 && beta > alpha.abs()) {
            return Err(PhaseFieldError::InvalidParams { alpha, beta });
        }
        Ok(Self { alpha, beta })
    }

    /// Balanced wells (`alpha = 0`): both phases have equal energy.
    pub fn balanced(beta: f64) -> Result<Self, PhaseFieldError> {
        Self::new(0.0, beta)
    }

    /// Parameters whose interior maximum sits at the targeted pruning rate:
    /// `alpha = 2*beta*tpr - beta`. The constraint `beta > |alpha|` then
    /// holds automatically for any `tpr` strictly inside `(0, 1)`.
    pub fn for_target_rate(tpr: f64, beta: f64) -> Result<Self, PhaseFieldError> {
        Self::new(alpha_for_tpr(tpr, beta)?, beta)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The keep/prune threshold `z = (beta + alpha) / (2 beta)`, i.e. the
    /// interior maximum of `V`; strictly inside `(0, 1)` for valid params.
    pub fn threshold(&self) -> f64 {
        threshold_for(*self)
    }
}

/// `alpha` realizing a targeted pruning rate: `2*beta*tpr - beta`.
pub fn alpha_for_tpr(tpr: f64, beta: f64) -> Result<f64, PhaseFieldError> {
    if !(tpr.is_finite() && tpr > 0.0 && tpr < 1.0) {
        return Err(PhaseFieldError::TprOutOfRange { tpr });
    }
    Ok(2.0 * beta * tpr - beta)
}

/// Interior maximum of `V`, used as the pruning threshold.
pub fn threshold_for(p: PhaseFieldParams) -> f64 {
    (p.beta + p.alpha) / (2.0 * p.beta)
}

/// The ultra-local term `V(t)`.
pub fn ultra_local(t: f64, p: PhaseFieldParams) -> f64 {
    let s = 2.0 * t - 1.0;
    let s2 = s * s;
    p.beta * (s2 * s2 / 4.0 - s2 / 2.0) + p.alpha * (s - s2 * s / 3.0)
}

/// Analytic derivative `V'(t) = 2 (s^2 - 1)(beta s - alpha)` with `s = 2t - 1`.
///
/// Vanishes at both phases (`t = 0, 1`) and at the interior maximum.
pub fn ultra_local_grad(t: f64, p: PhaseFieldParams) -> f64 {
    let s = 2.0 * t - 1.0;
    2.0 * (s * s - 1.0) * (p.beta * s - p.alpha)
}

/// The gate `psi(w) = 2*sigmoid(w^2) - 1`, scalar form.
pub fn psi(w: f64) -> f64 {
    2.0 * sigmoid(w * w) - 1.0
}

/// `psi'(w) = 4 w sigma(w^2) (1 - sigma(w^2))`.
pub fn psi_deriv(w: f64) -> f64 {
    let s = sigmoid(w * w);
    4.0 * w * s * (1.0 - s)
}

/// Inverse of the gate on magnitudes: the `w >= 0` with `psi(w) = u`.
pub fn psi_inv(u: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&u));
    (((1.0 + u) / (1.0 - u)).ln()).sqrt()
}

/// Entry-wise gate of a plain tensor.
pub fn psi_tensor(w: &Tensor) -> Tensor {
    let data = w.data().iter().map(|&x| psi(x)).collect();
    Tensor::new(w.shape().to_vec(), data).expect("psi preserves finiteness")
}

/// Entry-wise effective weight `w * psi(w)` of a plain tensor. Never
/// exceeds the latent in magnitude and never flips its sign.
pub fn reparametrize(latent: &Tensor) -> Tensor {
    let data = latent.data().iter().map(|&x| x * psi(x)).collect();
    Tensor::new(latent.shape().to_vec(), data).expect("reparametrization preserves finiteness")
}

/// Gate on the tape: `2*sigmoid(w^2) - 1`, differentiable.
pub fn psi_var<'t>(w: Var<'t>) -> Result<Var<'t>, TensorError> {
    w.square()?.sigmoid()?.scale(2.0)?.add_scalar(-1.0)
}

/// Reparametrization on the tape: `w * psi(w)`, differentiable.
pub fn reparametrize_var<'t>(latent: Var<'t>) -> Result<Var<'t>, TensorError> {
    latent.mul(psi_var(latent)?)
}

/// `V` applied entry-wise on the tape, built from primitive ops.
fn ultra_local_var<'t>(t: Var<'t>, p: PhaseFieldParams) -> Result<Var<'t>, TensorError> {
    let s = t.scale(2.0)?.add_scalar(-1.0)?;
    let s2 = s.square()?;
    let s3 = s2.mul(s)?;
    let s4 = s2.square()?;
    let well = s4.scale(p.beta / 4.0)?.sub(s2.scale(p.beta / 2.0)?)?;
    let tilt = s.scale(p.alpha)?.sub(s3.scale(p.alpha / 3.0)?)?;
    well.add(tilt)
}

/// Discrete phase-field energy on the tape: `sum_i V(mask_i)` over every
/// entry of every mask tensor. Masks are expected to come from [`psi_var`],
/// which guarantees the `[0, 1)` range.
pub fn phase_field_energy_var<'t>(
    masks: &[Var<'t>],
    p: PhaseFieldParams,
) -> Result<Var<'t>, TensorError> {
    assert!(!masks.is_empty(), "phase-field energy needs at least one mask");
    let mut total: Option<Var<'t>> = None;
    for &mask in masks {
        let e = ultra_local_var(mask, p)?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(e)?,
            None => e,
        });
    }
    Ok(total.expect("non-empty masks"))
}

/// Plain-value twin of [`phase_field_energy_var`]; enforces the `[0, 1]`
/// contract on mask entries.
pub fn phase_field_energy(masks: &[Tensor], p: PhaseFieldParams) -> Result<f64, PhaseFieldError> {
    let mut total = 0.0;
    for mask in masks {
        for &m in mask.data() {
            if !(0.0..=1.0).contains(&m) {
                return Err(PhaseFieldError::MaskOutOfRange { value: m });
            }
            total += ultra_local(m, p);
        }
    }
    Ok(total)
}

/// The kept region of a thresholding pass: per-layer flat indices of the
/// entries with `psi(latent) > z` (strictly).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRegion {
    pub z: f64,
    pub kept: Vec<Vec<usize>>,
}

impl ThresholdRegion {
    /// Scans latent tensors and records the strictly-above-threshold
    /// coordinates of each.
    pub fn from_latents<'a>(latents: impl Iterator<Item = &'a Tensor>, z: f64) -> Self {
        let kept = latents
            .map(|t| {
                t.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| psi(w) > z)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Self { z, kept }
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }
}
