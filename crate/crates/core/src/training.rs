//! The joint variational objective, Adam, the loss-speed learning-rate
//! rule, and the training loop.
//!
//! One training step builds a fresh tape, stages the model latents, runs
//! the forward pass, adds the assembled regularizer to the cross-entropy,
//! and feeds the gradients to Adam. The learning rate follows the speed of
//! change of the epoch-mean loss: when the speed increases the rate decays
//! by 0.99, otherwise it grows by the inverse factor.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{to_node_signal, DataError, SkeletonDataset};
use crate::gcn::{forward, param_count, stage, forward_staged, GcnModel, ModelError};
use crate::phasefield::{PhaseFieldError, PhaseFieldParams};
use crate::pruning::{
    binarization_fraction, binarize_masks, connectivity_report, observed_pruning_rate,
    PruneError, PruneReport,
};
use crate::regularizers::{assemble_regularizer_var, RegKind, RegularizerError, RegularizerSpec};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Multiplicative factor of the adaptive learning-rate rule.
pub const LR_DECAY: f64 = 0.99;

/// Tolerance used when reporting how binary the masks are.
pub const BINARIZATION_TOL: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} term at epoch {epoch}")]
    NonFiniteLoss { term: LossTerm, epoch: usize },
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("in_channels {channels} is not 3 x frames")]
    BadChannelCount { channels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    PhaseField(#[from] PhaseFieldError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which side of the objective went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    CrossEntropy,
    PhaseFieldEnergy,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossTerm::CrossEntropy => write!(f, "cross-entropy"),
            LossTerm::PhaseFieldEnergy => write!(f, "regularizer"),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Mixing weight of the regularizer; mirrored into `reg.lambda`.
    pub lambda: f64,
    pub reg: RegularizerSpec,
    /// Well depth of the phase-field term.
    pub pfm_beta: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2700,
            batch_size: 200,
            base_lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.0,
            reg: RegularizerSpec::none(),
            pfm_beta: PhaseFieldParams::DEFAULT_BETA,
            checkpoint_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(TrainError::BadConfig(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.lambda != self.reg.lambda {
            return Err(TrainError::BadConfig(format!(
                "lambda ({}) and reg.lambda ({}) disagree",
                self.lambda, self.reg.lambda
            )));
        }
        if self.pfm_beta <= 0.0 {
            return Err(TrainError::BadConfig(format!(
                "pfm_beta must be positive, got {}",
                self.pfm_beta
            )));
        }
        if self.checkpoint_interval < 1 {
            return Err(TrainError::BadConfig(
                "checkpoint_interval must be at least 1".into(),
            ));
        }
        self.reg.validate()?;
        Ok(())
    }

    /// Phase-field params of this run: the targeted-rate tilt for `pfm`,
    /// balanced wells otherwise (joint terms and diagnostics).
    pub fn pfm_params(&self) -> Result<PhaseFieldParams, PhaseFieldError> {
        match self.reg.kind {
            RegKind::Pfm => PhaseFieldParams::for_target_rate(self.reg.target_tpr, self.pfm_beta),
            _ => PhaseFieldParams::balanced(self.pfm_beta),
        }
    }
}

/// Adam accumulators plus the adaptive-rate bookkeeping.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub current_lr: f64,
    prev_loss: Option<f64>,
    prev_speed: Option<f64>,
}

impl OptimizerState {
    pub fn new(model: &GcnModel, base_lr: f64) -> Self {
        let shapes: Vec<usize> = model.latents().iter().map(|t| t.numel()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            current_lr: base_lr,
            prev_loss: None,
            prev_speed: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every latent. `freeze`, when given,
/// multiplies each update entry-wise (zeros freeze pruned coordinates).
pub fn adam_step(
    state: &mut OptimizerState,
    model: &mut GcnModel,
    grads: &[Vec<f64>],
    cfg: &TrainConfig,
    freeze: Option<&[Tensor]>,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let lr = state.current_lr;
    for (layer, latent) in model.latents_mut().into_iter().enumerate() {
        let g = &grads[layer];
        let m = &mut state.m[layer];
        let v = &mut state.v[layer];
        let data = latent.data_mut();
        for i in 0..data.len() {
            let gi = g[i];
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * gi;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut update = lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            if let Some(masks) = freeze {
                update *= masks[layer].data()[i];
            }
            data[i] -= update;
        }
    }
}

/// The loss-speed rule: with `speed(t) = |L(t) - L(t-1)|`, an increasing
/// speed decays the rate by 0.99 and a non-increasing one grows it by the
/// same factor. Needs two speeds, so it activates from the third call.
pub fn lr_schedule_update(state: &mut OptimizerState, epoch_loss: f64) {
    if let Some(prev_loss) = state.prev_loss {
        let speed = (epoch_loss - prev_loss).abs();
        if let Some(prev_speed) = state.prev_speed {
            if speed > prev_speed {
                state.current_lr *= LR_DECAY;
            } else {
                state.current_lr /= LR_DECAY;
            }
        }
        state.prev_speed = Some(speed);
    }
    state.prev_loss = Some(epoch_loss);
}

/// Per-epoch diagnostics, streamed as CSV by the experiment runner.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub energy: f64,
    pub lr: f64,
    pub observed_rate: f64,
    pub binarization: f64,
}

/// Header + rows of the metrics stream.
pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,cross_entropy,energy,lr,observed_rate,binarization\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.12},{:.12},{:.12},{:.6},{:.6}",
            m.epoch, m.cross_entropy, m.energy, m.lr, m.observed_rate, m.binarization
        );
    }
    out
}

/// Result of a training run: periodic reports, the final report, and the
/// per-epoch metric stream.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<(usize, PruneReport)>,
    pub final_report: PruneReport,
    pub metrics: Vec<EpochMetrics>,
}

/// Value of the full objective on a batch (`B x s x n` with labels), as a
/// scalar tensor. Convenience wrapper over the staged path; the training
/// loop drives the staged path directly.
pub fn total_loss(
    model: &GcnModel,
    batch: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Tensor, TrainError> {
    cfg.validate()?;
    let arch = &model.arch;
    if batch.shape().len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "total_loss",
            expected: 3,
            shape: batch.shape().to_vec(),
        }
        .into());
    }
    let sample_len = arch.in_channels * arch.n_nodes;
    let signals: Vec<Tensor> = (0..batch.shape()[0])
        .map(|b| {
            Tensor::new(
                vec![arch.in_channels, arch.n_nodes],
                batch.data()[b * sample_len..(b + 1) * sample_len].to_vec(),
            )
            .and_then(|t| t.transpose2())
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor> = signals.iter().collect();

    let tape = Tape::new();
    let staged = stage(&tape, model)?;
    let logits = forward_staged(&tape, arch, &staged, &refs)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let reg = assemble_regularizer_var(&tape, &cfg.reg, &staged.masks, cfg.pfm_params()?)?;
    let loss = ce.add(reg)?;
    Ok(Tensor::scalar(loss.scalar_value())?)
}

/// Node signals of the given split, pre-transposed to `n x s` for the
/// staged forward pass, plus their labels.
fn prepare_split(
    ds: &SkeletonDataset,
    idx: &[usize],
    target_frames: usize,
) -> Result<(Vec<Tensor>, Vec<usize>), TrainError> {
    let mut signals = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let seq = &ds.sequences[i];
        signals.push(to_node_signal(seq, target_frames)?.transpose2()?);
        labels.push(seq.label);
    }
    Ok((signals, labels))
}

fn frames_for(model: &GcnModel) -> Result<usize, TrainError> {
    let channels = model.arch.in_channels;
    if channels % 3 != 0 {
        return Err(TrainError::BadChannelCount { channels });
    }
    Ok(channels / 3)
}

/// Trains the model in place.
pub fn train(
    model: &mut GcnModel,
    ds: &SkeletonDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_impl(model, ds, cfg, None)
}

/// Fine-tunes with frozen binary masks: updates only the kept coordinates,
/// and evaluates under the same masks.
pub fn fine_tune(
    model: &mut GcnModel,
    ds: &SkeletonDataset,
    cfg: &TrainConfig,
    masks: &[Tensor],
) -> Result<TrainOutcome, TrainError> {
    train_impl(model, ds, cfg, Some(masks))
}

fn train_impl(
    model: &mut GcnModel,
    ds: &SkeletonDataset,
    cfg: &TrainConfig,
    freeze: Option<&[Tensor]>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if ds.train_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let frames = frames_for(model)?;
    let (signals, labels) = prepare_split(ds, &ds.train_idx, frames)?;
    let (test_signals, test_labels) = prepare_split(ds, &ds.test_idx, frames)?;

    let params = cfg.pfm_params()?;
    let z = params.threshold();

    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model, cfg.base_lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::new();

    let mut order: Vec<usize> = (0..signals.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_ce = 0.0;
        let mut epoch_energy = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_signals: Vec<&Tensor> = chunk.iter().map(|&i| &signals[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let tape = Tape::new();
            // Overflow anywhere on the forward path counts against the
            // data term for diagnostics; the regularizer is mapped below.
            let staged = stage(&tape, model)
                .map_err(|e| model_non_finite_as(e, LossTerm::CrossEntropy, epoch))?;
            let logits = forward_staged(&tape, &model.arch, &staged, &batch_signals)
                .map_err(|e| model_non_finite_as(e, LossTerm::CrossEntropy, epoch))?;
            let ce = tape
                .softmax_cross_entropy(logits, &batch_labels)
                .map_err(|e| non_finite_as(e, LossTerm::CrossEntropy, epoch))?;
            let reg = assemble_regularizer_var(&tape, &cfg.reg, &staged.masks, params)
                .map_err(|e| match e {
                    RegularizerError::Tensor(t) => {
                        non_finite_as(t, LossTerm::PhaseFieldEnergy, epoch)
                    }
                    other => TrainError::Regularizer(other),
                })?;
            let ce_value = ce.scalar_value();
            let reg_value = reg.scalar_value();
            if !ce_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    term: LossTerm::CrossEntropy,
                    epoch,
                });
            }
            if !reg_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    term: LossTerm::PhaseFieldEnergy,
                    epoch,
                });
            }
            let loss = ce.add(reg)?;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = staged.latents.iter().map(|v| v.grad()).collect();
            adam_step(&mut state, model, &grads, cfg, freeze);

            epoch_ce += ce_value;
            epoch_energy += reg_value;
            batches += 1;
        }
        let mean_ce = epoch_ce / batches as f64;
        let mean_energy = epoch_energy / batches as f64;
        lr_schedule_update(&mut state, mean_ce + mean_energy);

        metrics.push(EpochMetrics {
            epoch,
            cross_entropy: mean_ce,
            energy: mean_energy,
            lr: state.current_lr,
            observed_rate: observed_pruning_rate(model, z)?,
            binarization: binarization_fraction(model, BINARIZATION_TOL)?,
        });

        if epoch % cfg.checkpoint_interval == 0 && epoch != cfg.epochs {
            reports.push((
                epoch,
                prune_report(model, z, &test_signals, &test_labels, ds.n_classes, freeze)?,
            ));
        }
    }

    let final_report = prune_report(model, z, &test_signals, &test_labels, ds.n_classes, freeze)?;
    reports.push((cfg.epochs, final_report.clone()));
    Ok(TrainOutcome {
        reports,
        final_report,
        metrics,
    })
}

fn non_finite_as(e: TensorError, term: LossTerm, epoch: usize) -> TrainError {
    match e {
        TensorError::NonFinite { .. } => TrainError::NonFiniteLoss { term, epoch },
        other => TrainError::Tensor(other),
    }
}

fn model_non_finite_as(e: ModelError, term: LossTerm, epoch: usize) -> TrainError {
    match e {
        ModelError::Tensor(t) => non_finite_as(t, term, epoch),
        other => TrainError::Model(other),
    }
}

/// Builds the pruning report at threshold `z`: hard-masked accuracy on the
/// test split, observed rate, binarization and connectivity diagnostics.
/// During mask-frozen fine-tuning the frozen masks take the place of the
/// thresholded ones.
fn prune_report(
    model: &GcnModel,
    z: f64,
    test_signals: &[Tensor],
    test_labels: &[usize],
    n_classes: usize,
    freeze: Option<&[Tensor]>,
) -> Result<PruneReport, TrainError> {
    let masks = match freeze {
        Some(m) => m.to_vec(),
        None => binarize_masks(model, z)?,
    };
    let total = param_count(model);
    let kept: usize = masks
        .iter()
        .map(|m| m.data().iter().filter(|&&v| v != 0.0).count())
        .sum();
    let observed_rate = match freeze {
        Some(_) => (total - kept) as f64 / total as f64,
        None => observed_pruning_rate(model, z)?,
    };
    let connectivity = connectivity_report(model, &masks)?;
    let pruned_model = crate::pruning::apply_masks(model, &masks)?;
    let accuracy = evaluate_signals(&pruned_model, test_signals, test_labels, n_classes)?;
    Ok(PruneReport {
        observed_rate,
        kept_params: kept,
        total_params: total,
        binarization_fraction: binarization_fraction(model, BINARIZATION_TOL)?,
        dead_output_units: connectivity.dead_output_units(),
        accuracy,
    })
}

/// Mean per-class (macro) accuracy on the dataset's test split, optionally
/// under hard masks.
pub fn evaluate(
    model: &GcnModel,
    ds: &SkeletonDataset,
    hard_masks: Option<&[Tensor]>,
) -> Result<f64, TrainError> {
    let frames = frames_for(model)?;
    let (signals, labels) = prepare_split(ds, &ds.test_idx, frames)?;
    let scored = match hard_masks {
        Some(masks) => crate::pruning::apply_masks(model, masks)?,
        None => model.clone(),
    };
    evaluate_signals(&scored, &signals, &labels, ds.n_classes)
}

/// Macro accuracy over pre-transposed node signals. Classes absent from the
/// labels are excluded from the average with a warning.
pub fn evaluate_signals(
    model: &GcnModel,
    signals: &[Tensor],
    labels: &[usize],
    n_classes: usize,
) -> Result<f64, TrainError> {
    assert_eq!(signals.len(), labels.len());
    if signals.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let arch = &model.arch;
    let mut correct = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    // Reuse the plain forward by batching one sample at a time (signals
    // here are already transposed to n x s).
    for (sig, &label) in signals.iter().zip(labels) {
        let u = sig.transpose2()?;
        let batch = Tensor::new(
            vec![1, arch.in_channels, arch.n_nodes],
            u.data().to_vec(),
        )?;
        let logits = forward(model, &batch, None)?;
        let row = logits.data();
        let mut best = 0usize;
        for k in 1..n_classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        count[label] += 1;
        if best == label {
            correct[label] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for k in 0..n_classes {
        if count[k] == 0 {
            eprintln!("warning: class {k} has no samples; excluded from macro accuracy");
            continue;
        }
        acc += correct[k] as f64 / count[k] as f64;
        present += 1;
    }
    Ok(acc / present.max(1) as f64)
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
