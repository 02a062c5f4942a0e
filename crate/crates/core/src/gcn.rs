//! Multi-head graph convolutional model: adjacency aggregation followed by
//! convolution, a flattening dense head, and latent-weight construction.
//!
//! Every layer, including the learned adjacency (attention) matrices and
//! the final dense layer, stores *latent* weights; the forward pass always
//! goes through the reparametrization `w * psi(w)`, so the soft topology
//! masks and the weights share one set of parameters and pruning-rate
//! accounting covers all of them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasefield::{psi_inv, psi_var, reparametrize, PhaseFieldError, PhaseFieldParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("head count mismatch: {adjacencies} adjacency matrices vs {filters} filter banks")]
    HeadCountMismatch { adjacencies: usize, filters: usize },
    #[error("adjacency prior shape {got:?} does not match [{nodes}, {nodes}]")]
    BadPrior { got: Vec<usize>, nodes: usize },
    #[error("mask count {got} does not match {want} latent tensors")]
    MaskCountMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    PhaseField(#[from] PhaseFieldError),
}

/// Entry-wise nonlinearity applied after the aggregation/convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Layer structure: node count `n`, channel count `s`, heads `K`,
/// convolution filters `C`, and the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnArchitecture {
    pub n_nodes: usize,
    pub in_channels: usize,
    pub heads: usize,
    pub conv_filters: usize,
    pub n_classes: usize,
    pub activation: Activation,
}

impl GcnArchitecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_nodes < 1 || self.in_channels < 1 || self.heads < 1 || self.conv_filters < 1 {
            return Err(ModelError::BadArchitecture(
                "all dimension counts must be at least 1".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(ModelError::BadArchitecture(
                "classification needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count: `K n^2 + K s C + n C classes`.
    pub fn param_count(&self) -> usize {
        self.heads * self.n_nodes * self.n_nodes
            + self.heads * self.in_channels * self.conv_filters
            + self.n_nodes * self.conv_filters * self.n_classes
    }
}

/// How to initialize the latent tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// adjacency latents start at the anatomical prior plus small noise.
    Xavier,
    /// Seeds the two phases directly: exactly `floor(tpr * N)` latents start
    /// on the pruned side of the threshold and the rest inside the kept
    /// well, so the observed rate starts at the targeted rate and the
    /// double-well holds each side in its basin. Adjacency entries on the
    /// anatomical prior are kept preferentially.
    PhaseSplit { tpr: f64, beta: f64 },
}

/// The model: `K` adjacency latents (`n x n`), `K` convolution latents
/// (`s x C`), and one dense latent (`nC x classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub arch: GcnArchitecture,
    pub adjacency: Vec<Tensor>,
    pub conv: Vec<Tensor>,
    pub fc: Tensor,
}

impl GcnModel {
    /// Latent tensors in canonical order: adjacency heads, convolution
    /// heads, dense. Masks and optimizer state follow this order.
    pub fn latents(&self) -> Vec<&Tensor> {
        self.adjacency
            .iter()
            .chain(self.conv.iter())
            .chain(std::iter::once(&self.fc))
            .collect()
    }

    pub fn latents_mut(&mut self) -> Vec<&mut Tensor> {
        self.adjacency
            .iter_mut()
            .chain(self.conv.iter_mut())
            .chain(std::iter::once(&mut self.fc))
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        2 * self.arch.heads + 1
    }
}

/// Total latent entries; masks add none since they are a function of the
/// same latents.
pub fn param_count(model: &GcnModel) -> usize {
    model.latents().iter().map(|t| t.numel()).sum()
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Builds a model with Xavier-style latent initialization, deterministic in
/// the seed. When an adjacency prior is given (the anatomical skeleton
/// matrix), adjacency latents start at the prior plus Gaussian noise of
/// standard deviation 0.01.
pub fn build_model(
    arch: &GcnArchitecture,
    prior: Option<&Tensor>,
    seed: u64,
) -> Result<GcnModel, ModelError> {
    build_model_with_init(arch, prior, seed, InitScheme::Xavier)
}

/// [`build_model`] with an explicit initialization scheme.
pub fn build_model_with_init(
    arch: &GcnArchitecture,
    prior: Option<&Tensor>,
    seed: u64,
    init: InitScheme,
) -> Result<GcnModel, ModelError> {
    arch.validate()?;
    if let Some(p) = prior {
        if p.shape() != [arch.n_nodes, arch.n_nodes] {
            return Err(ModelError::BadPrior {
                got: p.shape().to_vec(),
                nodes: arch.n_nodes,
            });
        }
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        InitScheme::Xavier => Ok(xavier_init(arch, prior, &mut rng)),
        InitScheme::PhaseSplit { tpr, beta } => phase_split_init(arch, prior, &mut rng, tpr, beta),
    }
}

fn xavier_init(arch: &GcnArchitecture, prior: Option<&Tensor>, rng: &mut ChaCha8Rng) -> GcnModel {
    let n = arch.n_nodes;
    let uniform = |rng: &mut ChaCha8Rng, len: usize, bound: f64| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
    };

    let mut adjacency = Vec::with_capacity(arch.heads);
    for _ in 0..arch.heads {
        let data = match prior {
            Some(p) => p
                .data()
                .iter()
                .map(|&v| v + 0.01 * normal_sample(rng))
                .collect(),
            None => uniform(rng, n * n, xavier_bound(n, n)),
        };
        adjacency.push(Tensor::new(vec![n, n], data).expect("finite init"));
    }

    let conv_bound = xavier_bound(arch.in_channels, arch.conv_filters);
    let conv = (0..arch.heads)
        .map(|_| {
            let data = uniform(rng, arch.in_channels * arch.conv_filters, conv_bound);
            Tensor::new(vec![arch.in_channels, arch.conv_filters], data).expect("finite init")
        })
        .collect();

    let fc_rows = n * arch.conv_filters;
    let fc_bound = xavier_bound(fc_rows, arch.n_classes);
    let fc = Tensor::new(
        vec![fc_rows, arch.n_classes],
        uniform(rng, fc_rows * arch.n_classes, fc_bound),
    )
    .expect("finite init");

    GcnModel {
        arch: *arch,
        adjacency,
        conv,
        fc,
    }
}

fn phase_split_init(
    arch: &GcnArchitecture,
    prior: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
    tpr: f64,
    beta: f64,
) -> Result<GcnModel, ModelError> {
    let params = PhaseFieldParams::for_target_rate(tpr, beta)?;
    let z = params.threshold();
    // Kept-side latents start deep inside the kept well (mask 0.999, or
    // mid-well for extreme thresholds). A thin margin above z does not
    // survive the early optimizer transient: Adam's normalized steps let
    // the still-large classification gradients walk marginal entries
    // across the threshold before the data term settles.
    let keep_psi = 0.999f64.max((1.0 + z) / 2.0);
    let keep_mag = psi_inv(keep_psi);
    // Pruned-side cap: masks start at no more than z/2.
    let prune_cap = psi_inv(z / 2.0);

    let total = arch.param_count();
    let target_pruned = (tpr * total as f64).floor() as usize;
    let target_kept = total - target_pruned;

    // Start everything on the pruned side with (capped) Xavier bounds.
    let mut model = {
        let n = arch.n_nodes;
        let make = |rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64| -> Tensor {
            let bound = bound.min(prune_cap);
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::new(shape, data).expect("finite init")
        };
        let adjacency = (0..arch.heads)
            .map(|_| make(rng, vec![n, n], xavier_bound(n, n)))
            .collect();
        let conv = (0..arch.heads)
            .map(|_| {
                make(
                    rng,
                    vec![arch.in_channels, arch.conv_filters],
                    xavier_bound(arch.in_channels, arch.conv_filters),
                )
            })
            .collect();
        let fc_rows = n * arch.conv_filters;
        let fc = make(
            rng,
            vec![fc_rows, arch.n_classes],
            xavier_bound(fc_rows, arch.n_classes),
        );
        GcnModel {
            arch: *arch,
            adjacency,
            conv,
            fc,
        }
    };

    // Slot bookkeeping over the canonical latent order.
    let sizes: Vec<usize> = model.latents().iter().map(|t| t.numel()).collect();
    let mut prio: Vec<(usize, usize)> = Vec::new();
    let mut rest: Vec<(usize, usize)> = Vec::new();
    for (layer, &size) in sizes.iter().enumerate() {
        let is_adjacency = layer < arch.heads;
        for i in 0..size {
            let on_prior = is_adjacency
                && prior.map_or(false, |p| p.data()[i] != 0.0);
            if on_prior {
                prio.push((layer, i));
            } else {
                rest.push((layer, i));
            }
        }
    }
    shuffle(&mut prio, rng);
    shuffle(&mut rest, rng);
    let kept: Vec<(usize, usize)> = if target_kept <= prio.len() {
        prio[..target_kept].to_vec()
    } else {
        let mut k = prio;
        k.extend_from_slice(&rest[..target_kept - k.len()]);
        k
    };

    for &(layer, i) in &kept {
        // Upward-only jitter keeps every kept mask strictly above z.
        let jitter = rng.random_range(1.0..1.1);
        // Adjacency entries stay positive so aggregation starts attentive;
        // other layers take random signs.
        let sign = if layer < arch.heads {
            1.0
        } else if rng.random_range(0..2u32) == 0 {
            1.0
        } else {
            -1.0
        };
        let value = sign * keep_mag * jitter;
        let mut latents = model.latents_mut();
        latents[layer].data_mut()[i] = value;
    }
    Ok(model)
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    // Fisher-Yates, tied to our seeded generator.
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// One aggregation + convolution block on plain tensors:
/// `f(sum_k A_k U^T W_k)`. With one head this is the single-matrix form.
pub fn gcn_block_forward(
    u: &Tensor,
    adjacencies: &[Tensor],
    filters: &[Tensor],
    activation: Activation,
) -> Result<Tensor, ModelError> {
    if adjacencies.len() != filters.len() {
        return Err(ModelError::HeadCountMismatch {
            adjacencies: adjacencies.len(),
            filters: filters.len(),
        });
    }
    assert!(!adjacencies.is_empty(), "block needs at least one head");
    let ut = u.transpose2()?;
    let mut acc: Option<Tensor> = None;
    for (a, w) in adjacencies.iter().zip(filters) {
        let head = matmul_plain(&matmul_plain(a, &ut)?, w)?;
        acc = Some(match acc {
            Some(sum) => add_plain(&sum, &head)?,
            None => head,
        });
    }
    let acc = acc.expect("at least one head");
    let data = acc.data().iter().map(|&x| activation.apply(x)).collect();
    Ok(Tensor::new(acc.shape().to_vec(), data)?)
}

pub(crate) fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn add_plain(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn mul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Effective (reparametrized, optionally hard-masked) weights in canonical
/// latent order.
pub fn effective_weights(
    model: &GcnModel,
    masks: Option<&[Tensor]>,
) -> Result<Vec<Tensor>, ModelError> {
    let latents = model.latents();
    if let Some(masks) = masks {
        if masks.len() != latents.len() {
            return Err(ModelError::MaskCountMismatch {
                got: masks.len(),
                want: latents.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(latents.len());
    for (i, latent) in latents.iter().enumerate() {
        let eff = reparametrize(latent);
        out.push(match masks {
            Some(masks) => mul_plain(&eff, &masks[i])?,
            None => eff,
        });
    }
    Ok(out)
}

/// Pure inference pass over a `B x s x n` batch; returns `B x classes`
/// logits. With `masks` set, effective weights are hard-masked entry-wise.
pub fn forward(
    model: &GcnModel,
    batch: &Tensor,
    masks: Option<&[Tensor]>,
) -> Result<Tensor, ModelError> {
    let arch = &model.arch;
    if batch.shape().len() != 3
        || batch.shape()[1] != arch.in_channels
        || batch.shape()[2] != arch.n_nodes
    {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            left: batch.shape().to_vec(),
            right: vec![0, arch.in_channels, arch.n_nodes],
        }
        .into());
    }
    let eff = effective_weights(model, masks)?;
    let (adj_eff, rest) = eff.split_at(arch.heads);
    let (conv_eff, fc_eff) = rest.split_at(arch.heads);
    let fc_eff = &fc_eff[0];

    let batch_size = batch.shape()[0];
    let sample_len = arch.in_channels * arch.n_nodes;
    let mut logits = Vec::with_capacity(batch_size * arch.n_classes);
    for b in 0..batch_size {
        let u = Tensor::new(
            vec![arch.in_channels, arch.n_nodes],
            batch.data()[b * sample_len..(b + 1) * sample_len].to_vec(),
        )?;
        let block = gcn_block_forward(&u, adj_eff, conv_eff, arch.activation)?;
        let flat = Tensor::new(vec![1, block.numel()], block.data().to_vec())?;
        let row = matmul_plain(&flat, fc_eff)?;
        logits.extend_from_slice(row.data());
    }
    Ok(Tensor::new(vec![batch_size, arch.n_classes], logits)?)
}

/// Latents staged on a tape together with their soft masks and effective
/// weights, in canonical order.
pub struct StagedModel<'t> {
    pub latents: Vec<Var<'t>>,
    pub masks: Vec<Var<'t>>,
    pub effective: Vec<Var<'t>>,
}

/// Puts every latent on the tape (as a gradient target) and records the
/// gate and reparametrization for each.
pub fn stage<'t>(tape: &'t Tape, model: &GcnModel) -> Result<StagedModel<'t>, ModelError> {
    let mut latents = Vec::new();
    let mut masks = Vec::new();
    let mut effective = Vec::new();
    for tensor in model.latents() {
        let latent = tape.leaf(&tensor.clone().requiring_grad(true));
        let mask = psi_var(latent)?;
        let eff = latent.mul(mask)?;
        latents.push(latent);
        masks.push(mask);
        effective.push(eff);
    }
    Ok(StagedModel {
        latents,
        masks,
        effective,
    })
}

/// Differentiable forward pass over pre-transposed node signals
/// (`n x s` each); returns `B x classes` logits on the tape.
pub fn forward_staged<'t>(
    tape: &'t Tape,
    arch: &GcnArchitecture,
    staged: &StagedModel<'t>,
    node_signals: &[&Tensor],
) -> Result<Var<'t>, ModelError> {
    assert!(!node_signals.is_empty(), "forward needs at least one sample");
    let (adj_eff, rest) = staged.effective.split_at(arch.heads);
    let (conv_eff, fc_eff) = rest.split_at(arch.heads);
    let fc_eff = fc_eff[0];

    let mut rows = Vec::with_capacity(node_signals.len());
    for &ut in node_signals {
        if ut.shape() != [arch.n_nodes, arch.in_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "forward_staged",
                left: ut.shape().to_vec(),
                right: vec![arch.n_nodes, arch.in_channels],
            }
            .into());
        }
        let ut = tape.leaf(ut);
        let mut acc: Option<Var<'t>> = None;
        for (a, w) in adj_eff.iter().zip(conv_eff) {
            let head = a.matmul(ut)?.matmul(*w)?;
            acc = Some(match acc {
                Some(sum) => sum.add(head)?,
                None => head,
            });
        }
        let mut block = acc.expect("at least one head");
        if arch.activation == Activation::Relu {
            block = block.relu()?;
        }
        let flat = block.reshape(vec![1, arch.n_nodes * arch.conv_filters])?;
        rows.push(flat.matmul(fc_eff)?);
    }
    Ok(tape.stack_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chain_topology, skeleton_adjacency};
    use crate::gradcheck::grad_check_many;
    use crate::phasefield::psi;

    fn toy_arch() -> GcnArchitecture {
        GcnArchitecture {
            n_nodes: 4,
            in_channels: 6,
            heads: 1,
            conv_filters: 8,
            n_classes: 3,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn block_with_zero_filters_is_zero() {
        let u = Tensor::zeros(vec![2, 3]);
        let a = skeleton_adjacency(&[], 3).unwrap();
        let w = Tensor::zeros(vec![2, 4]);
        let out = gcn_block_forward(&u, &[a], &[w], Activation::Identity).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[3, 4]);
    }

    #[test]
    fn block_hand_example() {
        // A = [[0,1],[1,0]], U^T = I, W = [[1],[2]] -> [[2],[1]].
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let u = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(); // s = n = 2
        let w = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let out = gcn_block_forward(&u, &[a], &[w], Activation::Identity).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0]);
    }

    #[test]
    fn extra_zero_head_changes_nothing() {
        let u = Tensor::from_rows(&[vec![0.3, -1.0], vec![0.7, 0.2]]).unwrap();
        let a1 = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let w1 = Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.4]]).unwrap();
        let one = gcn_block_forward(&u, &[a1.clone()], &[w1.clone()], Activation::Relu).unwrap();
        let two = gcn_block_forward(
            &u,
            &[a1, Tensor::zeros(vec![2, 2])],
            &[w1, Tensor::zeros(vec![2, 2])],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn head_count_mismatch_is_rejected() {
        let u = Tensor::zeros(vec![2, 2]);
        let a = Tensor::zeros(vec![2, 2]);
        let err = gcn_block_forward(&u, &[a], &[], Activation::Relu).unwrap_err();
        assert!(matches!(err, ModelError::HeadCountMismatch { .. }));
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let arch = toy_arch();
        let a = build_model(&arch, None, 7).unwrap();
        let b = build_model(&arch, None, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&arch, None, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn toy_param_count() {
        let arch = toy_arch();
        assert_eq!(arch.param_count(), 16 + 48 + 96);
        let model = build_model(&arch, None, 0).unwrap();
        assert_eq!(param_count(&model), 160);
    }

    #[test]
    fn param_count_ignores_values() {
        let arch = toy_arch();
        let mut model = build_model(&arch, None, 0).unwrap();
        for latent in model.latents_mut() {
            for v in latent.data_mut() {
                *v = 42.0;
            }
        }
        assert_eq!(param_count(&model), 160);
    }

    #[test]
    fn prior_shapes_are_validated() {
        let arch = toy_arch();
        let bad = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            build_model(&arch, Some(&bad), 0).unwrap_err(),
            ModelError::BadPrior { .. }
        ));
    }

    #[test]
    fn zero_latents_give_zero_logits() {
        let arch = toy_arch();
        let mut model = build_model(&arch, None, 0).unwrap();
        for latent in model.latents_mut() {
            for v in latent.data_mut() {
                *v = 0.0;
            }
        }
        let batch = Tensor::zeros(vec![2, 6, 4]);
        let logits = forward(&model, &batch, None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_samples_give_identical_rows() {
        let arch = toy_arch();
        let model = build_model(&arch, None, 3).unwrap();
        let mut sample = Vec::new();
        for i in 0..24 {
            sample.push((i as f64 * 0.37).sin());
        }
        let mut batch = sample.clone();
        batch.extend_from_slice(&sample);
        let batch = Tensor::new(vec![2, 6, 4], batch).unwrap();
        let logits = forward(&model, &batch, None).unwrap();
        assert_eq!(logits.data()[..3], logits.data()[3..6]);
    }

    #[test]
    fn forward_is_pure() {
        let arch = toy_arch();
        let model = build_model(&arch, None, 3).unwrap();
        let batch = Tensor::new(vec![1, 6, 4], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = forward(&model, &batch, None).unwrap();
        let b = forward(&model, &batch, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_channel_count() {
        let arch = toy_arch();
        let model = build_model(&arch, None, 0).unwrap();
        let batch = Tensor::zeros(vec![1, 5, 4]);
        assert!(forward(&model, &batch, None).is_err());
    }

    #[test]
    fn staged_forward_matches_plain_forward() {
        let arch = toy_arch();
        let model = build_model(&arch, None, 5).unwrap();
        let batch = Tensor::new(
            vec![3, 6, 4],
            (0..72).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect(),
        )
        .unwrap();
        let plain = forward(&model, &batch, None).unwrap();

        let tape = Tape::new();
        let staged = stage(&tape, &model).unwrap();
        let signals: Vec<Tensor> = (0..3)
            .map(|b| {
                Tensor::new(vec![6, 4], batch.data()[b * 24..(b + 1) * 24].to_vec())
                    .unwrap()
                    .transpose2()
                    .unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = signals.iter().collect();
        let logits = forward_staged(&tape, &arch, &staged, &refs).unwrap();
        for (a, b) in plain.data().iter().zip(logits.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_differentiable_end_to_end() {
        // 5-node model, full loss gradient vs finite differences.
        let arch = GcnArchitecture {
            n_nodes: 5,
            in_channels: 6,
            heads: 2,
            conv_filters: 4,
            n_classes: 3,
            activation: Activation::Relu,
        };
        let model = build_model(&arch, None, 42).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let signals: Vec<Tensor> = (0..4)
            .map(|_| {
                let data = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![5, 6], data).unwrap()
            })
            .collect();
        let labels = vec![0, 1, 2, 1];

        let latents: Vec<Tensor> = model.latents().into_iter().cloned().collect();
        let err = grad_check_many(
            |tape, vars| {
                let masks: Vec<Var<'_>> = vars
                    .iter()
                    .map(|v| psi_var(*v))
                    .collect::<Result<_, _>>()?;
                let eff: Vec<Var<'_>> = vars
                    .iter()
                    .zip(&masks)
                    .map(|(v, m)| v.mul(*m))
                    .collect::<Result<_, _>>()?;
                let staged = StagedModel {
                    latents: vars.to_vec(),
                    masks,
                    effective: eff,
                };
                let refs: Vec<&Tensor> = signals.iter().collect();
                let logits = forward_staged(tape, &arch, &staged, &refs)
                    .map_err(|_| TensorError::NonFinite { op: "forward" })?;
                tape.softmax_cross_entropy(logits, &labels)
            },
            &latents,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn node_permutation_equivariance() {
        // Permuting U's node columns and conjugating A by the same
        // permutation permutes the block's output rows identically.
        let n = 5;
        let u = Tensor::new(vec![3, n], (0..15).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let a = Tensor::new(
            vec![n, n],
            (0..25).map(|i| ((i * 13) % 7) as f64 * 0.2).collect(),
        )
        .unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.3, 0.9, -0.2, 0.1]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];

        let base = gcn_block_forward(&u, &[a.clone()], &[w.clone()], Activation::Relu).unwrap();

        // u' has column pi(j) = original column j.
        let mut u2 = vec![0.0; 15];
        for r in 0..3 {
            for j in 0..n {
                u2[r * n + perm[j]] = u.data()[r * n + j];
            }
        }
        let mut a2 = vec![0.0; 25];
        for i in 0..n {
            for j in 0..n {
                a2[perm[i] * n + perm[j]] = a.data()[i * n + j];
            }
        }
        let permuted = gcn_block_forward(
            &Tensor::new(vec![3, n], u2).unwrap(),
            &[Tensor::new(vec![n, n], a2).unwrap()],
            &[w],
            Activation::Relu,
        )
        .unwrap();
        for i in 0..n {
            for c in 0..2 {
                assert!((base.at2(i, c) - permuted.at2(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_weights_never_exceed_latents() {
        let arch = toy_arch();
        let model = build_model(&arch, None, 1).unwrap();
        let eff = effective_weights(&model, None).unwrap();
        for (e, l) in eff.iter().zip(model.latents()) {
            for (&ev, &lv) in e.data().iter().zip(l.data()) {
                assert!(ev.abs() <= lv.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn phase_split_init_hits_target_rate_exactly() {
        let arch = GcnArchitecture {
            n_nodes: 15,
            in_channels: 24,
            heads: 1,
            conv_filters: 32,
            n_classes: 8,
            activation: Activation::Relu,
        };
        let prior = skeleton_adjacency(&chain_topology(15), 15).unwrap();
        for tpr in [0.5, 0.8, 0.95] {
            let model = build_model_with_init(
                &arch,
                Some(&prior),
                13,
                InitScheme::PhaseSplit { tpr, beta: 3.0 },
            )
            .unwrap();
            let params = PhaseFieldParams::for_target_rate(tpr, 3.0).unwrap();
            let z = params.threshold();
            let total = param_count(&model);
            let pruned: usize = model
                .latents()
                .iter()
                .map(|t| t.data().iter().filter(|&&w| psi(w) <= z).count())
                .sum();
            assert_eq!(pruned, (tpr * total as f64).floor() as usize, "tpr {tpr}");
        }
    }
}
