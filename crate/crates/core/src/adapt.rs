//! Supervised adaptation of the diagonal coefficients only.
//!
//! With `W_ℓ(s) = W_ℓ⁰ + U_ℓ diag(s_ℓ) V_ℓᵀ`, the chain rule gives
//! `∂L/∂s_ℓj = u_jᵀ G_ℓ v_j` where `G_ℓ = ∂L/∂W_ℓ`, so one ordinary backward
//! pass through the network followed by a contraction against the fixed
//! bases yields the coefficient gradient.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::coefficients::{sigma_param_count, SigmaOrigin, SigmaSet};
use crate::error::{BoltError, Result};
use crate::rng::rng_from;
use crate::spectral::{BasisSet, SpectralBasis};
use crate::taskgen::mlp::{self, ModelGrads, ToyModel, W1, W2};
use crate::taskgen::LabeledSet;
use crate::tensor_store::TensorContainer;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 32,
        }
    }
}

impl AdamWConfig {
    /// `(total_steps, warmup_steps)` for a dataset of `n` examples.
    ///
    /// Warmup is clamped below the total so the schedule stays well defined
    /// for runs shorter than the warmup.
    pub fn step_plan(&self, n: usize) -> (usize, usize) {
        let per_epoch = n.div_ceil(self.batch_size.max(1));
        let total = self.epochs * per_epoch;
        let warmup = (self.warmup_epochs * per_epoch).min(total.saturating_sub(1));
        (total, warmup)
    }
}

/// One named slice of parameters with its gradient.
pub struct ParamGroup<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, param_count: usize) -> Self {
        OptimState {
            config,
            step: 0,
            m1: vec![0.0; param_count],
            m2: vec![0.0; param_count],
        }
    }

    /// Adam with bias correction and decoupled weight decay.
    ///
    /// Groups are laid out back to back in the moment vectors, in the order
    /// given. Nothing is modified if any gradient is non-finite.
    pub fn adamw_step(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) -> Result<()> {
        let total: usize = groups.iter().map(|g| g.params.len()).sum();
        if total != self.m1.len() {
            return Err(BoltError::dimension(format!(
                "optimizer tracks {} parameters, got {total}",
                self.m1.len()
            )));
        }
        for g in groups.iter() {
            if g.grads.len() != g.params.len() {
                return Err(BoltError::dimension(format!(
                    "group {:?}: {} gradients for {} parameters",
                    g.name,
                    g.grads.len(),
                    g.params.len()
                )));
            }
            if g.grads.iter().any(|x| !x.is_finite()) {
                return Err(BoltError::numeric(format!("non-finite gradient in layer {:?}", g.name)));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut k = 0;
        for g in groups.iter_mut() {
            for (p, &grad) in g.params.iter_mut().zip(g.grads) {
                let m = c.beta1 * self.m1[k] + (1.0 - c.beta1) * grad;
                let v = c.beta2 * self.m2[k] + (1.0 - c.beta2) * grad * grad;
                self.m1[k] = m;
                self.m2[k] = v;
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then half-cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> Result<f64> {
    if step > total_steps || warmup_steps >= total_steps {
        return Err(BoltError::validation(format!(
            "invalid schedule position: step {step}, total {total_steps}, warmup {warmup_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_max * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `diag(U_orthᵀ G V_orth)`.
pub fn sigma_gradient(weight_grad: &DMatrix<f64>, basis: &SpectralBasis) -> Result<Vec<f64>> {
    if weight_grad.shape() != basis.layer_shape() {
        return Err(BoltError::dimension(format!(
            "layer {:?}: gradient is {}x{}, basis acts on {}x{}",
            basis.layer_name,
            weight_grad.nrows(),
            weight_grad.ncols(),
            basis.layer_shape().0,
            basis.layer_shape().1
        )));
    }
    let gv = weight_grad * &basis.v_orth;
    Ok((0..basis.r).map(|j| basis.u_orth.column(j).dot(&gv.column(j))).collect())
}

fn layer_weight_mut<'a>(model: &'a mut ToyModel, layer: &str) -> Result<&'a mut DMatrix<f64>> {
    match layer {
        W1 => Ok(&mut model.w1),
        W2 => Ok(&mut model.w2),
        other => Err(BoltError::validation(format!("model has no matrix layer {other:?}"))),
    }
}

/// `Θ_0` with every basis layer shifted by `U diag(s) Vᵀ`.
pub fn model_with_sigmas(base: &ToyModel, bases: &BasisSet, sigmas: &SigmaSet) -> Result<ToyModel> {
    let mut model = base.clone();
    for (layer, basis) in bases {
        let sigma = sigmas
            .get(layer)
            .ok_or_else(|| BoltError::validation(format!("no coefficients for layer {layer:?}")))?;
        let delta = crate::coefficients::reconstruct_update(basis, sigma)?;
        let w = layer_weight_mut(&mut model, layer)?;
        if w.shape() != delta.shape() {
            return Err(BoltError::dimension(format!("layer {layer:?} does not match its basis")));
        }
        *w += delta;
    }
    Ok(model)
}

pub(crate) fn contract_grads(grads: &ModelGrads, bases: &BasisSet) -> Result<LayerGrads> {
    bases
        .iter()
        .map(|(layer, basis)| {
            let g = grads
                .weight(layer)
                .ok_or_else(|| BoltError::validation(format!("model has no matrix layer {layer:?}")))?;
            Ok((layer.clone(), sigma_gradient(g, basis)?))
        })
        .collect()
}

/// Per-layer coefficient gradients, in basis order.
pub type LayerGrads = Vec<(String, Vec<f64>)>;

/// Cross-entropy of the composed model and its gradient in every coefficient.
pub fn sigma_loss_and_grad(
    base: &ToyModel,
    bases: &BasisSet,
    sigmas: &SigmaSet,
    batch: &LabeledSet,
) -> Result<(f64, LayerGrads)> {
    let model = model_with_sigmas(base, bases, sigmas)?;
    let (loss, grads) = mlp::mlp_forward_backward(&model, &batch.features, &batch.labels)?;
    Ok((loss, contract_grads(&grads, bases)?))
}

pub(crate) fn apply_sigma_step(
    state: &mut OptimState,
    sigmas: &mut SigmaSet,
    grads: &[(String, Vec<f64>)],
    lr: f64,
) -> Result<()> {
    let mut groups: Vec<ParamGroup<'_>> = sigmas
        .iter_mut()
        .zip(grads)
        .map(|((name, s), (gname, g))| {
            debug_assert_eq!(name, gname);
            ParamGroup {
                name: name.as_str(),
                params: s.s.as_mut_slice(),
                grads: g.as_slice(),
            }
        })
        .collect();
    state.adamw_step(&mut groups, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_accuracy: f64,
    pub sigma_param_count: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per epoch followed by a summary object.
    pub fn to_json_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct"))
            .collect();
        lines.push(
            serde_json::json!({
                "summary": true,
                "final_accuracy": self.final_accuracy,
                "sigma_param_count": self.sigma_param_count,
                "wall_time": self.wall_time_secs,
            })
            .to_string(),
        );
        lines
    }
}

/// Minibatch cross-entropy descent on the coefficients, everything else frozen.
pub fn train_sigma(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    sigma_init: &SigmaSet,
    dataset: &LabeledSet,
    config: &AdamWConfig,
    seed: u64,
) -> Result<(SigmaSet, TrainReport)> {
    if dataset.is_empty() {
        return Err(BoltError::validation("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(BoltError::validation("batch size must be positive"));
    }
    for (layer, b) in bases {
        match sigma_init.get(layer) {
            Some(s) if s.s.len() == b.r => {}
            _ => {
                return Err(BoltError::validation(format!(
                    "initial coefficients do not match the basis of layer {layer:?}"
                )))
            }
        }
    }
    let started = Instant::now();
    let base = ToyModel::from_container(theta_0)?;
    let mut sigmas: SigmaSet = sigma_init
        .iter()
        .filter(|(name, _)| bases.contains_key(*name))
        .map(|(n, s)| (n.clone(), s.clone()))
        .collect();
    let mut state = OptimState::new(config.clone(), sigma_param_count(&sigmas));
    let (total, warmup) = config.step_plan(dataset.len());
    let mut rng = rng_from(seed, "train-sigma-shuffle");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.subset(chunk);
            let (loss, grads) = sigma_loss_and_grad(&base, bases, &sigmas, &batch)?;
            lr = lr_schedule(step, total, warmup, config.lr_max)?;
            apply_sigma_step(&mut state, &mut sigmas, &grads, lr)?;
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
        });
    }

    if config.epochs > 0 {
        for s in sigmas.values_mut() {
            s.origin = SigmaOrigin::Trained;
        }
    }
    let final_model = model_with_sigmas(&base, bases, &sigmas)?;
    let report = TrainReport {
        epochs,
        final_accuracy: accuracy(&final_model, dataset)?,
        sigma_param_count: sigma_param_count(&sigmas),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((sigmas, report))
}

pub fn accuracy(model: &ToyModel, dataset: &LabeledSet) -> Result<f64> {
    if dataset.is_empty() {
        return Err(BoltError::validation("evaluation set is empty"));
    }
    let predictions = mlp::predict(&mlp::logits(model, &dataset.features)?);
    let correct = predictions
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of argmax-correct predictions; logit ties go to the lower class.
pub fn evaluate(theta: &TensorContainer, dataset: &LabeledSet) -> Result<f64> {
    accuracy(&ToyModel::from_container(theta)?, dataset)
}
