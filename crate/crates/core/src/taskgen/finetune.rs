use rand::seq::SliceRandom;

use super::mlp::{mlp_forward_backward, ToyModel};
use super::LabeledSet;
use crate::adapt::{lr_schedule, AdamWConfig, OptimState, ParamGroup};
use crate::error::{BoltError, Result};
use crate::rng::rng_from;

/// Full fine-tuning hyperparameters; every weight and bias is trained.
pub type FinetuneConfig = AdamWConfig;

/// Train every parameter of `theta_init` on `data` with AdamW and the
/// warmup-cosine schedule.
pub fn finetune_full(theta_init: &ToyModel, data: &LabeledSet, config: &FinetuneConfig, seed: u64) -> Result<ToyModel> {
    if data.is_empty() {
        return Err(BoltError::validation("fine-tuning data is empty"));
    }
    if config.batch_size == 0 {
        return Err(BoltError::validation("batch size must be positive"));
    }
    let mut model = theta_init.clone();
    let n_params = model.tensors_mut().iter().map(|(_, t)| t.len()).sum();
    let mut state = OptimState::new(config.clone(), n_params);
    let (total, warmup) = config.step_plan(data.len());
    let mut rng = rng_from(seed, "finetune-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let (_, grads) = mlp_forward_backward(&model, &batch.features, &batch.labels)?;
            let lr = lr_schedule(step, total, warmup, config.lr_max)?;
            let grad_slices = grads.tensors();
            let mut groups: Vec<ParamGroup<'_>> = model
                .tensors_mut()
                .into_iter()
                .zip(grad_slices.iter())
                .map(|((name, params), (_, g))| ParamGroup { name, params, grads: g })
                .collect();
            state.adamw_step(&mut groups, lr)?;
            step += 1;
        }
    }
    Ok(model)
}
