//! Minibatch AdamW loop shared by the diffusion model and the regression
//! baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{adamw_step, AdamWConfig, Gradients, ParameterStore, Tensor};
use crate::{Error, Result};

/// Optimizer step counter persisted with the parameters so that a resumed
/// run continues the bias correction where it stopped.
pub const STEP_BUFFER: &str = "buffer.optimizer_step";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "optimizer needs lr > 0 and weight_decay >= 0, got {} and {}",
                o.lr, o.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::invalid("optimizer betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

pub fn optimizer_step(store: &ParameterStore) -> u64 {
    store
        .get(STEP_BUFFER)
        .and_then(|t| t.item())
        .map_or(0, |v| v as u64)
}

/// Runs `cfg.epochs` epochs over `n_items` examples. `batch_loss` receives the
/// indices of one minibatch and a generator for any sampling it needs, and
/// returns the batch's mean loss with its gradients. Epoch `e` shuffles with
/// stream `epoch_offset + e` of the seeded generator, so a run split across
/// resumes visits the same batches as an uninterrupted one.
pub fn fit<F>(
    store: &mut ParameterStore,
    n_items: usize,
    cfg: &TrainConfig,
    epoch_offset: usize,
    mut batch_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParameterStore, &[usize], &mut ChaCha8Rng) -> Result<(f64, Gradients)>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut step = optimizer_step(store);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((epoch_offset + epoch) as u64);
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_loss(store, batch, &mut rng)?;
            let grads = grads.complete_for(store);
            step += 1;
            adamw_step(store, &grads, &cfg.optimizer, step)?;
            total += loss * batch.len() as f64;
        }
        curve.push(total / n_items as f64);
    }
    store.insert(STEP_BUFFER, Tensor::scalar(step as f64));
    Ok(curve)
}
