use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{is_reserved, ParameterStore};
use super::tensor::Tensor;
use crate::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

fn moment_names(name: &str) -> (String, String) {
    (format!("adamw.m.{name}"), format!("adamw.v.{name}"))
}

/// One AdamW update of every trainable tensor in `params`. `step` is the
/// 1-based step count used for bias correction. Moment buffers live in the
/// store under `adamw.m.<name>` / `adamw.v.<name>`.
pub fn adamw_step(params: &mut ParameterStore, grads: &Gradients, cfg: &AdamWConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("AdamW step count starts at 1"));
    }
    let trainable: Vec<String> = params.trainable_names().cloned().collect();
    let missing: Vec<String> = trainable.iter().filter(|n| grads.get(n).is_none()).cloned().collect();
    let unexpected: Vec<String> = grads
        .names()
        .filter(|n| is_reserved(n) || !params.contains(n))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::KeyMismatch { missing, unexpected });
    }

    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for name in &trainable {
        let grad = grads.get(name).expect("checked above");
        let shape = params.get(name).expect("trainable").shape().to_vec();
        if grad.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: shape,
                rhs: grad.shape().to_vec(),
            });
        }
        let (m_name, v_name) = moment_names(name);
        let mut m = params.get(&m_name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let mut v = params.get(&v_name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let p = params.get_mut(name).expect("trainable");
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(grad.data())
        {
            *pi -= cfg.lr * cfg.weight_decay * *pi;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.ensure_finite("adamw")?;
        params.insert(m_name, m);
        params.insert(v_name, v);
    }
    params.set_version(params.version() + 1);
    Ok(())
}
