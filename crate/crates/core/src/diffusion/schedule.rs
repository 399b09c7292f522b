use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {k} out of range 0..{}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_k)·x0 + sqrt(1 - ᾱ_k)·eps`
pub fn forward_sample(x0: &[f64], k: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape {
            op: "forward_sample",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    Ok(forward_sample_with(x0, schedule.alpha_bar[k], eps))
}

pub(crate) fn forward_sample_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
