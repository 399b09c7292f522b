use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::encoder::linear;
use crate::numerics::{sinusoidal_embedding, Graph, ParameterStore, Tensor, Var};
use crate::{Error, Result};

/// What the MLP's raw output `F` stands for. The denoiser always returns a
/// noise estimate:
/// - `Epsilon`: `F` itself.
/// - `Sample`: `F` guesses the clean data, `(x_k - sqrt(abar)·F) / sqrt(1 - abar)`.
/// - `Velocity`: `F` guesses `sqrt(abar)·eps - sqrt(1 - abar)·x0`, giving
///   `sqrt(1 - abar)·x_k + sqrt(abar)·F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    Sample,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub prediction: Prediction,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            time_dim: 32,
            prediction: Prediction::Velocity,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!("hidden widths must be positive, got {:?}", self.hidden)));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Noise predictor: an MLP on `x_k ‖ embed(k) ‖ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    data_dim: usize,
    cond_dim: usize,
    prefix: String,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, data_dim: usize, cond_dim: usize, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            data_dim,
            cond_dim,
            prefix: prefix.to_string(),
        })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data_dim + self.cfg.time_dim + self.cond_dim];
        w.extend(&self.cfg.hidden);
        w.push(self.data_dim);
        w
    }

    fn layer(&self, i: usize) -> String {
        format!("{}.layer{i}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        for (i, pair) in self.widths().windows(2).enumerate() {
            store.init_linear(&self.layer(i), pair[0], pair[1], rng);
        }
    }

    /// `[B, data_dim]` noisy input, one diffusion step per row, `[B, cond_dim]`
    /// condition; returns the predicted noise `[B, data_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        schedule: &NoiseSchedule,
        x: Var,
        steps: &[usize],
        c: Var,
    ) -> Result<Var> {
        let batch = steps.len();
        let mut emb = Vec::with_capacity(batch * self.cfg.time_dim);
        for &k in steps {
            emb.extend(sinusoidal_embedding(k as f64, self.cfg.time_dim));
        }
        let t = g.constant(Tensor::new(vec![batch, self.cfg.time_dim], emb)?);
        let mut h = g.concat(&[x, t, c])?;
        let n = self.widths().len() - 1;
        for i in 0..n {
            h = linear(g, store, h, &self.layer(i))?;
            if i + 1 < n {
                h = g.gelu(h)?;
            }
        }
        if self.cfg.prediction == Prediction::Epsilon {
            return Ok(h);
        }
        let mut on_x = Vec::with_capacity(batch * self.data_dim);
        let mut on_f = Vec::with_capacity(batch * self.data_dim);
        for &k in steps {
            schedule.check_step(k)?;
            let ab = schedule.alpha_bar()[k];
            let (cx, cf) = match self.cfg.prediction {
                Prediction::Sample => (1.0 / (1.0 - ab).sqrt(), -(ab / (1.0 - ab)).sqrt()),
                _ => ((1.0 - ab).sqrt(), ab.sqrt()),
            };
            on_x.extend(std::iter::repeat_n(cx, self.data_dim));
            on_f.extend(std::iter::repeat_n(cf, self.data_dim));
        }
        let on_x = g.constant(Tensor::new(vec![batch, self.data_dim], on_x)?);
        let on_f = g.constant(Tensor::new(vec![batch, self.data_dim], on_f)?);
        let a = g.mul(x, on_x)?;
        let b = g.mul(h, on_f)?;
        g.add(a, b)
    }
}
