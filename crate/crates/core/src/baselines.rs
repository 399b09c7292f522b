//! Reference forecasters: constant pose, constant velocity and a direct
//! regression model sharing the diffusion model's encoder design.

use nalgebra::{Rotation3, UnitQuaternion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StateWindow;
use crate::encoder::{linear, Encoder, EncoderConfig};
use crate::kinematics::{project_to_so3, Se3Pose, VisuomotorState};
use crate::numerics::{Gradients, Graph, ParameterStore, Tensor, Var};
use crate::target::{TargetNormalizer, FEATURE_DIM};
use crate::training::{fit, TrainConfig};
use crate::{Error, Result};

/// Repeats the last observed state `horizon` times.
pub fn constant_pose(observed: &[VisuomotorState], horizon: usize) -> Result<Vec<VisuomotorState>> {
    let last = observed
        .last()
        .ok_or_else(|| Error::invalid("constant pose needs at least one observed state"))?;
    Ok(vec![*last; horizon])
}

/// Extrapolates the last observed transition: positions linearly, the head
/// rotation by repeating the last relative rotation.
pub fn constant_velocity(observed: &[VisuomotorState], horizon: usize) -> Result<Vec<VisuomotorState>> {
    if observed.len() < 2 {
        return Err(Error::invalid(format!(
            "constant velocity needs at least two observed states, got {}",
            observed.len()
        )));
    }
    let prev = &observed[observed.len() - 2];
    let last = &observed[observed.len() - 1];
    let (r_prev, r_last) = (prev.head.rotation(), last.head.rotation());
    // Quaternion powers stay finite for near-identity steps, where the
    // matrix axis extraction does not.
    let relative = (r_prev != r_last).then(|| {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(project_to_so3(&(r_last * r_prev.transpose()))))
    });
    let step = |a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>, k: f64| b + k * (b - a);
    Ok((1..=horizon)
        .map(|k| {
            let kf = k as f64;
            let rotation = match &relative {
                Some(rel) => project_to_so3(&(rel.powf(kf).to_rotation_matrix().into_inner() * r_last)),
                None => r_last,
            };
            VisuomotorState {
                head: Se3Pose::from_parts_unchecked(step(&prev.head.position(), &last.head.position(), kf), rotation),
                gaze: step(&prev.gaze, &last.gaze, kf),
                joints: std::array::from_fn(|j| step(&prev.joints[j], &last.joints[j], kf)),
            }
        })
        .collect())
}

/// Parameter-name prefix of the regression baseline.
pub const REGRESSION_PREFIX: &str = "regression";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub horizon: usize,
    pub encoder: EncoderConfig,
    /// Hidden widths of the feed-forward head.
    pub hidden: Vec<usize>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            encoder: EncoderConfig::default(),
            hidden: vec![256],
        }
    }
}

/// Encoder followed by a feed-forward head mapping `c` straight to the
/// normalized future.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    cfg: RegressionConfig,
    encoder: Encoder,
}

impl RegressionModel {
    pub fn new(cfg: RegressionConfig) -> Result<Self> {
        if cfg.horizon == 0 || cfg.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!(
                "regression needs a positive horizon and widths, got {} and {:?}",
                cfg.horizon, cfg.hidden
            )));
        }
        let encoder = Encoder::new(cfg.encoder.clone(), &format!("{REGRESSION_PREFIX}.encoder"))?;
        Ok(Self { cfg, encoder })
    }

    pub fn config(&self) -> &RegressionConfig {
        &self.cfg
    }

    pub fn data_dim(&self) -> usize {
        self.cfg.horizon * FEATURE_DIM
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.encoder.output_dim()];
        w.extend(&self.cfg.hidden);
        w.push(self.data_dim());
        w
    }

    fn layer(i: usize) -> String {
        format!("{REGRESSION_PREFIX}.head.layer{i}")
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.encoder.init(store, rng);
        for (i, pair) in self.widths().windows(2).enumerate() {
            store.init_linear(&Self::layer(i), pair[0], pair[1], rng);
        }
    }

    fn predict_graph(&self, g: &mut Graph, store: &ParameterStore, windows: &[&StateWindow]) -> Result<Var> {
        let mut h = self.encoder.forward_windows(g, store, windows)?;
        let n = self.widths().len() - 1;
        for i in 0..n {
            h = linear(g, store, h, &Self::layer(i))?;
            if i + 1 < n {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    /// Mean squared error against normalized targets `[B, horizon·30]`.
    pub fn loss_graph(&self, store: &ParameterStore, windows: &[&StateWindow], targets: &Tensor) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let pred = self.predict_graph(&mut g, store, windows)?;
        let t = g.constant(targets.clone());
        let loss = g.mse(pred, t)?;
        Ok((g, loss))
    }

    pub fn loss(&self, store: &ParameterStore, windows: &[&StateWindow], targets: &Tensor) -> Result<(f64, Gradients)> {
        let (g, l) = self.loss_graph(store, windows, targets)?;
        Ok((g.value(l).data()[0], g.backward(l)?))
    }

    /// Normalized predictions `[B, horizon·30]`.
    pub fn predict(&self, store: &ParameterStore, windows: &[&StateWindow]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.predict_graph(&mut g, store, windows)?;
        Ok(g.value(out).clone())
    }

    pub fn forecast(
        &self,
        store: &ParameterStore,
        normalizer: &TargetNormalizer,
        windows: &[&StateWindow],
    ) -> Result<Vec<Vec<VisuomotorState>>> {
        if normalizer.horizon() != self.cfg.horizon {
            return Err(Error::invalid(format!(
                "normalizer horizon {} does not match model horizon {}",
                normalizer.horizon(),
                self.cfg.horizon
            )));
        }
        let pred = self.predict(store, windows)?;
        pred.data()
            .chunks(self.data_dim())
            .zip(windows)
            .map(|(row, w)| normalizer.decode(row, w.anchor()))
            .collect()
    }

    pub fn train(
        &self,
        store: &mut ParameterStore,
        windows: &[StateWindow],
        normalizer: &TargetNormalizer,
        cfg: &TrainConfig,
        epoch_offset: usize,
    ) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Err(Error::invalid("cannot train on zero windows"));
        }
        let targets: Vec<Vec<f64>> = windows.iter().map(|w| normalizer.encode(w)).collect::<Result<_>>()?;
        let width = self.data_dim();
        fit(store, windows.len(), cfg, epoch_offset, |s, idx, _: &mut ChaCha8Rng| {
            let batch: Vec<&StateWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let t = Tensor::new(
                vec![idx.len(), width],
                idx.iter().flat_map(|&i| targets[i].iter().copied()).collect(),
            )?;
            self.loss(s, &batch, &t)
        })
    }
}
