//! Conditional DDPM over flattened future trajectories.
//!
//! The clean sample `x0` is the normalized `horizon × 30` future (see
//! [`crate::target::TargetNormalizer`]). The conditioning feature comes from
//! the [`crate::encoder`] and is trained jointly with the noise predictor.

mod denoiser;
mod schedule;

pub use denoiser::{Denoiser, DenoiserConfig, Prediction};
pub use schedule::{build_schedule, forward_sample, NoiseSchedule, ScheduleConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::StateWindow;
use crate::encoder::{Encoder, EncoderConfig};
use crate::kinematics::VisuomotorState;
use crate::numerics::{Gradients, Graph, ParameterStore, Tensor, Var};
use crate::target::{TargetNormalizer, FEATURE_DIM};
use crate::training::{fit, TrainConfig};
use crate::{Error, Result};

/// Parameter-name prefix of the diffusion model.
pub const PREFIX: &str = "diffusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Forecast horizon Δ in steps.
    pub horizon: usize,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// `(k, eps)` pairs drawn per window in each training batch.
    pub noise_draws: usize,
    /// Diffuse in this many leading whitened principal axes of the targets
    /// instead of the full `horizon × 30` vector.
    pub principal_axes: Option<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            noise_draws: 1,
            principal_axes: Some(32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    cfg: DiffusionConfig,
    encoder: Encoder,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
}

fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl DiffusionModel {
    pub fn new(cfg: DiffusionConfig) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        if cfg.noise_draws == 0 {
            return Err(Error::invalid("noise_draws must be positive"));
        }
        if let Some(r) = cfg.principal_axes {
            if r == 0 || r > cfg.horizon * FEATURE_DIM {
                return Err(Error::invalid(format!(
                    "principal_axes must lie in 1..={}, got {r}",
                    cfg.horizon * FEATURE_DIM
                )));
            }
        }
        let encoder = Encoder::new(cfg.encoder.clone(), &format!("{PREFIX}.encoder"))?;
        let denoiser = Denoiser::new(
            cfg.denoiser.clone(),
            cfg.principal_axes.unwrap_or(cfg.horizon * FEATURE_DIM),
            encoder.output_dim(),
            &format!("{PREFIX}.denoiser"),
        )?;
        let schedule = cfg.schedule.build()?;
        Ok(Self {
            cfg,
            encoder,
            denoiser,
            schedule,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn data_dim(&self) -> usize {
        self.cfg.principal_axes.unwrap_or(self.cfg.horizon * FEATURE_DIM)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.encoder.init(store, rng);
        self.denoiser.init(store, rng);
    }

    /// Graph of the batch loss `mean((eps - eps_theta(x_k, k, c))^2)` for
    /// given steps and noise, with `c` computed from `windows`. `x0`, `steps`
    /// and `eps` may hold several consecutive rows per window.
    pub fn loss_graph(
        &self,
        store: &ParameterStore,
        windows: &[&StateWindow],
        x0: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(Graph, Var)> {
        let width = self.data_dim();
        let rows = steps.len();
        let batch = windows.len();
        if batch == 0 || rows % batch != 0 || x0.shape() != [rows, width] || eps.shape() != x0.shape() {
            return Err(Error::Shape {
                op: "denoising loss",
                lhs: x0.shape().to_vec(),
                rhs: vec![rows, width],
            });
        }
        let mut noisy = Vec::with_capacity(rows * width);
        for (i, &k) in steps.iter().enumerate() {
            let r = i * width..(i + 1) * width;
            noisy.extend(forward_sample(&x0.data()[r.clone()], k, &eps.data()[r], &self.schedule)?);
        }
        let mut g = Graph::new();
        let mut c = self.encoder.forward_windows(&mut g, store, windows)?;
        let draws = rows / batch;
        if draws > 1 {
            let cond = g.value(c).shape()[1];
            let wide = g.concat(&vec![c; draws])?;
            c = g.reshape(wide, &[rows, cond])?;
        }
        let xk = g.constant(Tensor::new(vec![rows, width], noisy)?);
        let pred = self.denoiser.forward(&mut g, store, &self.schedule, xk, steps, c)?;
        let target = g.constant(eps.clone());
        let loss = g.mse(pred, target)?;
        Ok((g, loss))
    }

    /// Draws `noise_draws` pairs of a step `k ~ U[0, T)` and standard normal
    /// noise per window and returns the loss with its gradients.
    pub fn denoising_loss(
        &self,
        store: &ParameterStore,
        windows: &[&StateWindow],
        x0: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<(f64, Gradients)> {
        let draws = self.cfg.noise_draws;
        let width = self.data_dim();
        let steps: Vec<usize> = (0..windows.len() * draws)
            .map(|_| rng.random_range(0..self.schedule.steps()))
            .collect();
        let x0 = if draws > 1 {
            let data = x0.data().chunks(width).flat_map(|row| row.iter().cycle().take(draws * width).copied()).collect();
            Tensor::new(vec![steps.len(), width], data)?
        } else {
            x0.clone()
        };
        let eps = Tensor::new(x0.shape().to_vec(), gaussian(x0.len(), rng))?;
        let (g, loss) = self.loss_graph(store, windows, &x0, &steps, &eps)?;
        Ok((g.value(loss).data()[0], g.backward(loss)?))
    }

    /// Conditioning features `[B, τ·d]`.
    pub fn condition(&self, store: &ParameterStore, windows: &[&StateWindow]) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = self.encoder.forward_windows(&mut g, store, windows)?;
        Ok(g.value(c).clone())
    }

    pub fn predict_noise(&self, store: &ParameterStore, xk: &Tensor, k: usize, c: &Tensor) -> Result<Tensor> {
        self.schedule.check_step(k)?;
        let batch = c.shape()[0];
        let mut g = Graph::new();
        let x = g.constant(xk.clone());
        let cv = g.constant(c.clone());
        let out = self.denoiser.forward(&mut g, store, &self.schedule, x, &vec![k; batch], cv)?;
        Ok(g.value(out).clone())
    }

    /// One ancestral step: the posterior mean, plus `sqrt(beta_k)·z` when
    /// `k > 0`.
    pub fn reverse_step(
        &self,
        store: &ParameterStore,
        xk: &Tensor,
        k: usize,
        c: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let eps = self.predict_noise(store, xk, k, c)?;
        let s = &self.schedule;
        let coef = s.beta()[k] / (1.0 - s.alpha_bar()[k]).sqrt();
        let inv = 1.0 / s.alpha()[k].sqrt();
        let sigma = s.beta()[k].sqrt();
        let data: Vec<f64> = xk
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| {
                let mu = inv * (x - coef * e);
                if k > 0 {
                    let z: f64 = rng.sample(StandardNormal);
                    mu + sigma * z
                } else {
                    mu
                }
            })
            .collect();
        let out = Tensor::new(xk.shape().to_vec(), data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("reverse diffusion step {k}")));
        }
        Ok(out)
    }

    /// Runs the reverse chain from `N(0, I)` for every row of `c`, returning
    /// normalized samples `[B, horizon·30]`.
    pub fn sample(&self, store: &ParameterStore, c: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let batch = c.shape()[0];
        let mut x = Tensor::new(vec![batch, self.data_dim()], gaussian(batch * self.data_dim(), rng))?;
        for k in (0..self.schedule.steps()).rev() {
            x = self.reverse_step(store, &x, k, c, rng).map_err(|e| match e {
                Error::NonFinite(m) if !m.starts_with("reverse") => {
                    Error::NonFinite(format!("reverse diffusion step {k}: {m}"))
                }
                other => other,
            })?;
        }
        Ok(x)
    }

    /// Samples one future per window and decodes it to states in the
    /// window's canonical frame.
    pub fn forecast(
        &self,
        store: &ParameterStore,
        normalizer: &TargetNormalizer,
        windows: &[&StateWindow],
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<VisuomotorState>>> {
        if normalizer.horizon() != self.cfg.horizon || normalizer.width() != self.data_dim() {
            return Err(Error::invalid(format!(
                "normalizer ({} steps, width {}) does not match model ({} steps, width {})",
                normalizer.horizon(),
                normalizer.width(),
                self.cfg.horizon,
                self.data_dim()
            )));
        }
        let c = self.condition(store, windows)?;
        let x = self.sample(store, &c, rng)?;
        x.data()
            .chunks(self.data_dim())
            .zip(windows)
            .map(|(row, w)| normalizer.decode(row, w.anchor()))
            .collect()
    }

    /// Trains encoder and denoiser jointly; returns the per-epoch mean loss.
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
        fit(store, windows.len(), cfg, epoch_offset, |s, idx, rng: &mut ChaCha8Rng| {
            let batch: Vec<&StateWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let x0 = Tensor::new(
                vec![idx.len(), width],
                idx.iter().flat_map(|&i| targets[i].iter().copied()).collect(),
            )?;
            self.denoising_loss(s, &batch, &x0, rng)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, slice_windows, SyntheticConfig, WindowConfig};
    use crate::numerics::gradcheck::{check_coordinates, sample_coordinates};
    use crate::numerics::AdamWConfig;
    use rand::SeedableRng;

    fn small_cfg() -> DiffusionConfig {
        DiffusionConfig {
            encoder: EncoderConfig {
                latent_dim: 16,
                n_heads: 2,
                ..Default::default()
            },
            denoiser: DenoiserConfig {
                hidden: vec![32, 32],
                time_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Diffuses the full standardized vector, for tests that use an
    /// identity normalizer.
    fn full_cfg() -> DiffusionConfig {
        DiffusionConfig {
            principal_axes: None,
            ..small_cfg()
        }
    }

    /// With an identity normalizer and a (near) constant target, velocity and
    /// noise outputs must scale `x_k` by `1/sqrt(1 - abar)` at small `k`; a
    /// clean-sample output only has to reproduce the target.
    fn memorizing_cfg() -> DiffusionConfig {
        let mut cfg = full_cfg();
        cfg.denoiser.prediction = Prediction::Sample;
        cfg
    }

    fn normalizer(model: &DiffusionModel, ws: &[StateWindow]) -> TargetNormalizer {
        TargetNormalizer::fit_with(ws, model.config().principal_axes).unwrap()
    }

    /// Zero weights give a zero noise estimate only when the MLP predicts
    /// the noise directly.
    fn epsilon_cfg() -> DiffusionConfig {
        let mut cfg = small_cfg();
        cfg.denoiser.prediction = Prediction::Epsilon;
        cfg
    }

    fn windows(n: usize, seed: u64) -> Vec<StateWindow> {
        let records = generate_synthetic(&SyntheticConfig {
            n_trajectories: n,
            length: 40,
            seed,
            ..Default::default()
        })
        .unwrap();
        records
            .iter()
            .flat_map(|r| slice_windows(r, &WindowConfig::default()).unwrap())
            .collect()
    }

    fn setup(cfg: DiffusionConfig, seed: u64) -> (DiffusionModel, ParameterStore) {
        let model = DiffusionModel::new(cfg).unwrap();
        let mut store = ParameterStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (model, store)
    }

    #[test]
    fn zero_network_loss_is_one() {
        let (model, mut store) = setup(epsilon_cfg(), 1);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let ws = windows(4, 2);
        let refs: Vec<&StateWindow> = ws.iter().collect();
        let norm = normalizer(&model, &ws);
        let x0 = norm.encode_batch(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 10^4 draws of 32 values each.
        let draws = 10_000 / refs.len() + 1;
        let mut total = 0.0;
        for _ in 0..draws {
            let (l, _) = model.denoising_loss(&store, &refs, &x0, &mut rng).unwrap();
            assert!(l >= 0.0);
            total += l;
        }
        let mean = total / draws as f64;
        assert!((0.97..=1.03).contains(&mean), "{mean}");
    }

    #[test]
    fn full_path_gradients_match_finite_differences() {
        gradcheck(small_cfg());
        gradcheck(epsilon_cfg());
    }

    fn gradcheck(cfg: DiffusionConfig) {
        let (model, mut store) = setup(cfg, 4);
        let ws = windows(2, 5);
        let refs: Vec<&StateWindow> = ws.iter().take(3).collect();
        let norm = normalizer(&model, &ws);
        let x0 = norm.encode_batch(&refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let steps: Vec<usize> = refs.iter().map(|_| rng.random_range(0..100)).collect();
        let eps = Tensor::new(x0.shape().to_vec(), gaussian(x0.len(), &mut rng)).unwrap();
        let (g, l) = model.loss_graph(&store, &refs, &x0, &steps, &eps).unwrap();
        let grads = g.backward(l).unwrap();
        let coords = sample_coordinates(&store, 24, &mut rng);
        let probes = check_coordinates(&mut store, &grads, &coords, 1e-5, |s| {
            let (g, l) = model.loss_graph(s, &refs, &x0, &steps, &eps)?;
            Ok(g.value(l).data()[0])
        })
        .unwrap();
        for p in probes {
            assert!(p.relative_error(1e-6) < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn reverse_step_terminal_and_zero_network() {
        let (model, mut store) = setup(epsilon_cfg(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = Tensor::new(vec![2, 160], gaussian(320, &mut rng)).unwrap();
        let width = model.data_dim();
        let xk = Tensor::new(vec![2, width], gaussian(2 * width, &mut rng)).unwrap();
        let a = model.reverse_step(&store, &xk, 0, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.reverse_step(&store, &xk, 0, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(model.reverse_step(&store, &xk, 100, &c, &mut rng).is_err());

        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let out = model.reverse_step(&store, &xk, 0, &c, &mut rng).unwrap();
        let scale = 1.0 / model.schedule().alpha()[0].sqrt();
        for (o, x) in out.data().iter().zip(xk.data()) {
            assert!((o - scale * x).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_rotations_valid() {
        let (model, store) = setup(small_cfg(), 9);
        let ws = windows(4, 10);
        let refs: Vec<&StateWindow> = ws.iter().collect();
        let norm = normalizer(&model, &ws);
        let a = model.forecast(&store, &norm, &refs, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = model.forecast(&store, &norm, &refs, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let mut count = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        while count < 1000 {
            for seq in model.forecast(&store, &norm, &refs, &mut rng).unwrap() {
                assert_eq!(seq.len(), 10);
                for s in seq {
                    s.head.check().unwrap();
                    count += 1;
                }
            }
        }
    }

    #[test]
    fn overfits_a_single_window() {
        let (model, mut store) = setup(memorizing_cfg(), 13);
        let ws: Vec<StateWindow> = windows(1, 14).into_iter().take(1).collect();
        let norm = TargetNormalizer::identity(10);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let curve = model.train(&mut store, &ws, &norm, &cfg, 0).unwrap();
        assert_eq!(curve.len(), 300);
        // Single draws are noisy; compare the first and last ten epochs.
        let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = curve[290..].iter().sum::<f64>() / 10.0;
        assert!(tail <= 0.1 * head, "{head} -> {tail}");
    }

    #[test]
    fn samples_converge_to_a_memorized_constant_trajectory() {
        let (model, mut store) = setup(memorizing_cfg(), 17);
        let mut w = windows(1, 18).swap_remove(0);
        let still = *w.anchor();
        w.observed.fill(still);
        w.future.fill(still);
        let copies = vec![w; 16];
        let norm = TargetNormalizer::identity(10);
        let cfg = TrainConfig {
            epochs: 1000,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        model.train(&mut store, &copies, &norm, &cfg, 0).unwrap();

        let refs: Vec<&StateWindow> = copies.iter().collect();
        let samples = model.forecast(&store, &norm, &refs, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
        let (mut err, mut n) = (0.0, 0.0);
        for seq in &samples {
            for p in seq {
                for (a, b) in p.points().iter().zip(still.points().iter()) {
                    err += (a - b).norm();
                    n += 1.0;
                }
            }
        }
        let mm = 1000.0 * err / n;
        assert!(mm < 10.0, "{mm} mm");
    }

    #[test]
    fn repeated_draws_average_per_draw_losses() {
        let (model, store) = setup(small_cfg(), 21);
        let ws = windows(2, 22);
        let refs: Vec<&StateWindow> = ws.iter().take(3).collect();
        let norm = normalizer(&model, &ws);
        let x0 = norm.encode_batch(&refs).unwrap();
        let width = model.data_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws: Vec<(Vec<usize>, Tensor)> = (0..2)
            .map(|_| {
                let steps = refs.iter().map(|_| rng.random_range(0..100)).collect();
                (steps, Tensor::new(x0.shape().to_vec(), gaussian(x0.len(), &mut rng)).unwrap())
            })
            .collect();
        let single: f64 = draws
            .iter()
            .map(|(steps, eps)| {
                let (g, l) = model.loss_graph(&store, &refs, &x0, steps, eps).unwrap();
                g.value(l).data()[0]
            })
            .sum::<f64>()
            / 2.0;
        // Rows are grouped per window: window i owns rows 2i and 2i + 1.
        let (mut steps, mut x, mut eps) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..refs.len() {
            for (s, e) in &draws {
                steps.push(s[i]);
                x.extend_from_slice(&x0.data()[i * width..(i + 1) * width]);
                eps.extend_from_slice(&e.data()[i * width..(i + 1) * width]);
            }
        }
        let rows = steps.len();
        let x = Tensor::new(vec![rows, width], x).unwrap();
        let eps = Tensor::new(vec![rows, width], eps).unwrap();
        let (g, l) = model.loss_graph(&store, &refs, &x, &steps, &eps).unwrap();
        assert!((g.value(l).data()[0] - single).abs() < 1e-12);

        let three = DiffusionModel::new(DiffusionConfig {
            noise_draws: 3,
            ..small_cfg()
        })
        .unwrap();
        let (loss, grads) = three.denoising_loss(&store, &refs, &x0, &mut rng).unwrap();
        assert!(loss.is_finite() && !grads.is_empty());
    }

    #[test]
    fn invalid_draws_and_axes_rejected() {
        for cfg in [
            DiffusionConfig {
                noise_draws: 0,
                ..small_cfg()
            },
            DiffusionConfig {
                principal_axes: Some(0),
                ..small_cfg()
            },
            DiffusionConfig {
                principal_axes: Some(301),
                ..small_cfg()
            },
        ] {
            assert!(DiffusionModel::new(cfg).is_err());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (model, mut store) = setup(full_cfg(), 16);
        let norm = TargetNormalizer::identity(10);
        assert!(model.train(&mut store, &[], &norm, &TrainConfig::default(), 0).is_err());
    }
}
