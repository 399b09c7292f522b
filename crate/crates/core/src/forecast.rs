//! A common interface over all forecasters, model checkpoints and the
//! standard synthetic benchmark.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{constant_pose, constant_velocity, RegressionConfig, RegressionModel};
use crate::data::{clean_impute, generate_synthetic, slice_windows, StateWindow, SyntheticConfig, TrajectoryRecord, WindowConfig};
use crate::diffusion::{DiffusionConfig, DiffusionModel};
use crate::kinematics::VisuomotorState;
use crate::metrics::{evaluate, EvalReport};
use crate::numerics::ParameterStore;
use crate::target::TargetNormalizer;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Windows forecast per call.
pub const FORECAST_BATCH: usize = 64;

pub trait Forecaster {
    fn name(&self) -> &str;

    /// Horizon the forecaster is tied to, if any.
    fn horizon(&self) -> Option<usize> {
        None
    }

    /// Forecasts `horizon` steps for each window. `batch` numbers the call
    /// so stochastic forecasters can derive a reproducible generator.
    fn forecast_batch(&self, windows: &[&StateWindow], horizon: usize, batch: usize) -> Result<Vec<Vec<VisuomotorState>>>;
}

pub struct ConstantPose;

impl Forecaster for ConstantPose {
    fn name(&self) -> &str {
        "constant_pose"
    }

    fn forecast_batch(&self, windows: &[&StateWindow], horizon: usize, _: usize) -> Result<Vec<Vec<VisuomotorState>>> {
        windows.iter().map(|w| constant_pose(&w.observed, horizon)).collect()
    }
}

pub struct ConstantVelocity;

impl Forecaster for ConstantVelocity {
    fn name(&self) -> &str {
        "constant_velocity"
    }

    fn forecast_batch(&self, windows: &[&StateWindow], horizon: usize, _: usize) -> Result<Vec<Vec<VisuomotorState>>> {
        windows.iter().map(|w| constant_velocity(&w.observed, horizon)).collect()
    }
}

/// Looks up a parameter-free baseline by name.
pub fn baseline(name: &str) -> Result<Box<dyn Forecaster>> {
    match name {
        "constant_pose" => Ok(Box::new(ConstantPose)),
        "constant_velocity" => Ok(Box::new(ConstantVelocity)),
        other => Err(Error::invalid(format!(
            "unknown baseline `{other}`; expected constant_pose or constant_velocity"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Regression,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Diffusion(DiffusionModel),
    Regression(RegressionModel),
}

impl Model {
    /// Builds a model of `kind` from its JSON config (`null` for defaults).
    pub fn from_config(kind: ModelKind, config: &serde_json::Value) -> Result<Self> {
        let value = if config.is_null() { serde_json::json!({}) } else { config.clone() };
        Ok(match kind {
            ModelKind::Diffusion => Model::Diffusion(DiffusionModel::new(serde_json::from_value::<DiffusionConfig>(value)?)?),
            ModelKind::Regression => Model::Regression(RegressionModel::new(serde_json::from_value::<RegressionConfig>(value)?)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Diffusion(_) => ModelKind::Diffusion,
            Model::Regression(_) => ModelKind::Regression,
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        match self {
            Model::Diffusion(m) => serde_json::to_value(m.config()),
            Model::Regression(m) => serde_json::to_value(m.config()),
        }
        .expect("configs serialize")
    }

    pub fn horizon(&self) -> usize {
        match self {
            Model::Diffusion(m) => m.config().horizon,
            Model::Regression(m) => m.config().horizon,
        }
    }

    /// Principal axes the targets are projected onto, if any.
    pub fn principal_axes(&self) -> Option<usize> {
        match self {
            Model::Diffusion(m) => m.config().principal_axes,
            Model::Regression(_) => None,
        }
    }

    pub fn observed(&self) -> usize {
        match self {
            Model::Diffusion(m) => m.config().encoder.observed,
            Model::Regression(m) => m.config().encoder.observed,
        }
    }

    fn prefix(&self) -> &'static str {
        self.kind().name()
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        match self {
            Model::Diffusion(m) => m.init(store, rng),
            Model::Regression(m) => m.init(store, rng),
        }
    }

    pub fn train(
        &self,
        store: &mut ParameterStore,
        windows: &[StateWindow],
        normalizer: &TargetNormalizer,
        cfg: &TrainConfig,
        epoch_offset: usize,
    ) -> Result<Vec<f64>> {
        match self {
            Model::Diffusion(m) => m.train(store, windows, normalizer, cfg, epoch_offset),
            Model::Regression(m) => m.train(store, windows, normalizer, cfg, epoch_offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: serde_json::Value,
    pub window: WindowConfig,
    /// Training settings; `epochs` counts every epoch run so far.
    pub train: TrainConfig,
    pub final_loss: Option<f64>,
}

/// A model together with its weights and target normalizer.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParameterStore,
    pub normalizer: TargetNormalizer,
    pub meta: CheckpointMeta,
    /// Seed for sampling-based forecasts.
    pub sample_seed: u64,
}

impl TrainedModel {
    /// Fresh parameters and a normalizer fitted on `windows`.
    pub fn initialize(model: Model, windows: &[StateWindow], window: WindowConfig, train: TrainConfig) -> Result<Self> {
        if window.future != model.horizon() || window.observed != model.observed() {
            return Err(Error::invalid(format!(
                "window {}+{} does not match model {}+{}",
                window.observed,
                window.future,
                model.observed(),
                model.horizon()
            )));
        }
        let normalizer = TargetNormalizer::fit_with(windows, model.principal_axes())?;
        let mut store = ParameterStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(train.seed));
        normalizer.save_to(&mut store, model.prefix());
        let meta = CheckpointMeta {
            kind: model.kind(),
            model: model.config_json(),
            window,
            train: TrainConfig { epochs: 0, ..train },
            final_loss: None,
        };
        Ok(Self {
            model,
            store,
            normalizer,
            meta,
            sample_seed: train.seed,
        })
    }

    /// Runs `cfg.epochs` more epochs, continuing the epoch count.
    pub fn train(&mut self, windows: &[StateWindow], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let done = self.meta.train.epochs;
        let curve = self.model.train(&mut self.store, windows, &self.normalizer, cfg, done)?;
        self.meta.train = TrainConfig {
            epochs: done + cfg.epochs,
            ..*cfg
        };
        if let Some(&last) = curve.last() {
            self.meta.final_loss = Some(last);
        }
        Ok(curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, serde_json::to_value(&self.meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParameterStore::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let model = Model::from_config(meta.kind, &meta.model)?;
        let normalizer = TargetNormalizer::load_from(&store, model.prefix())?;
        if normalizer.horizon() != model.horizon() {
            return Err(Error::Checkpoint(format!(
                "normalizer horizon {} does not match model horizon {}",
                normalizer.horizon(),
                model.horizon()
            )));
        }
        if normalizer.principal_axes() != model.principal_axes() {
            return Err(Error::Checkpoint(format!(
                "model expects principal axes {:?} but the checkpoint's normalizer has {:?}",
                model.principal_axes(),
                normalizer.principal_axes()
            )));
        }
        check_parameters(&model, &store)?;
        Ok(Self {
            sample_seed: meta.train.seed,
            model,
            store,
            normalizer,
            meta,
        })
    }
}

/// Every trainable tensor the model expects must be present with its shape,
/// and nothing else may be.
fn check_parameters(model: &Model, store: &ParameterStore) -> Result<()> {
    let mut fresh = ParameterStore::new();
    model.init(&mut fresh, &mut ChaCha8Rng::seed_from_u64(0));
    let missing: Vec<String> = fresh
        .trainable_names()
        .filter(|n| store.get(n).map(|t| t.shape()) != fresh.get(n).map(|t| t.shape()))
        .cloned()
        .collect();
    let unexpected: Vec<String> = store.trainable_names().filter(|n| !fresh.contains(n)).cloned().collect();
    if missing.is_empty() && unexpected.is_empty() {
        Ok(())
    } else {
        Err(Error::KeyMismatch { missing, unexpected })
    }
}

impl Forecaster for TrainedModel {
    fn name(&self) -> &str {
        self.model.kind().name()
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.model.horizon())
    }

    fn forecast_batch(&self, windows: &[&StateWindow], horizon: usize, batch: usize) -> Result<Vec<Vec<VisuomotorState>>> {
        if horizon != self.model.horizon() {
            return Err(Error::invalid(format!(
                "model forecasts {} steps, data asks for {horizon}",
                self.model.horizon()
            )));
        }
        match &self.model {
            Model::Diffusion(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
                rng.set_stream(batch as u64);
                m.forecast(&self.store, &self.normalizer, windows, &mut rng)
            }
            Model::Regression(m) => m.forecast(&self.store, &self.normalizer, windows),
        }
    }
}

/// Forecasts every window in fixed-size batches.
pub fn forecast_all(f: &dyn Forecaster, windows: &[StateWindow]) -> Result<Vec<Vec<VisuomotorState>>> {
    let horizon = windows.first().map_or(0, |w| w.future.len());
    let refs: Vec<&StateWindow> = windows.iter().collect();
    let mut out = Vec::with_capacity(windows.len());
    for (i, chunk) in refs.chunks(FORECAST_BATCH).enumerate() {
        out.extend(f.forecast_batch(chunk, horizon, i)?);
    }
    Ok(out)
}

/// Forecasts and scores every window against its ground-truth future.
pub fn evaluate_forecaster(f: &dyn Forecaster, windows: &[StateWindow]) -> Result<EvalReport> {
    let preds = forecast_all(f, windows)?;
    let truth: Vec<Vec<VisuomotorState>> = windows.iter().map(|w| w.future.clone()).collect();
    let labels: Vec<String> = windows.iter().map(|w| w.class_label.clone()).collect();
    evaluate(f.name(), &preds, &truth, &labels)
}

/// Imputes short gaps and slices every record.
pub fn windows_from_records(records: &[TrajectoryRecord], window: &WindowConfig, max_gap: usize) -> Result<Vec<StateWindow>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(slice_windows(&clean_impute(r, max_gap)?, window)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_windows: usize,
    pub test_windows: usize,
    pub length: usize,
    pub window: WindowConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_windows: 2000,
            test_windows: 400,
            length: 200,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<StateWindow>,
    pub test: Vec<StateWindow>,
}

fn take_windows(seed: u64, wanted: usize, cfg: &BenchmarkConfig) -> Result<Vec<StateWindow>> {
    let per = cfg.window.count_for(cfg.length);
    if per == 0 {
        return Err(Error::invalid("benchmark trajectories are shorter than one window"));
    }
    let records = generate_synthetic(&SyntheticConfig {
        n_trajectories: wanted.div_ceil(per).max(1),
        length: cfg.length,
        seed,
        ..Default::default()
    })?;
    let mut w = windows_from_records(&records, &cfg.window, crate::data::DEFAULT_MAX_GAP)?;
    w.truncate(wanted);
    Ok(w)
}

/// Training windows from trajectories seeded with `seed`, test windows from
/// trajectories seeded with `seed + 1`.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    Ok(Benchmark {
        train: take_windows(cfg.seed, cfg.train_windows, cfg)?,
        test: take_windows(cfg.seed.wrapping_add(1), cfg.test_windows, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bench() -> Benchmark {
        build_benchmark(&BenchmarkConfig {
            train_windows: 40,
            test_windows: 12,
            length: 60,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn benchmark_sizes_and_disjoint_sources() {
        let b = small_bench();
        assert_eq!(b.train.len(), 40);
        assert_eq!(b.test.len(), 12);
        assert!(b.train.iter().all(|w| w.source_id.starts_with("syn-42-")));
        assert!(b.test.iter().all(|w| w.source_id.starts_with("syn-43-")));
    }

    #[test]
    fn baselines_by_name() {
        assert_eq!(baseline("constant_pose").unwrap().name(), "constant_pose");
        assert!(baseline("nearest_neighbour").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume_identity() {
        let b = small_bench();
        let dir = tempfile::tempdir().unwrap();
        let model = Model::from_config(
            ModelKind::Regression,
            &serde_json::json!({"encoder": {"latent_dim": 8, "n_heads": 2}, "hidden": [16]}),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let mut tm = TrainedModel::initialize(model, &b.train, WindowConfig::default(), cfg).unwrap();
        let curve = tm.train(&b.train, &cfg).unwrap();
        assert_eq!(curve.len(), 2);
        let first = dir.path().join("a").join("model.json");
        tm.save(&first).unwrap();

        let mut back = TrainedModel::load(&first).unwrap();
        assert_eq!(back.store, tm.store);
        back.train(&b.train, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        let second = dir.path().join("b").join("model.json");
        back.save(&second).unwrap();
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        assert_eq!(
            std::fs::read(crate::numerics::params::blob_path(&first)).unwrap(),
            std::fs::read(crate::numerics::params::blob_path(&second)).unwrap()
        );

        let a = evaluate_forecaster(&tm, &b.test).unwrap();
        let c = evaluate_forecaster(&back, &b.test).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn horizon_mismatch_is_reported() {
        let b = small_bench();
        let model = Model::from_config(ModelKind::Diffusion, &serde_json::Value::Null).unwrap();
        let tm = TrainedModel::initialize(model, &b.train, WindowConfig::default(), TrainConfig::default()).unwrap();
        let short = WindowConfig {
            future: 5,
            ..Default::default()
        };
        let records = generate_synthetic(&SyntheticConfig {
            n_trajectories: 1,
            length: 40,
            ..Default::default()
        })
        .unwrap();
        let ws = windows_from_records(&records, &short, 5).unwrap();
        assert!(evaluate_forecaster(&tm, &ws).is_err());
    }
}
