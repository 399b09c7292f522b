//! Forecasting of human visuomotor coordination.
//!
//! Given one second of observed head pose, gaze endpoint and upper-body joints
//! (plus a precomputed visual feature), predict the next second of the same
//! signals. The crate covers the whole pipeline:
//!
//! * [`kinematics`]: rigid transforms, the visuomotor state, canonicalization
//!   and gaze geometry.
//! * [`data`]: synthetic coordinated trajectories, JSONL records, imputation
//!   and sliding windows.
//! * [`numerics`]: a small f64 tensor tape with reverse-mode gradients, AdamW,
//!   a 3x3 SVD and the checkpoint format.
//! * [`encoder`]: modality encoders, visual cross-attention fusion and the
//!   temporal transformer producing the conditioning feature.
//! * [`diffusion`]: DDPM schedule, denoiser, loss, sampling and training.
//! * [`baselines`]: constant pose, constant velocity and a regression model.
//! * [`metrics`]: PA-MPJPE, position and head rotation errors, reports.
//! * [`forecast`]: a common forecaster interface and the standard synthetic
//!   benchmark.

pub mod baselines;
pub mod data;
pub mod diffusion;
pub mod encoder;
mod error;
pub mod forecast;
pub mod kinematics;
pub mod metrics;
pub mod numerics;
pub mod target;
pub mod training;

pub use error::{Error, Result};
pub use kinematics::{GazeRay, Mat3, Se3Pose, Vec3, VisuomotorState};
pub use data::{StateWindow, SyntheticConfig, TrajectoryRecord, WindowConfig};
pub use numerics::{Graph, ParameterStore, Tensor, Var};
