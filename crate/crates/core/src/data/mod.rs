//! Trajectory records, JSONL storage, cleaning and sliding windows, plus the
//! synthetic coordinated-trajectory generator.

mod clean;
mod jsonl;
mod synthetic;
mod window;

pub use clean::clean_impute;
pub use jsonl::{load_jsonl, read_jsonl, save_jsonl, write_jsonl, SCHEMA_VERSION};
pub use synthetic::{generate_synthetic, ActivityClass, SyntheticConfig};
pub use window::{slice_windows, StateWindow, WindowConfig};

use crate::kinematics::VisuomotorState;
use crate::{Error, Result};

/// Length of the precomputed visual feature vector.
pub const VISUAL_DIM: usize = 128;

/// Rate of the visual feature grid. Frame `j` sits at time `j / VISUAL_FPS`.
pub const VISUAL_FPS: f64 = 4.0;

/// Default largest gap (in steps) that imputation fills: 5 s at 10 fps.
pub const DEFAULT_MAX_GAP: usize = 50;

/// A recorded (or synthesized) sequence of visuomotor states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub id: String,
    pub fps: f64,
    pub class_label: String,
    pub states: Vec<VisuomotorState>,
    /// Per-state validity; masked states may hold arbitrary finite values.
    pub valid: Vec<bool>,
    /// Visual features on the [`VISUAL_FPS`] grid.
    pub visual_features: Option<Vec<Vec<f64>>>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Validation {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(self.fail(format!("fps must be positive, got {}", self.fps)));
        }
        if self.valid.len() != self.states.len() {
            return Err(self.fail(format!(
                "valid mask has {} entries for {} states",
                self.valid.len(),
                self.states.len()
            )));
        }
        for (i, (state, &ok)) in self.states.iter().zip(&self.valid).enumerate() {
            if ok {
                state.check().map_err(|e| self.fail(format!("state {i}: {e}")))?;
            } else {
                let finite = state
                    .points()
                    .iter()
                    .flat_map(|p| p.iter())
                    .chain(state.head.rotation().iter())
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(self.fail(format!("state {i}: non-finite coordinates")));
                }
            }
        }
        if let Some(features) = &self.visual_features {
            for (j, f) in features.iter().enumerate() {
                if f.len() != VISUAL_DIM {
                    return Err(self.fail(format!(
                        "visual feature {j} has length {} ≠ {VISUAL_DIM}",
                        f.len()
                    )));
                }
                if !f.iter().all(|v| v.is_finite()) {
                    return Err(self.fail(format!("visual feature {j} is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Feature frame nearest to kinematic step `index`, or zeros when the
    /// record carries no features.
    pub fn visual_feature_near(&self, index: usize) -> Vec<f64> {
        match &self.visual_features {
            Some(frames) if !frames.is_empty() => {
                let t = index as f64 / self.fps;
                let j = ((t * VISUAL_FPS).round() as usize).min(frames.len() - 1);
                frames[j].clone()
            }
            _ => vec![0.0; VISUAL_DIM],
        }
    }
}
