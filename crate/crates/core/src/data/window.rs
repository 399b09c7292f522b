use serde::{Deserialize, Serialize};

use super::TrajectoryRecord;
use crate::kinematics::{canonicalize_sequence, VisuomotorState};
use crate::{Error, Result};

/// Window geometry: `observed + future` consecutive steps per sample,
/// starting every `stride` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub observed: usize,
    pub future: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            observed: 10,
            future: 10,
            stride: 10,
        }
    }
}

impl WindowConfig {
    pub fn window(&self) -> usize {
        self.observed + self.future
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed == 0 || self.future == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "window needs observed, future and stride >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of windows a fully valid record of `len` steps yields.
    pub fn count_for(&self, len: usize) -> usize {
        if len < self.window() {
            0
        } else {
            (len - self.window()) / self.stride + 1
        }
    }
}

/// One training/evaluation sample, canonicalized on the last observed head.
#[derive(Debug, Clone, PartialEq)]
pub struct StateWindow {
    pub observed: Vec<VisuomotorState>,
    pub future: Vec<VisuomotorState>,
    pub visual_feature: Vec<f64>,
    pub source_id: String,
    pub class_label: String,
    /// First step of the window in the source record.
    pub start: usize,
}

impl StateWindow {
    pub fn anchor(&self) -> &VisuomotorState {
        self.observed.last().expect("windows have at least one observed state")
    }
}

/// Slides a window over `record`, dropping windows that touch a masked
/// state, and canonicalizes each kept window on its last observed step.
pub fn slice_windows(record: &TrajectoryRecord, cfg: &WindowConfig) -> Result<Vec<StateWindow>> {
    cfg.validate()?;
    let w = cfg.window();
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= record.len() {
        let span = start..start + w;
        if record.valid[span.clone()].iter().all(|&v| v) {
            let anchor = cfg.observed - 1;
            let canon = canonicalize_sequence(&record.states[span], anchor)?;
            let (observed, future) = canon.split_at(cfg.observed);
            out.push(StateWindow {
                observed: observed.to_vec(),
                future: future.to_vec(),
                visual_feature: record.visual_feature_near(start + anchor),
                source_id: record.id.clone(),
                class_label: record.class_label.clone(),
                start,
            });
        }
        start += cfg.stride;
    }
    Ok(out)
}
