//! Flat per-step feature layout shared by the encoder inputs and the
//! forecast targets, plus the target normalizer.
//!
//! Layout of one step: head position (3), head rotation 6D (6), gaze
//! endpoint (3), joints (18).

use crate::data::{StateWindow, VISUAL_DIM};
use crate::kinematics::{rotation_from_6d, rotation_to_6d, Se3Pose, Vec3, VisuomotorState, NUM_JOINTS};
use crate::numerics::{ParameterStore, Tensor};
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 30;
pub const HEAD_SLICE: std::ops::Range<usize> = 0..9;
pub const GAZE_SLICE: std::ops::Range<usize> = 9..12;
pub const ARM_SLICE: std::ops::Range<usize> = 12..30;

/// Per-dimension std below this is treated as this value.
const STD_FLOOR: f64 = 1e-3;

/// Principal variances below this are treated as this value when whitening.
const EIGEN_FLOOR: f64 = 1e-6;

pub fn state_features(s: &VisuomotorState) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[0..3].copy_from_slice(s.head.position().as_slice());
    f[3..9].copy_from_slice(&rotation_to_6d(&s.head.rotation()));
    f[9..12].copy_from_slice(s.gaze.as_slice());
    for (j, p) in s.joints.iter().enumerate() {
        f[12 + 3 * j..15 + 3 * j].copy_from_slice(p.as_slice());
    }
    f
}

/// Inverse of [`state_features`]; the rotation columns are re-orthonormalized.
pub fn state_from_features(f: &[f64]) -> Result<VisuomotorState> {
    if f.len() != FEATURE_DIM {
        return Err(Error::invalid(format!("state features have {} values, expected {FEATURE_DIM}", f.len())));
    }
    let six: [f64; 6] = f[3..9].try_into().expect("six values");
    Ok(VisuomotorState {
        head: Se3Pose::from_parts_unchecked(Vec3::from_column_slice(&f[0..3]), rotation_from_6d(&six)),
        gaze: Vec3::from_column_slice(&f[9..12]),
        joints: std::array::from_fn::<_, NUM_JOINTS, _>(|j| Vec3::from_column_slice(&f[12 + 3 * j..15 + 3 * j])),
    })
}

/// `[B, observed, 30]` encoder input.
pub fn observed_tensor(windows: &[&StateWindow]) -> Result<Tensor> {
    let tau = windows.first().map_or(0, |w| w.observed.len());
    let mut data = Vec::with_capacity(windows.len() * tau * FEATURE_DIM);
    for w in windows {
        if w.observed.len() != tau {
            return Err(Error::invalid(format!(
                "mixed observed lengths {tau} and {}",
                w.observed.len()
            )));
        }
        for s in &w.observed {
            data.extend_from_slice(&state_features(s));
        }
    }
    Tensor::new(vec![windows.len(), tau, FEATURE_DIM], data)
}

/// `[B, 128]` visual features.
pub fn visual_tensor(windows: &[&StateWindow]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * VISUAL_DIM);
    for w in windows {
        if w.visual_feature.len() != VISUAL_DIM {
            return Err(Error::invalid(format!(
                "visual feature of `{}` has {} values, expected {VISUAL_DIM}",
                w.source_id,
                w.visual_feature.len()
            )));
        }
        data.extend_from_slice(&w.visual_feature);
    }
    Tensor::new(vec![windows.len(), VISUAL_DIM], data)
}

/// Maps a future sequence to a flat `horizon * 30` vector: each step's
/// features minus the anchor's, standardized per (step, dimension).
/// Optionally the standardized vector is then projected onto its leading
/// principal axes, each scaled to unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNormalizer {
    horizon: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    whitening: Option<Whitening>,
}

/// Row `i` of `basis` is the `i`-th principal axis; `scale[i]` its std.
#[derive(Debug, Clone, PartialEq)]
struct Whitening {
    basis: Vec<f64>,
    scale: Vec<f64>,
}

impl Whitening {
    fn fit(rows: &[Vec<f64>], axes: usize) -> Self {
        let n = rows[0].len();
        let count = rows.len() as f64;
        let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
        for r in rows {
            let v = nalgebra::DVector::from_column_slice(r);
            cov.syger(1.0 / count, &v, &v, 1.0);
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(n * n);
        let mut scale = Vec::with_capacity(n);
        for &i in order.iter().take(axes) {
            let axis = eig.eigenvectors.column(i);
            // Fix the sign so refits on identical data agree exactly.
            let pivot = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.extend(axis.iter().map(|v| sign * v));
            scale.push(eig.eigenvalues[i].max(EIGEN_FLOOR).sqrt());
        }
        Self { basis, scale }
    }

    fn axes(&self) -> usize {
        self.scale.len()
    }

    fn forward(&self, s: &[f64]) -> Vec<f64> {
        self.basis
            .chunks(s.len())
            .zip(&self.scale)
            .map(|(axis, sd)| axis.iter().zip(s).map(|(a, v)| a * v).sum::<f64>() / sd)
            .collect()
    }

    fn inverse(&self, z: &[f64]) -> Vec<f64> {
        let n = self.basis.len() / self.axes();
        let mut s = vec![0.0; n];
        for ((axis, sd), v) in self.basis.chunks(n).zip(&self.scale).zip(z) {
            s.iter_mut().zip(axis).for_each(|(o, a)| *o += a * v * sd);
        }
        s
    }
}

fn raw_offsets(window: &StateWindow) -> Vec<f64> {
    let anchor = state_features(window.anchor());
    window
        .future
        .iter()
        .flat_map(|s| {
            let f = state_features(s);
            (0..FEATURE_DIM).map(move |i| f[i] - anchor[i])
        })
        .collect()
}

impl TargetNormalizer {
    pub fn identity(horizon: usize) -> Self {
        Self {
            horizon,
            mean: vec![0.0; horizon * FEATURE_DIM],
            std: vec![1.0; horizon * FEATURE_DIM],
            whitening: None,
        }
    }

    /// Standardization fitted on `windows`, followed by projection onto the
    /// `axes` leading whitened principal axes when given.
    pub fn fit_with(windows: &[StateWindow], axes: Option<usize>) -> Result<Self> {
        let mut norm = Self::fit(windows)?;
        if let Some(axes) = axes {
            if axes == 0 || axes > norm.horizon * FEATURE_DIM {
                return Err(Error::invalid(format!(
                    "principal axes must lie in 1..={}, got {axes}",
                    norm.horizon * FEATURE_DIM
                )));
            }
            let rows: Vec<Vec<f64>> = windows.iter().map(|w| norm.encode(w)).collect::<Result<_>>()?;
            norm.whitening = Some(Whitening::fit(&rows, axes));
        }
        Ok(norm)
    }

    /// Number of principal axes kept, if the targets are projected.
    pub fn principal_axes(&self) -> Option<usize> {
        self.whitening.as_ref().map(Whitening::axes)
    }

    pub fn fit(windows: &[StateWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("cannot fit a normalizer on zero windows"))?;
        let horizon = first.future.len();
        let n = horizon * FEATURE_DIM;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for w in windows {
            if w.future.len() != horizon {
                return Err(Error::invalid(format!("mixed horizons {horizon} and {}", w.future.len())));
            }
            for (i, v) in raw_offsets(w).into_iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let count = windows.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            horizon,
            mean,
            std,
            whitening: None,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Length of an encoded target.
    pub fn width(&self) -> usize {
        self.principal_axes().unwrap_or(self.horizon * FEATURE_DIM)
    }

    pub fn encode(&self, window: &StateWindow) -> Result<Vec<f64>> {
        if window.future.len() != self.horizon {
            return Err(Error::invalid(format!(
                "window horizon {} does not match model horizon {}",
                window.future.len(),
                self.horizon
            )));
        }
        let standardized: Vec<f64> = raw_offsets(window)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i]) / self.std[i])
            .collect();
        Ok(match &self.whitening {
            Some(w) => w.forward(&standardized),
            None => standardized,
        })
    }

    /// `[B, horizon * 30]` targets.
    pub fn encode_batch(&self, windows: &[&StateWindow]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(windows.len() * self.width());
        for w in windows {
            data.extend(self.encode(w)?);
        }
        Tensor::new(vec![windows.len(), self.width()], data)
    }

    /// Undoes [`encode`](Self::encode) relative to `anchor` and decodes each
    /// step to a state with a valid rotation.
    pub fn decode(&self, values: &[f64], anchor: &VisuomotorState) -> Result<Vec<VisuomotorState>> {
        if values.len() != self.width() {
            return Err(Error::invalid(format!(
                "forecast has {} values, expected {}",
                values.len(),
                self.width()
            )));
        }
        let base = state_features(anchor);
        let unwhitened;
        let values = match &self.whitening {
            Some(w) => {
                unwhitened = w.inverse(values);
                &unwhitened[..]
            }
            None => values,
        };
        values
            .chunks(FEATURE_DIM)
            .enumerate()
            .map(|(k, chunk)| {
                let f: Vec<f64> = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let at = k * FEATURE_DIM + i;
                        v * self.std[at] + self.mean[at] + base[i]
                    })
                    .collect();
                state_from_features(&f)
            })
            .collect()
    }

    pub fn save_to(&self, store: &mut ParameterStore, prefix: &str) {
        let shape = [self.horizon, FEATURE_DIM];
        store.insert(
            format!("buffer.{prefix}.target_mean"),
            Tensor::new(shape.to_vec(), self.mean.clone()).expect("sized"),
        );
        store.insert(
            format!("buffer.{prefix}.target_std"),
            Tensor::new(shape.to_vec(), self.std.clone()).expect("sized"),
        );
        if let Some(w) = &self.whitening {
            let (r, n) = (w.axes(), self.horizon * FEATURE_DIM);
            store.insert(
                format!("buffer.{prefix}.target_basis"),
                Tensor::new(vec![r, n], w.basis.clone()).expect("sized"),
            );
            store.insert(
                format!("buffer.{prefix}.target_scale"),
                Tensor::new(vec![r], w.scale.clone()).expect("sized"),
            );
        }
    }

    pub fn load_from(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let get = |what: &str| {
            let name = format!("buffer.{prefix}.{what}");
            store
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
        };
        let mean = get("target_mean")?;
        let std = get("target_std")?;
        if mean.shape().len() != 2 || mean.shape()[1] != FEATURE_DIM || mean.shape() != std.shape() {
            return Err(Error::Checkpoint(format!(
                "normalizer buffers have shapes {:?} and {:?}",
                mean.shape(),
                std.shape()
            )));
        }
        if std.data().iter().any(|s| *s <= 0.0) {
            return Err(Error::Checkpoint("normalizer std must be positive".into()));
        }
        let n = mean.len();
        let whitening = match (get("target_basis"), get("target_scale")) {
            (Ok(basis), Ok(scale)) => {
                let r = scale.len();
                if r == 0 || basis.shape() != [r, n] || scale.shape() != [r] || scale.data().iter().any(|s| *s <= 0.0) {
                    return Err(Error::Checkpoint(format!(
                        "whitening buffers have shapes {:?} and {:?}, expected [r, {n}] and [r] with positive scales",
                        basis.shape(),
                        scale.shape()
                    )));
                }
                Some(Whitening {
                    basis: basis.data().to_vec(),
                    scale: scale.data().to_vec(),
                })
            }
            (Err(_), Err(_)) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok(Self {
            horizon: mean.shape()[0],
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
            whitening,
        })
    }
}
