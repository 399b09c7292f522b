//! Forecast error metrics and their aggregation.
//!
//! Positions are reported in millimetres, rotations in degrees. PA-MPJPE
//! aligns the eight points of a state (head, gaze endpoint, six joints) with
//! a rigid transform only; there is no scale factor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kinematics::{rotation_geodesic_angle, Joint, Mat3, Vec3, VisuomotorState};
use crate::numerics::linalg::svd3;
use crate::{Error, Result};

const MM: f64 = 1000.0;

pub const METRIC_NAMES: [&str; 5] = ["pa_mpjpe", "head_pos", "gaze_pos", "hand_pos", "head_rot"];

/// Rotation `R` and translation `t` minimizing `sum |R x_i + t - y_i|^2`.
pub fn procrustes(x: &[Vec3], y: &[Vec3]) -> (Mat3, Vec3) {
    let n = x.len().max(1) as f64;
    let cx = x.iter().sum::<Vec3>() / n;
    let cy = y.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (a, b) in x.iter().zip(y) {
        h += (a - cx) * (b - cy).transpose();
    }
    let (u, _, v) = svd3(&h);
    let d = (v * u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    (r, cy - r * cx)
}

/// Mean point distance (mm) after rigid alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &VisuomotorState, gt: &VisuomotorState) -> f64 {
    let (x, y) = (pred.points(), gt.points());
    if x == y {
        // The SVD would leave rounding noise of order 1e-13.
        return 0.0;
    }
    let (r, t) = procrustes(&x, &y);
    let total: f64 = x.iter().zip(&y).map(|(a, b)| (r * a + t - b).norm()).sum();
    MM * total / x.len() as f64
}

/// Head, gaze-endpoint and mean-wrist distances in mm.
pub fn position_errors(pred: &VisuomotorState, gt: &VisuomotorState) -> (f64, f64, f64) {
    let head = (pred.head.position() - gt.head.position()).norm();
    let gaze = (pred.gaze - gt.gaze).norm();
    let hand = [Joint::LeftWrist, Joint::RightWrist]
        .iter()
        .map(|&j| (pred.joint(j) - gt.joint(j)).norm())
        .sum::<f64>()
        / 2.0;
    (MM * head, MM * gaze, MM * hand)
}

/// Geodesic angle between head orientations, degrees.
pub fn head_rotation_error(pred: &VisuomotorState, gt: &VisuomotorState) -> f64 {
    rotation_geodesic_angle(&pred.head.rotation(), &gt.head.rotation())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub pa_mpjpe: f64,
    pub head_pos: f64,
    pub gaze_pos: f64,
    pub hand_pos: f64,
    pub head_rot: f64,
}

impl StepMetrics {
    pub fn between(pred: &VisuomotorState, gt: &VisuomotorState) -> Self {
        let (head_pos, gaze_pos, hand_pos) = position_errors(pred, gt);
        Self {
            pa_mpjpe: pa_mpjpe(pred, gt),
            head_pos,
            gaze_pos,
            hand_pos,
            head_rot: head_rotation_error(pred, gt),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.pa_mpjpe, self.head_pos, self.gaze_pos, self.hand_pos, self.head_rot]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            pa_mpjpe: v[0],
            head_pos: v[1],
            gaze_pos: v[2],
            hand_pos: v[3],
            head_rot: v[4],
        }
    }

    /// Value by column name, see [`METRIC_NAMES`].
    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|n| *n == name).map(|i| self.values()[i])
    }
}

/// Neumaier-compensated running sums of the five metrics.
#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    sum: [f64; 5],
    carry: [f64; 5],
    count: usize,
}

impl Accumulator {
    fn add(&mut self, m: &StepMetrics) {
        for (i, v) in m.values().into_iter().enumerate() {
            let t = self.sum[i] + v;
            if self.sum[i].abs() >= v.abs() {
                self.carry[i] += (self.sum[i] - t) + v;
            } else {
                self.carry[i] += (v - t) + self.sum[i];
            }
            self.sum[i] = t;
        }
        self.count += 1;
    }

    fn mean(&self) -> StepMetrics {
        let n = self.count.max(1) as f64;
        StepMetrics::from_values(std::array::from_fn(|i| (self.sum[i] + self.carry[i]) / n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub samples: usize,
    pub per_step: Vec<StepMetrics>,
    pub mean: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub samples: usize,
    /// Row `k` holds the mean over samples at forecast step `k + 1`.
    pub per_step: Vec<StepMetrics>,
    /// Mean of the per-step rows.
    pub mean: StepMetrics,
    pub per_class: BTreeMap<String, ClassSummary>,
}

fn summarize(rows: &[Vec<StepMetrics>]) -> (Vec<StepMetrics>, StepMetrics) {
    let horizon = rows.first().map_or(0, Vec::len);
    let per_step: Vec<StepMetrics> = (0..horizon)
        .map(|k| {
            let mut acc = Accumulator::default();
            rows.iter().for_each(|r| acc.add(&r[k]));
            acc.mean()
        })
        .collect();
    let mut acc = Accumulator::default();
    per_step.iter().for_each(|m| acc.add(m));
    (per_step, acc.mean())
}

/// Scores `predictions[i]` against `ground_truth[i]`, step by step.
pub fn evaluate(
    method: &str,
    predictions: &[Vec<VisuomotorState>],
    ground_truth: &[Vec<VisuomotorState>],
    labels: &[String],
) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() || labels.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "got {} predictions, {} ground-truth sequences and {} labels",
            predictions.len(),
            ground_truth.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let horizon = ground_truth[0].len();
    let mut rows = Vec::with_capacity(predictions.len());
    for (i, (p, g)) in predictions.iter().zip(ground_truth).enumerate() {
        if p.len() != horizon || g.len() != horizon {
            return Err(Error::invalid(format!(
                "sample {i}: prediction has {} steps and ground truth {}, expected {horizon}",
                p.len(),
                g.len()
            )));
        }
        rows.push(p.iter().zip(g).map(|(a, b)| StepMetrics::between(a, b)).collect::<Vec<_>>());
    }
    let (per_step, mean) = summarize(&rows);
    let mut groups: BTreeMap<&str, Vec<Vec<StepMetrics>>> = BTreeMap::new();
    for (label, row) in labels.iter().zip(&rows) {
        groups.entry(label).or_default().push(row.clone());
    }
    let per_class = groups
        .into_iter()
        .map(|(label, rows)| {
            let (per_step, mean) = summarize(&rows);
            (
                label.to_string(),
                ClassSummary {
                    samples: rows.len(),
                    per_step,
                    mean,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        samples: predictions.len(),
        per_step,
        mean,
        per_class,
    })
}

pub const CSV_HEADER: &str = "step,pa_mpjpe,head_pos,gaze_pos,hand_pos,head_rot";

fn csv_row(out: &mut String, step: &str, m: &StepMetrics) {
    let _ = write!(out, "{step}");
    for v in m.values() {
        let _ = write!(out, ",{v:.6}");
    }
    out.push('\n');
}

impl EvalReport {
    /// One row per step plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (k, m) in self.per_step.iter().enumerate() {
            csv_row(&mut out, &(k + 1).to_string(), m);
        }
        csv_row(&mut out, "mean", &self.mean);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Per-step rows and mean row parsed back from [`EvalReport::to_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub per_step: Vec<StepMetrics>,
    pub mean: Option<StepMetrics>,
}

pub fn parse_report_csv(text: &str) -> Result<ReportTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty report".into(),
    })?;
    if header.trim() != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut per_step = Vec::new();
    let mut mean = None;
    for (i, line) in lines {
        let fail = |message: String| Error::Parse { line: i + 1, message };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 6 {
            return Err(fail(format!("expected 6 columns, found {}", cells.len())));
        }
        let mut v = [0.0f64; 5];
        for (slot, cell) in v.iter_mut().zip(&cells[1..]) {
            *slot = cell
                .parse()
                .map_err(|_| fail(format!("`{cell}` is not a number")))?;
            if !slot.is_finite() || *slot < 0.0 {
                return Err(fail(format!("`{cell}` is not a non-negative error")));
            }
        }
        let m = StepMetrics::from_values(v);
        if cells[0] == "mean" {
            mean = Some(m);
        } else {
            let step: usize = cells[0]
                .parse()
                .map_err(|_| fail(format!("bad step `{}`", cells[0])))?;
            if step != per_step.len() + 1 {
                return Err(fail(format!("expected step {}, found {step}", per_step.len() + 1)));
            }
            per_step.push(m);
        }
    }
    if per_step.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "report has no step rows".into(),
        });
    }
    Ok(ReportTable { per_step, mean })
}

/// Methods-by-metrics table of mean errors.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("method,{}\n", METRIC_NAMES.join(","));
    for r in reports {
        let _ = write!(out, "{}", r.method);
        for v in r.mean.values() {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Fixed-width text table of mean errors, one row per method.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let headers = ["Method", "PA-MPJPE", "Head", "Gaze", "Hand", "HRE"];
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .chain([headers[0].len()])
        .max()
        .unwrap_or(6);
    let mut out = format!("{:<width$}", headers[0]);
    for h in &headers[1..] {
        let _ = write!(out, " | {h:>9}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + 12 * (headers.len() - 1)));
    for r in reports {
        let _ = write!(out, "{:<width$}", r.method);
        let v = r.mean.values();
        for x in &v[..4] {
            let _ = write!(out, " | {x:>9.1}");
        }
        let _ = write!(out, " | {:>9.2}", v[4]);
        out.push('\n');
    }
    out.push_str("Positions in mm (PA-MPJPE, head, gaze endpoint, mean wrist); HRE in degrees.\n");
    out
}
