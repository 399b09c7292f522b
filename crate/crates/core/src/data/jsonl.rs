use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrajectoryRecord;
use crate::kinematics::{Mat3, Se3Pose, Vec3, VisuomotorState, NUM_JOINTS};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    schema: u32,
    id: String,
    fps: f64,
    class_label: String,
    states: Vec<StateLine>,
    valid: Vec<bool>,
    visual_features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateLine {
    head_p: Vec<f64>,
    /// Row-major 3x3.
    #[serde(rename = "head_R")]
    head_r: Vec<f64>,
    gaze: Vec<f64>,
    /// Six joints in [`crate::kinematics::Joint::ALL`] order, xyz each.
    joints: Vec<f64>,
}

impl From<&VisuomotorState> for StateLine {
    fn from(s: &VisuomotorState) -> Self {
        let r = s.head.rotation();
        StateLine {
            head_p: s.head.position().iter().copied().collect(),
            head_r: (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect(),
            gaze: s.gaze.iter().copied().collect(),
            joints: s.joints.iter().flat_map(|j| j.iter().copied()).collect(),
        }
    }
}

impl StateLine {
    fn into_state(self, index: usize) -> std::result::Result<VisuomotorState, String> {
        let expect = |field: &str, v: &[f64], n: usize| {
            if v.len() == n {
                Ok(())
            } else {
                Err(format!("state {index}: {field} has {} values, expected {n}", v.len()))
            }
        };
        expect("head_p", &self.head_p, 3)?;
        expect("head_R", &self.head_r, 9)?;
        expect("gaze", &self.gaze, 3)?;
        if self.joints.len() % 3 != 0 {
            return Err(format!(
                "state {index}: joints has {} values, not a multiple of 3",
                self.joints.len()
            ));
        }
        if self.joints.len() != 3 * NUM_JOINTS {
            return Err(format!(
                "state {index}: joints length {} ≠ {NUM_JOINTS}",
                self.joints.len() / 3
            ));
        }
        let position = Vec3::from_column_slice(&self.head_p);
        let rotation = Mat3::from_row_slice(&self.head_r);
        Ok(VisuomotorState {
            head: Se3Pose::from_parts_unchecked(position, rotation),
            gaze: Vec3::from_column_slice(&self.gaze),
            joints: std::array::from_fn(|j| Vec3::from_column_slice(&self.joints[3 * j..3 * j + 3])),
        })
    }
}

fn to_line(record: &TrajectoryRecord) -> RecordLine {
    RecordLine {
        schema: SCHEMA_VERSION,
        id: record.id.clone(),
        fps: record.fps,
        class_label: record.class_label.clone(),
        states: record.states.iter().map(StateLine::from).collect(),
        valid: record.valid.clone(),
        visual_features: record.visual_features.clone(),
    }
}

fn from_line(line: RecordLine) -> Result<TrajectoryRecord> {
    let fail = |message: String| Error::Validation {
        id: line.id.clone(),
        message,
    };
    if line.schema != SCHEMA_VERSION {
        return Err(fail(format!("unsupported schema {}", line.schema)));
    }
    let mut states = Vec::with_capacity(line.states.len());
    for (i, s) in line.states.into_iter().enumerate() {
        states.push(s.into_state(i).map_err(fail)?);
    }
    let record = TrajectoryRecord {
        id: line.id,
        fps: line.fps,
        class_label: line.class_label,
        states,
        valid: line.valid,
        visual_features: line.visual_features,
    };
    record.validate()?;
    Ok(record)
}

/// Parses one record per non-blank line.
pub fn read_jsonl(reader: impl Read) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(from_line(parsed)?);
    }
    Ok(out)
}

pub fn write_jsonl(records: &[TrajectoryRecord], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, &to_line(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    read_jsonl(File::open(path)?)
}

pub fn save_jsonl(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_jsonl(records, File::create(path)?)
}
