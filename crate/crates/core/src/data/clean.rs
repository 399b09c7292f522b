use super::TrajectoryRecord;
use crate::kinematics::{slerp, Se3Pose, VisuomotorState};
use crate::{Error, Result};

fn interpolate(a: &VisuomotorState, b: &VisuomotorState, t: f64) -> VisuomotorState {
    let lerp = |x: &crate::Vec3, y: &crate::Vec3| x + (y - x) * t;
    let rotation = slerp(&a.head.rotation(), &b.head.rotation(), t);
    VisuomotorState {
        head: Se3Pose::from_parts_unchecked(lerp(&a.head.position(), &b.head.position()), rotation),
        gaze: lerp(&a.gaze, &b.gaze),
        joints: std::array::from_fn(|j| lerp(&a.joints[j], &b.joints[j])),
    }
}

/// Fills runs of at most `max_gap` invalid states that have valid neighbours
/// on both sides. Positions are interpolated linearly and the head rotation
/// along the shortest arc. Everything else is left as it was.
pub fn clean_impute(record: &TrajectoryRecord, max_gap: usize) -> Result<TrajectoryRecord> {
    if max_gap == 0 {
        return Err(Error::invalid("max_gap must be at least 1"));
    }
    let mut out = record.clone();
    let n = record.len();
    let mut i = 0;
    while i < n {
        if record.valid[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && !record.valid[i] {
            i += 1;
        }
        let end = i; // exclusive
        let run = end - start;
        if start == 0 || end == n || run > max_gap {
            continue;
        }
        let (left, right) = (start - 1, end);
        let (a, b) = (&record.states[left], &record.states[right]);
        let span = (right - left) as f64;
        for k in start..end {
            out.states[k] = interpolate(a, b, (k - left) as f64 / span);
            out.valid[k] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{axis_angle, rotation_geodesic_angle, Vec3};

    fn state(p: Vec3, angle: f64) -> VisuomotorState {
        let head = Se3Pose::new(p, axis_angle(&Vec3::z(), angle)).unwrap();
        VisuomotorState {
            head,
            gaze: p + Vec3::new(0.0, 0.0, 1.0),
            joints: [p + Vec3::new(0.1, 0.0, 0.0); 6],
        }
    }

    fn record(valid: Vec<bool>) -> TrajectoryRecord {
        let states = (0..valid.len())
            .map(|i| state(Vec3::new(i as f64, 0.0, 0.0), 10.0 * i as f64))
            .collect();
        TrajectoryRecord {
            id: "r".into(),
            fps: 10.0,
            class_label: "c".into(),
            states,
            valid,
            visual_features: None,
        }
    }

    #[test]
    fn all_valid_unchanged() {
        let r = record(vec![true; 8]);
        assert_eq!(clean_impute(&r, 3).unwrap(), r);
    }

    #[test]
    fn single_gap_midpoint() {
        let mut r = record(vec![true, false, true]);
        r.states[1] = state(Vec3::new(50.0, 50.0, 50.0), 170.0); // garbage
        r.states[2] = state(Vec3::new(2.0, 4.0, 0.0), 60.0);
        let out = clean_impute(&r, 1).unwrap();
        assert!(out.valid.iter().all(|&v| v));
        let mid = &out.states[1];
        assert!((mid.head.position() - Vec3::new(1.0, 2.0, 0.0)).norm() < 1e-12);
        let ra = r.states[0].head.rotation();
        let rb = r.states[2].head.rotation();
        let half = rotation_geodesic_angle(&ra, &rb) / 2.0;
        assert!((rotation_geodesic_angle(&ra, &mid.head.rotation()) - half).abs() < 1e-9);
        assert!((rotation_geodesic_angle(&mid.head.rotation(), &rb) - half).abs() < 1e-9);
    }

    #[test]
    fn gap_longer_than_max_stays_masked() {
        let max_gap = 3;
        let mut valid = vec![true; 10];
        for v in valid.iter_mut().skip(2).take(max_gap + 1) {
            *v = false;
        }
        let r = record(valid.clone());
        let out = clean_impute(&r, max_gap).unwrap();
        assert_eq!(out.valid, valid);
        // exactly max_gap is filled
        let mut valid = vec![true; 10];
        for v in valid.iter_mut().skip(2).take(max_gap) {
            *v = false;
        }
        let out = clean_impute(&record(valid), max_gap).unwrap();
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn edges_are_not_extrapolated() {
        let r = record(vec![false, true, true, false]);
        assert_eq!(clean_impute(&r, 5).unwrap().valid, vec![false, true, true, false]);
    }

    #[test]
    fn idempotent() {
        let r = record(vec![false, true, false, false, true, false, false, false, false, true, false]);
        let once = clean_impute(&r, 2).unwrap();
        assert_eq!(clean_impute(&once, 2).unwrap(), once);
    }

    #[test]
    fn zero_gap_rejected() {
        assert!(clean_impute(&record(vec![true]), 0).is_err());
    }
}
