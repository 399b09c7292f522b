//! End-to-end acceptance criteria A1-A9. Runs as a plain binary so that every
//! criterion prints exactly one PASS/FAIL line, and exits non-zero if any fail.

use std::time::{Duration, Instant};

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vcr_core::baselines::{constant_pose, constant_velocity};
use vcr_core::data::slice_windows;
use vcr_core::diffusion::{forward_sample, DiffusionConfig, DiffusionModel, ScheduleConfig};
use vcr_core::forecast::{
    baseline, build_benchmark, evaluate_forecaster, BenchmarkConfig, Model, ModelKind, TrainedModel,
};
use vcr_core::kinematics::{canonicalize_sequence, rotation_geodesic_angle, NUM_JOINTS};
use vcr_core::metrics::{pa_mpjpe, position_errors, EvalReport};
use vcr_core::numerics::gradcheck::{check_coordinates, sample_coordinates};
use vcr_core::target::TargetNormalizer;
use vcr_core::training::TrainConfig;
use vcr_core::{Mat3, Se3Pose, StateWindow, Tensor, TrajectoryRecord, Vec3, VisuomotorState, WindowConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng)) * scale
}

fn random_state(rng: &mut impl Rng) -> VisuomotorState {
    let head = Se3Pose::from_parts_unchecked(random_vec(rng, 1.0), random_rotation(rng));
    VisuomotorState {
        head,
        gaze: random_vec(rng, 1.0),
        joints: std::array::from_fn(|_| random_vec(rng, 1.0)),
    }
}

// ---------------------------------------------------------------- A1

/// Mean distance after aligning `x` onto `y` with rotation `r` and centroids.
fn aligned_mean_distance(x: &[Vec3], y: &[Vec3], r: &Mat3) -> (f64, f64) {
    let n = x.len() as f64;
    let cx = x.iter().sum::<Vec3>() / n;
    let cy = y.iter().sum::<Vec3>() / n;
    let mut sse = 0.0;
    let mut mean = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = (r * (a - cx) - (b - cy)).norm();
        sse += d * d;
        mean += d;
    }
    (sse, mean / n)
}

/// Brute-force search over rotations: a dense random cover of SO(3) followed
/// by shrinking local perturbations around the best candidate.
fn rotation_search_oracle(x: &[Vec3], y: &[Vec3], rng: &mut impl Rng) -> f64 {
    let mut best = Mat3::identity();
    let mut best_sse = aligned_mean_distance(x, y, &best).0;
    for _ in 0..20_000 {
        let r = random_rotation(rng);
        let sse = aligned_mean_distance(x, y, &r).0;
        if sse < best_sse {
            best = r;
            best_sse = sse;
        }
    }
    let mut radius = 0.1;
    while radius > 1e-10 {
        let mut improved = false;
        for _ in 0..60 {
            let axis = random_vec(rng, 1.0).normalize();
            let step = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), radius * rng.random::<f64>());
            let r = step.into_inner() * best;
            let sse = aligned_mean_distance(x, y, &r).0;
            if sse < best_sse {
                best = r;
                best_sse = sse;
                improved = true;
            }
        }
        if !improved {
            radius *= 0.5;
        }
    }
    aligned_mean_distance(x, y, &best).1
}

fn state_from_points(points: &[Vec3]) -> VisuomotorState {
    VisuomotorState {
        head: Se3Pose::from_parts_unchecked(points[0], Mat3::identity()),
        gaze: points[1],
        joints: std::array::from_fn(|j| points[2 + j]),
    }
}

fn a1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_oracle: f64 = 0.0;
    let mut worst_rigid: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<Vec3> = (0..2 + NUM_JOINTS).map(|_| random_vec(&mut rng, 0.5)).collect();
        let r = random_rotation(&mut rng);
        let t = random_vec(&mut rng, 1.0);
        let noisy: Vec<Vec3> = x.iter().map(|p| r * p + t + random_vec(&mut rng, 0.05)).collect();
        let rigid: Vec<Vec3> = x.iter().map(|p| r * p + t).collect();

        let (pred, gt) = (state_from_points(&x), state_from_points(&noisy));
        let got = pa_mpjpe(&pred, &gt);
        let oracle = 1000.0 * rotation_search_oracle(&x, &noisy, &mut rng);
        worst_oracle = worst_oracle.max((got - oracle).abs());
        worst_rigid = worst_rigid.max(pa_mpjpe(&pred, &state_from_points(&rigid)));
    }
    outcome(
        worst_oracle < 1e-3 && worst_rigid < 1e-6,
        format!("max |pa_mpjpe - oracle| = {worst_oracle:.2e} mm (< 1e-3), rigid copies max {worst_rigid:.2e} mm (< 1e-6)"),
    )
}

// ---------------------------------------------------------------- A2

fn state_distance(a: &VisuomotorState, b: &VisuomotorState) -> f64 {
    let points = a
        .points()
        .iter()
        .zip(b.points().iter())
        .map(|(p, q)| (p - q).amax())
        .fold(0.0, f64::max);
    points.max((a.head.rotation() - b.head.rotation()).amax())
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut worst_anchor: f64 = 0.0;
    for _ in 0..100 {
        let seq: Vec<VisuomotorState> = (0..20).map(|_| random_state(&mut rng)).collect();
        let g = Se3Pose::from_parts_unchecked(random_vec(&mut rng, 3.0), random_rotation(&mut rng));
        let moved: Vec<VisuomotorState> = seq.iter().map(|s| s.transformed(&g)).collect();
        let anchor = rng.random_range(0..20);
        let a = canonicalize_sequence(&seq, anchor).unwrap();
        let b = canonicalize_sequence(&moved, anchor).unwrap();
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max(state_distance(p, q));
        }
        let h = &a[anchor].head;
        worst_anchor = worst_anchor
            .max(h.position().amax())
            .max((h.rotation() - Mat3::identity()).amax());
    }
    outcome(
        worst < 1e-6 && worst_anchor < 1e-6,
        format!("max elementwise difference {worst:.2e}, anchor deviation from identity {worst_anchor:.2e} (both < 1e-6)"),
    )
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let draws = 100_000;
    let dim = 300;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..5 {
        let x0: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let k = rng.random_range(0..schedule.steps());
        let ab = schedule.alpha_bar()[k];
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut eps = vec![0.0; dim];
        for _ in 0..draws {
            eps.iter_mut().for_each(|e| *e = normal(&mut rng));
            let xk = forward_sample(&x0, k, &eps, &schedule).unwrap();
            for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(&xk) {
                *s += v;
                *q += v * v;
            }
        }
        let n = draws as f64;
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        let mut var = 0.0;
        for i in 0..dim {
            let mean = sum[i] / n;
            let expected = ab.sqrt() * x0[i];
            err2 += (mean - expected).powi(2);
            norm2 += expected * expected;
            var += (sq[i] / n - mean * mean) * n / (n - 1.0);
        }
        worst_mean = worst_mean.max((err2 / norm2).sqrt());
        worst_var = worst_var.max((var / dim as f64 / (1.0 - ab) - 1.0).abs());
    }
    outcome(
        worst_mean < 0.01 && worst_var < 0.01,
        format!(
            "5 (x0, k) pairs x 1e5 draws: mean rel. error {:.3}%, variance rel. error {:.3}% (both < 1%)",
            100.0 * worst_mean,
            100.0 * worst_var
        ),
    )
}

// ---------------------------------------------------------------- A4

fn a4(bench: &[StateWindow]) -> Outcome {
    let model = DiffusionModel::new(DiffusionConfig::default()).unwrap();
    let mut store = vcr_core::ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    model.init(&mut store, &mut rng);
    let refs: Vec<&StateWindow> = bench.iter().take(3).collect();
    let norm = TargetNormalizer::fit_with(bench, model.config().principal_axes).unwrap();
    let x0 = norm.encode_batch(&refs).unwrap();
    let steps: Vec<usize> = refs.iter().map(|_| rng.random_range(0..model.schedule().steps())).collect();
    let eps = Tensor::new(x0.shape().to_vec(), (0..x0.len()).map(|_| normal(&mut rng)).collect()).unwrap();
    let (g, loss) = model.loss_graph(&store, &refs, &x0, &steps, &eps).unwrap();
    let grads = g.backward(loss).unwrap();
    let coords = sample_coordinates(&store, 24, &mut rng);
    let encoder_coords = coords.iter().filter(|(n, _)| n.contains(".encoder.")).count();
    let probes = check_coordinates(&mut store, &grads, &coords, 1e-5, |s| {
        let (g, l) = model.loss_graph(s, &refs, &x0, &steps, &eps)?;
        Ok(g.value(l).data()[0])
    })
    .unwrap();
    let worst = probes.iter().map(|p| p.relative_error(1e-6)).fold(0.0, f64::max);
    outcome(
        worst < 1e-4 && probes.len() >= 20,
        format!(
            "{} coordinates ({encoder_coords} in the encoder): max relative error {worst:.2e} (< 1e-4)",
            probes.len()
        ),
    )
}

// ---------------------------------------------------------------- A5, A6

struct Benchmarked {
    baseline_pose: EvalReport,
    baseline_velocity: EvalReport,
    regression: EvalReport,
    diffusion: EvalReport,
    train_time: Duration,
}

fn train_and_evaluate(kind: ModelKind, bench: &vcr_core::forecast::Benchmark) -> EvalReport {
    let model = Model::from_config(kind, &serde_json::Value::Null).unwrap();
    let cfg = TrainConfig {
        seed: 42,
        ..Default::default()
    };
    let mut tm = TrainedModel::initialize(model, &bench.train, WindowConfig::default(), cfg).unwrap();
    tm.train(&bench.train, &cfg).unwrap();
    evaluate_forecaster(&tm, &bench.test).unwrap()
}

fn run_benchmark(bench: &vcr_core::forecast::Benchmark) -> Benchmarked {
    let start = Instant::now();
    let baseline_pose = evaluate_forecaster(&*baseline("constant_pose").unwrap(), &bench.test).unwrap();
    let baseline_velocity = evaluate_forecaster(&*baseline("constant_velocity").unwrap(), &bench.test).unwrap();
    let regression = train_and_evaluate(ModelKind::Regression, bench);
    let diffusion = train_and_evaluate(ModelKind::Diffusion, bench);
    Benchmarked {
        baseline_pose,
        baseline_velocity,
        regression,
        diffusion,
        train_time: start.elapsed(),
    }
}

fn a5(b: &Benchmarked) -> Outcome {
    let hand = |r: &EvalReport| r.mean.hand_pos;
    let (cp, cv, reg, diff) = (hand(&b.baseline_pose), hand(&b.baseline_velocity), hand(&b.regression), hand(&b.diffusion));
    let pass = diff <= 0.8 * cv && diff <= 0.9 * cp && reg < cp && reg < cv && b.train_time < Duration::from_secs(20 * 60);
    outcome(
        pass,
        format!(
            "hand error mm: diffusion {diff:.1} ({:+.1}% vs constant_velocity {cv:.1}, {:+.1}% vs constant_pose {cp:.1}), regression {reg:.1}; {:.0} s",
            100.0 * (diff / cv - 1.0),
            100.0 * (diff / cp - 1.0),
            b.train_time.as_secs_f64()
        ),
    )
}

fn a6(b: &Benchmarked) -> Outcome {
    let steps = &b.diffusion.per_step;
    let (first, last) = (steps[0].head_pos, steps[steps.len() - 1].head_pos);
    outcome(
        last > first,
        format!("diffusion head error step 1 {first:.1} mm < step {} {last:.1} mm", steps.len()),
    )
}

// ---------------------------------------------------------------- A7

fn record(id: &str, states: Vec<VisuomotorState>) -> TrajectoryRecord {
    TrajectoryRecord {
        id: id.into(),
        fps: 10.0,
        class_label: "synthetic".into(),
        valid: vec![true; states.len()],
        states,
        visual_features: None,
    }
}

fn max_position_error(windows: &[StateWindow], forecast: impl Fn(&[VisuomotorState]) -> Vec<VisuomotorState>) -> f64 {
    let mut worst: f64 = 0.0;
    for w in windows {
        for (p, t) in forecast(&w.observed).iter().zip(&w.future) {
            let (h, g, hand) = position_errors(p, t);
            let joints = p.joints.iter().zip(&t.joints).map(|(a, b)| 1000.0 * (a - b).norm()).fold(0.0, f64::max);
            worst = worst.max(h).max(g).max(hand).max(joints);
        }
    }
    worst / 1000.0
}

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let cfg = WindowConfig::default();
    let (mut linear, mut still) = (Vec::new(), Vec::new());
    for i in 0..20 {
        let start = random_state(&mut rng);
        let velocity: Vec<Vec3> = (0..2 + NUM_JOINTS).map(|_| random_vec(&mut rng, 0.02)).collect();
        let axis = nalgebra::Unit::new_normalize(random_vec(&mut rng, 1.0));
        let step = nalgebra::Rotation3::from_axis_angle(&axis, 0.05 * normal(&mut rng)).into_inner();
        let mut rotation = start.head.rotation();
        let states: Vec<VisuomotorState> = (0..40)
            .map(|t| {
                let tf = t as f64;
                let s = VisuomotorState {
                    head: Se3Pose::from_parts_unchecked(start.head.position() + tf * velocity[0], rotation),
                    gaze: start.gaze + tf * velocity[1],
                    joints: std::array::from_fn(|j| start.joints[j] + tf * velocity[2 + j]),
                };
                rotation = step * rotation;
                s
            })
            .collect();
        linear.extend(slice_windows(&record(&format!("lin-{i}"), states), &cfg).unwrap());
        still.extend(slice_windows(&record(&format!("still-{i}"), vec![start; 40]), &cfg).unwrap());
    }
    let cv = max_position_error(&linear, |o| constant_velocity(o, 10).unwrap());
    let cp = max_position_error(&still, |o| constant_pose(o, 10).unwrap());
    let rot = linear
        .iter()
        .flat_map(|w| {
            let f = constant_velocity(&w.observed, 10).unwrap();
            f.iter().zip(&w.future).map(|(p, t)| rotation_geodesic_angle(&p.head.rotation(), &t.head.rotation())).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    outcome(
        cv < 1e-9 && cp < 1e-9,
        format!(
            "{} linear windows: constant_velocity max error {cv:.1e} m (rotation {rot:.1e} deg); {} static windows: constant_pose {cp:.1e} m (< 1e-9)",
            linear.len(),
            still.len()
        ),
    )
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let states: Vec<VisuomotorState> = (0..100).map(|_| random_state(&mut rng)).collect();
    let cfg = WindowConfig {
        observed: 10,
        future: 10,
        stride: 10,
    };
    let starts = |masked: &[usize]| {
        let mut r = record("a8", states.clone());
        for &m in masked {
            r.valid[m] = false;
        }
        slice_windows(&r, &cfg).unwrap().iter().map(|w| w.start).collect::<Vec<_>>()
    };
    // Each window covers [start, start + 20); a masked step drops every window containing it.
    let cases: [(&[usize], Vec<usize>); 4] = [
        (&[], vec![0, 10, 20, 30, 40, 50, 60, 70, 80]),
        (&[35], vec![0, 10, 40, 50, 60, 70, 80]),
        (&[0, 99], vec![10, 20, 30, 40, 50, 60, 70]),
        (&[19, 20], vec![30, 40, 50, 60, 70, 80]),
    ];
    let mut failures = Vec::new();
    for (masked, expected) in &cases {
        let got = starts(masked);
        if &got != expected {
            failures.push(format!("mask {masked:?}: got {got:?}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("length 100, window 20, stride 10 -> 9 windows; {} masked fixtures drop exactly the overlapping windows", cases.len() - 1)
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    let bench = build_benchmark(&BenchmarkConfig {
        train_windows: 64,
        test_windows: 32,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 9,
        ..Default::default()
    };
    let model_cfg = serde_json::json!({"encoder": {"latent_dim": 16, "n_heads": 2}, "denoiser": {"hidden": [64, 64]}});
    let mut runs = Vec::new();
    for run in ["first", "second"] {
        let model = Model::from_config(ModelKind::Diffusion, &model_cfg).unwrap();
        let mut tm = TrainedModel::initialize(model, &bench.train, WindowConfig::default(), cfg).unwrap();
        tm.train(&bench.train, &cfg).unwrap();
        let path = dir.path().join(run).join("model.json");
        tm.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        let report = evaluate_forecaster(&loaded, &bench.test).unwrap();
        runs.push((
            std::fs::read(&path).unwrap(),
            std::fs::read(vcr_core::numerics::params::blob_path(&path)).unwrap(),
            report.to_csv(),
            report.to_json().unwrap(),
        ));
    }
    let same = runs[0] == runs[1];
    outcome(
        same,
        format!(
            "two seeded train+evaluate runs: checkpoint manifest, weights ({} bytes), CSV and JSON reports {}",
            runs[0].1.len(),
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let mut all_pass = true;
    let mut report = |id: &str, title: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        all_pass &= o.pass;
        println!(
            "{id} {} {title}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report("A1", "Procrustes correctness", &mut a1);
    report("A2", "canonicalization invariance", &mut a2);
    report("A3", "forward-process statistics", &mut a3);
    let bench = build_benchmark(&BenchmarkConfig::default()).unwrap();
    report("A4", "gradient fidelity", &mut || a4(&bench.train));
    let results = run_benchmark(&bench);
    report("A5", "relative ordering on the synthetic benchmark", &mut || a5(&results));
    report("A6", "per-step error growth", &mut || a6(&results));
    report("A7", "naive-baseline exactness", &mut a7);
    report("A8", "windowing arithmetic", &mut a8);
    report("A9", "determinism", &mut a9);
    if !all_pass {
        std::process::exit(1);
    }
}
