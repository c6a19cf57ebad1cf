use std::fs;
use std::path::Path;

use f2f_lio::config::RunConfig;
use f2f_lio::estimator::ExtrinsicState;
use f2f_lio::io::{load_imu, load_lidar, read_text, write_scenario};
use f2f_lio::pipeline::run_pipeline;
use f2f_lio::se3::quat_from_euler;
use f2f_lio::sim::{make_scenario, NoiseLevel, Scenario, ScenarioOptions};
use nalgebra::Vector3;

fn scenario(name: &str, duration: f64, noise: NoiseLevel) -> Scenario {
    make_scenario(name, 3, &ScenarioOptions { duration: Some(duration), noise, ..Default::default() }).unwrap()
}

/// `key = value` lookup in a metrics file.
fn metric(dir: &Path, key: &str) -> f64 {
    let text = read_text(&dir.join("metrics.txt")).unwrap();
    let line = text.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap_or_else(|| panic!("no {key}"));
    line.split('=').nth(1).unwrap().trim().parse().unwrap()
}

#[test]
fn simulator_round_trip() {
    let sc = scenario("room-orbit", 3.0, NoiseLevel::Realistic);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(&sc, dir.path(), &ExtrinsicState::default(), 0.0).unwrap();

    let imu = load_imu(&cfg.imu).unwrap();
    assert_eq!(imu.len(), sc.imu.len());
    for (a, b) in sc.imu.iter().zip(&imu) {
        assert!((a.t - b.t).abs() < 1e-9);
        assert!((a.gyro - b.gyro).amax() < 1e-9 && (a.accel - b.accel).amax() < 1e-9);
    }

    let frames = load_lidar(&cfg.lidar, cfg.lidar_period).unwrap();
    assert_eq!(frames.len(), sc.frames.len());
    for (a, b) in sc.frames.iter().zip(&frames) {
        assert!((a.stamp - b.stamp).abs() < 1e-9);
        assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p.t_offset - q.t_offset).abs() < 1e-9);
            assert!((p.position - q.position).amax() < 1e-9);
        }
    }

    let back = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn noiseless_corridor_metrics() {
    let sc = scenario("corridor", 30.0, NoiseLevel::Noiseless);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(&sc, dir.path(), &ExtrinsicState::default(), 0.0).unwrap();
    let summary = run_pipeline(&cfg).unwrap();
    assert!(summary.run.failure.is_none());
    let ate = metric(&cfg.output, "ate_m");
    assert!(ate < 0.01, "ATE {ate}");

    let cal = read_text(&cfg.output.join("calibration.txt")).unwrap();
    assert_eq!(cal.lines().filter(|l| !l.starts_with('#')).count(), summary.run.keyframes);
    let traj = read_text(&cfg.output.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().filter(|l| !l.starts_with('#')).count(), summary.run.keyframes);
}

#[test]
fn calibration_off_keeps_initial_values() {
    let opts = ScenarioOptions {
        duration: Some(10.0),
        extrinsic: ExtrinsicState { lever_arm: Vector3::repeat(0.05), rotation: quat_from_euler(0.02, 0.02, 0.03) },
        td: 0.005,
        ..Default::default()
    };
    let sc = make_scenario("room-orbit", 1, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let initial = ExtrinsicState { lever_arm: Vector3::new(0.01, -0.02, 0.03), rotation: quat_from_euler(0.0, 0.01, 0.0) };
    let mut cfg = write_scenario(&sc, dir.path(), &initial, 0.002).unwrap();
    cfg.calibrate = false;
    run_pipeline(&cfg).unwrap();

    let text = read_text(&cfg.output.join("calibration.txt")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows.len() > 10);
    let tail = |r: &str| r.split_once(' ').unwrap().1.to_string();
    let first = tail(rows[0]);
    assert!(rows.iter().all(|r| tail(r) == first), "calibration changed");
    let vals: Vec<f64> = first.split(' ').map(|v| v.parse().unwrap()).collect();
    assert!((vals[1] - 0.01f64.to_degrees()).abs() < 1e-9);
    assert_eq!(&vals[3..6], &[0.01, -0.02, 0.03]);
    assert!((vals[6] - 2.0).abs() < 1e-12);
}

#[test]
fn missing_imu_file_writes_nothing() {
    let sc = scenario("corridor", 2.0, NoiseLevel::Noiseless);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(&sc, dir.path(), &ExtrinsicState::default(), 0.0).unwrap();
    fs::remove_file(&cfg.imu).unwrap();
    assert!(run_pipeline(&cfg).is_err());
    assert!(!cfg.output.exists());
    assert!(RunConfig::load(&dir.path().join("run.cfg")).is_err());
}

#[test]
fn outputs_are_reproducible() {
    let sc = scenario("room-orbit", 6.0, NoiseLevel::Realistic);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_scenario(&sc, dir.path(), &ExtrinsicState::default(), 0.0).unwrap();
    run_pipeline(&cfg).unwrap();
    let first = cfg.output.clone();
    cfg.output = dir.path().join("again");
    run_pipeline(&cfg).unwrap();
    for f in ["trajectory.txt", "attitude_std.txt", "calibration.txt", "metrics.txt"] {
        assert_eq!(read_text(&first.join(f)).unwrap(), read_text(&cfg.output.join(f)).unwrap(), "{f} differs");
    }
}
