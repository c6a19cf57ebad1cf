//! Python bindings: simulate datasets, run the estimator and score results.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lio::config::RunConfig;
use lio::estimator::{EstimatorConfig, ExtrinsicState};
use lio::eval::{evaluate as eval_metrics, Metrics, TrajectoryRecord};
use lio::io::{load_trajectory, write_scenario};
use lio::pipeline::{run_pipeline, run_sequence, RunOutput};
use lio::se3::quat_from_euler;
use lio::sim::{make_scenario, NoiseLevel, Scenario, ScenarioOptions};

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn noise_level(noise: &str) -> PyResult<NoiseLevel> {
    match noise {
        "noiseless" => Ok(NoiseLevel::Noiseless),
        "realistic" => Ok(NoiseLevel::Realistic),
        other => Err(PyValueError::new_err(format!("noise must be 'noiseless' or 'realistic', got {other:?}"))),
    }
}

fn build_scenario(name: &str, seed: u64, noise: &str, duration: Option<f64>, miscalibrated: bool) -> PyResult<Scenario> {
    let mut opts = ScenarioOptions { noise: noise_level(noise)?, duration, ..Default::default() };
    if miscalibrated {
        let (a, b) = (1f64.to_radians(), 2f64.to_radians());
        opts.extrinsic = ExtrinsicState { lever_arm: Vector3::repeat(0.05), rotation: quat_from_euler(a, a, b) };
        opts.td = 0.005;
    }
    make_scenario(name, seed, &opts).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ate_m", m.ate)?;
    d.set_item("are_deg", m.are)?;
    d.set_item("end_to_end_m", m.end_to_end)?;
    d.set_item("distance_m", m.distance)?;
    d.set_item("poses", m.poses)?;
    Ok(d)
}

/// `(t, px, py, pz, qw, qx, qy, qz)` rows.
fn trajectory_rows(traj: &[TrajectoryRecord]) -> Vec<[f64; 8]> {
    traj.iter()
        .map(|r| {
            let q = r.q.quaternion();
            [r.t, r.p.x, r.p.y, r.p.z, q.w, q.i, q.j, q.k]
        })
        .collect()
}

fn run_dict<'py>(py: Python<'py>, run: &RunOutput, metrics: Option<&Metrics>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("frames", run.frames)?;
    d.set_item("keyframes", run.keyframes)?;
    d.set_item("skipped", run.skipped)?;
    d.set_item("frame_errors", run.errors)?;
    d.set_item("associations", run.associations)?;
    d.set_item("culled", run.culled)?;
    d.set_item("lidar_rms", run.lidar_rms())?;
    d.set_item("failure", run.failure.clone())?;
    d.set_item("trajectory", trajectory_rows(&run.trajectory))?;
    let calibration: Vec<[f64; 8]> = run
        .calibration
        .iter()
        .map(|c| {
            let e = c.euler_deg();
            let l = c.extrinsic.lever_arm;
            [c.t, e.x, e.y, e.z, l.x, l.y, l.z, c.td * 1e3]
        })
        .collect();
    d.set_item("calibration", calibration)?;
    let attitude_std: Vec<[f64; 4]> = run.attitude_std.iter().map(|(t, s)| [*t, s.x, s.y, s.z]).collect();
    d.set_item("attitude_std", attitude_std)?;
    match metrics {
        Some(m) => d.set_item("metrics", metrics_dict(py, m)?)?,
        None => d.set_item("metrics", py.None())?,
    }
    Ok(d)
}

/// Writes a simulated dataset and its `run.cfg` into `output`; returns the
/// config path. With `miscalibrated`, the data carry a (1, 1, 2) deg, 5 cm,
/// 5 ms LiDAR-IMU offset while the config starts from identity.
#[pyfunction]
#[pyo3(signature = (scenario, seed, output, noise = "noiseless", duration = None, miscalibrated = false))]
fn simulate(
    scenario: &str,
    seed: u64,
    output: PathBuf,
    noise: &str,
    duration: Option<f64>,
    miscalibrated: bool,
) -> PyResult<PathBuf> {
    let sc = build_scenario(scenario, seed, noise, duration, miscalibrated)?;
    write_scenario(&sc, &output, &ExtrinsicState::default(), 0.0).map_err(runtime_err)?;
    Ok(output.join("run.cfg"))
}

/// Runs the estimator on the dataset named by a config file and writes the
/// result files. Returns counters, per-keyframe outputs and metrics.
#[pyfunction]
fn run(py: Python<'_>, config: PathBuf) -> PyResult<Bound<'_, PyDict>> {
    let cfg = RunConfig::load(&config).map_err(|e| runtime_err(format!("{e:#}")))?;
    let summary = py.detach(|| run_pipeline(&cfg)).map_err(|e| runtime_err(format!("{e:#}")))?;
    run_dict(py, &summary.run, summary.metrics.as_ref())
}

/// Simulates a scenario and runs the estimator in memory. `calibrate` turns
/// online extrinsic and delay estimation on; the estimator starts from the
/// identity extrinsic and zero delay.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 1, noise = "realistic", duration = None, miscalibrated = false, calibrate = true))]
fn run_scenario<'py>(
    py: Python<'py>,
    scenario: &str,
    seed: u64,
    noise: &str,
    duration: Option<f64>,
    miscalibrated: bool,
    calibrate: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let sc = build_scenario(scenario, seed, noise, duration, miscalibrated)?;
    let cfg = EstimatorConfig { calibrate, ..Default::default() };
    let (run, metrics) = py.detach(|| {
        let run = run_sequence(cfg, &sc.imu, &sc.frames);
        let truth: Vec<TrajectoryRecord> = sc.truth.iter().map(|s| TrajectoryRecord::new(s.t, s.p, s.q)).collect();
        let metrics = eval_metrics(&run.trajectory, &truth).ok();
        (run, metrics)
    });
    run_dict(py, &run, metrics.as_ref())
}

/// ATE, ARE and end-to-end error of an estimated trajectory file against a
/// truth file.
#[pyfunction]
fn evaluate(py: Python<'_>, estimate: PathBuf, truth: PathBuf) -> PyResult<Bound<'_, PyDict>> {
    let est = load_trajectory(&estimate).map_err(runtime_err)?;
    let gt = load_trajectory(&truth).map_err(runtime_err)?;
    let m = eval_metrics(&est, &gt).map_err(runtime_err)?;
    metrics_dict(py, &m)
}

#[pymodule]
pub fn f2f_lio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCENARIOS", lio::sim::SCENARIOS.to_vec())?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
