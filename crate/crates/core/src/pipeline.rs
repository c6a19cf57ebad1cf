//! Feeds IMU and LiDAR streams through the estimator in time order.

use std::fmt::Write as _;

use anyhow::Context;
use log::{error, info, warn};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::estimator::{Estimator, EstimatorConfig, EstimatorError, ExtrinsicState, FrameKind};
use crate::eval::{evaluate, Metrics, TrajectoryRecord};
use crate::io;
use crate::ins::ImuSample;
use crate::pointcloud::LidarFrame;
use crate::se3::euler_from_quat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub t: f64,
    pub extrinsic: ExtrinsicState,
    pub td: f64,
}

impl CalibrationRecord {
    /// Rotation as ZYX Euler angles in degrees.
    pub fn euler_deg(&self) -> Vector3<f64> {
        euler_from_quat(&self.extrinsic.rotation).map(f64::to_degrees)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Newest optimized IMU pose per keyframe.
    pub trajectory: Vec<TrajectoryRecord>,
    /// `(t, roll, pitch, yaw)` standard deviations, deg.
    pub attitude_std: Vec<(f64, Vector3<f64>)>,
    pub calibration: Vec<CalibrationRecord>,
    pub keyframes: usize,
    pub frames: usize,
    pub skipped: usize,
    pub associations: usize,
    pub culled: usize,
    /// Frames dropped after a recoverable estimator error.
    pub errors: usize,
    /// Squared whitened LiDAR residuals summed over every keyframe solve.
    pub lidar_chi2: f64,
    pub lidar_factors: usize,
    /// Error that stopped the run early, if any.
    pub failure: Option<String>,
}

impl RunOutput {
    /// RMS of the whitened LiDAR residuals over all keyframe solves.
    pub fn lidar_rms(&self) -> f64 {
        if self.lidar_factors == 0 {
            return 0.0;
        }
        (self.lidar_chi2 / self.lidar_factors as f64).sqrt()
    }
}

/// Extra IMU look-ahead pushed before each frame, s.
const IMU_LEAD: f64 = 0.02;

/// Runs `frames` through `est`, pushing IMU samples up to each frame's end.
/// Frame-level errors skip the frame; any other error is logged, recorded in
/// `failure` and ends the run with the output gathered so far.
pub fn run_with(est: &mut Estimator, imu: &[ImuSample], frames: &[LidarFrame]) -> RunOutput {
    let mut out = RunOutput::default();
    if let Err(e) = run_into(est, imu, frames, &mut out) {
        error!("run stopped: {e}");
        out.failure = Some(e.to_string());
    }
    out
}

fn run_into(est: &mut Estimator, imu: &[ImuSample], frames: &[LidarFrame], out: &mut RunOutput) -> Result<(), EstimatorError> {
    let mut next = 0;
    for frame in frames {
        let td = est.window().td;
        let needed = frame.stamp + frame.max_offset().max(0.0) + td.max(0.0) + IMU_LEAD;
        while next < imu.len() && imu[next].t <= needed {
            est.push_imu(imu[next])?;
            next += 1;
        }
        if next >= imu.len() && est.imu_time().is_some_and(|t| t < frame.stamp + frame.max_offset() + td) {
            break;
        }
        out.frames += 1;
        let res = match est.process_frame(frame) {
            Ok(r) => r,
            Err(e @ (EstimatorError::EmptyFrame(_) | EstimatorError::Cloud(_) | EstimatorError::ImuBehind { .. })) => {
                warn!("frame {:.3} skipped: {e}", frame.stamp);
                out.errors += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match res.kind {
            FrameKind::Skipped => out.skipped += 1,
            FrameKind::NonKeyframe => {}
            FrameKind::Keyframe => {
                out.keyframes += 1;
                out.associations += res.associations;
                out.culled += res.culled;
                out.lidar_chi2 += res.lidar_chi2.0;
                out.lidar_factors += res.lidar_chi2.1;
                let s = res.state.expect("keyframe output carries a state");
                out.trajectory.push(TrajectoryRecord::new(res.t, s.p, s.q));
                if let Some(std) = res.attitude_std {
                    out.attitude_std.push((res.t, std));
                }
                out.calibration.push(CalibrationRecord { t: res.t, extrinsic: res.extrinsic, td: res.td });
            }
        }
    }
    Ok(())
}

pub fn run_sequence(cfg: EstimatorConfig, imu: &[ImuSample], frames: &[LidarFrame]) -> RunOutput {
    let mut est = Estimator::new(cfg);
    run_with(&mut est, imu, frames)
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub run: RunOutput,
    /// Present when the config names a truth trajectory.
    pub metrics: Option<Metrics>,
}

pub fn format_metrics(s: &PipelineSummary) -> String {
    let r = &s.run;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
    kv("frames", r.frames.to_string());
    kv("keyframes", r.keyframes.to_string());
    kv("skipped", r.skipped.to_string());
    kv("frame_errors", r.errors.to_string());
    kv("associations", r.associations.to_string());
    kv("culled", r.culled.to_string());
    kv("lidar_rms", r.lidar_rms().to_string());
    if let Some(m) = &s.metrics {
        kv("ate_m", m.ate.to_string());
        kv("are_deg", m.are.to_string());
        kv("end_to_end_m", m.end_to_end.to_string());
        kv("distance_m", m.distance.to_string());
        kv("poses", m.poses.to_string());
    }
    if let Some(f) = &r.failure {
        kv("failure", f.clone());
    }
    out
}

/// Loads the inputs named by `cfg`, runs the estimator and writes
/// `trajectory.txt`, `attitude_std.txt`, `calibration.txt` and `metrics.txt`
/// into the output directory. Nothing is written unless every input loads.
pub fn run_pipeline(cfg: &RunConfig) -> anyhow::Result<PipelineSummary> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let imu = io::load_imu(&cfg.imu)?;
    let frames = io::load_lidar(&cfg.lidar, cfg.lidar_period)?;
    let truth = cfg.truth.as_deref().map(io::load_trajectory).transpose()?;
    info!("{} IMU samples, {} frames", imu.len(), frames.len());

    let run = run_sequence(cfg.estimator(), &imu, &frames);
    let metrics = match &truth {
        Some(t) => match evaluate(&run.trajectory, t) {
            Ok(m) => Some(m),
            Err(e) => {
                warn!("no metrics: {e}");
                None
            }
        },
        None => None,
    };
    let summary = PipelineSummary { run, metrics };

    let dir = &cfg.output;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let r = &summary.run;
    io::write_trajectory(&dir.join("trajectory.txt"), &r.trajectory)?;
    io::write_text(&dir.join("attitude_std.txt"), &io::format_attitude_std(&r.attitude_std))?;
    io::write_text(&dir.join("calibration.txt"), &io::format_calibration(&r.calibration))?;
    io::write_text(&dir.join("metrics.txt"), &format_metrics(&summary))?;
    Ok(summary)
}
