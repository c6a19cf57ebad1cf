//! Plain-text dataset and result formats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Quaternion, Vector3};
use thiserror::Error;

use crate::config::RunConfig;
use crate::estimator::ExtrinsicState;
use crate::eval::TrajectoryRecord;
use crate::ins::ImuSample;
use crate::pipeline::CalibrationRecord;
use crate::pointcloud::{LidarFrame, LidarPoint};
use crate::se3::{euler_from_quat, Quat};
use crate::sim::Scenario;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: time {t} does not increase")]
    NonMonotone { path: PathBuf, line: usize, t: f64 },
    #[error("{path}:{line}: t_offset {t_offset} outside the frame period {period}")]
    Offset { path: PathBuf, line: usize, t_offset: f64, period: f64 },
    #[error("{0}: file name is not <stamp_ns>.txt")]
    FrameName(PathBuf),
}

/// Shortest round-trip text, in exponent form for tiny magnitudes.
fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 { format!("{x:e}") } else { format!("{x}") }
}

/// Space-separated row of numbers.
fn row(vals: &[f64]) -> String {
    vals.iter().map(|&v| num(v)).collect::<Vec<_>>().join(" ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Non-empty, non-comment lines as `(line number, numbers)`.
fn numeric_rows(path: &Path, text: &str, width: usize) -> Result<Vec<(usize, Vec<f64>)>, IoError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| IoError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse(format!("bad number {s:?}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != width {
            return Err(parse(format!("expected {width} fields, got {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse("non-finite value".into()));
        }
        rows.push((i + 1, vals));
    }
    Ok(rows)
}

/// Reads `t wx wy wz ax ay az` lines with strictly increasing `t`.
pub fn load_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let text = read_text(path)?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, v) in numeric_rows(path, &text, 7)? {
        if out.last().is_some_and(|s| v[0] <= s.t) {
            return Err(IoError::NonMonotone { path: path.to_path_buf(), line, t: v[0] });
        }
        out.push(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn format_imu(samples: &[ImuSample]) -> String {
    let mut s = String::from("# t wx wy wz ax ay az\n");
    for m in samples {
        let (w, a) = (m.gyro, m.accel);
        writeln!(s, "{}", row(&[m.t, w.x, w.y, w.z, a.x, a.y, a.z])).unwrap();
    }
    s
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    write_text(path, &format_imu(samples))
}

fn frame_stamp(path: &Path) -> Result<f64, IoError> {
    let ns: u64 = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::FrameName(path.to_path_buf()))?;
    Ok(ns as f64 * 1e-9)
}

/// Reads one `t_offset x y z` frame file; offsets must lie in `[0, period)`.
pub fn load_frame(path: &Path, period: f64) -> Result<LidarFrame, IoError> {
    let stamp = frame_stamp(path)?;
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (line, v) in numeric_rows(path, &text, 4)? {
        if !(0.0..period).contains(&v[0]) {
            return Err(IoError::Offset { path: path.to_path_buf(), line, t_offset: v[0], period });
        }
        points.push(LidarPoint::new(v[0], Vector3::new(v[1], v[2], v[3])));
    }
    Ok(LidarFrame::new(stamp, points))
}

/// Loads every `<stamp_ns>.txt` in `dir`, ordered by stamp.
pub fn load_lidar(dir: &Path, period: f64) -> Result<Vec<LidarFrame>, IoError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            paths.push(path);
        }
    }
    // directory order is arbitrary; sort by name first so the order check
    // below reflects the files, not the filesystem
    paths.sort();
    let mut frames = paths.iter().map(|p| load_frame(p, period)).collect::<Result<Vec<_>, _>>()?;
    if frames.windows(2).any(|w| w[1].stamp < w[0].stamp) {
        warn!("{}: frame files out of stamp order, reordering", dir.display());
        frames.sort_by(|a, b| a.stamp.total_cmp(&b.stamp));
    }
    Ok(frames)
}

pub fn format_frame(frame: &LidarFrame) -> String {
    let mut s = String::new();
    for p in &frame.points {
        let x = p.position;
        writeln!(s, "{}", row(&[p.t_offset, x.x, x.y, x.z])).unwrap();
    }
    s
}

pub fn frame_file_name(stamp: f64) -> String {
    // zero-padded so name order is stamp order
    format!("{:019}.txt", (stamp * 1e9).round() as u64)
}

pub fn write_lidar(dir: &Path, frames: &[LidarFrame]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for f in frames {
        write_text(&dir.join(frame_file_name(f.stamp)), &format_frame(f))?;
    }
    Ok(())
}

/// Reads `t px py pz qx qy qz qw` lines.
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let text = read_text(path)?;
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for (line, v) in numeric_rows(path, &text, 8)? {
        if out.last().is_some_and(|r| v[0] <= r.t) {
            return Err(IoError::NonMonotone { path: path.to_path_buf(), line, t: v[0] });
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(IoError::Parse { path: path.to_path_buf(), line, msg: "quaternion is not unit".into() });
        }
        out.push(TrajectoryRecord::new(v[0], Vector3::new(v[1], v[2], v[3]), Quat::from_quaternion(q)));
    }
    Ok(out)
}

pub fn format_trajectory(tr: &[TrajectoryRecord]) -> String {
    let mut s = String::from("# t px py pz qx qy qz qw\n");
    for r in tr {
        let q = r.q.quaternion();
        writeln!(s, "{}", row(&[r.t, r.p.x, r.p.y, r.p.z, q.i, q.j, q.k, q.w])).unwrap();
    }
    s
}

pub fn write_trajectory(path: &Path, tr: &[TrajectoryRecord]) -> Result<(), IoError> {
    write_text(path, &format_trajectory(tr))
}

pub fn format_attitude_std(rows: &[(f64, Vector3<f64>)]) -> String {
    let mut s = String::from("# t roll_std pitch_std yaw_std (deg)\n");
    for (t, v) in rows {
        writeln!(s, "{}", row(&[*t, v.x, v.y, v.z])).unwrap();
    }
    s
}

pub fn format_calibration(rows: &[CalibrationRecord]) -> String {
    let mut s = String::from("# t ex_deg ey_deg ez_deg px py pz td_ms\n");
    for r in rows {
        let e = r.euler_deg();
        let p = r.extrinsic.lever_arm;
        writeln!(s, "{}", row(&[r.t, e.x, e.y, e.z, p.x, p.y, p.z, r.td * 1e3])).unwrap();
    }
    s
}

/// Writes `imu.txt`, `lidar/`, `truth.txt` and a `run.cfg` that runs the
/// dataset with the given initial calibration; returns that config.
pub fn write_scenario(sc: &Scenario, dir: &Path, initial: &ExtrinsicState, initial_td: f64) -> Result<RunConfig, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_imu(&dir.join("imu.txt"), &sc.imu)?;
    write_lidar(&dir.join("lidar"), &sc.frames)?;
    let truth: Vec<_> = sc.truth.iter().map(|s| TrajectoryRecord::new(s.t, s.p, s.q)).collect();
    write_trajectory(&dir.join("truth.txt"), &truth)?;

    let mut cfg = RunConfig::new("imu.txt".into(), "lidar".into(), "result".into());
    cfg.truth = Some("truth.txt".into());
    cfg.lidar_period = 1.0 / sc.rig.lidar_rate;
    cfg.noise = sc.rig.imu_noise.unwrap_or_default();
    cfg.extrinsic = *initial;
    cfg.td = initial_td;
    cfg.seed = sc.seed;
    let e = euler_from_quat(&sc.rig.extrinsic.rotation).map(f64::to_degrees);
    let l = sc.rig.extrinsic.lever_arm;
    let header = format!(
        "# scenario {} seed {}\n# true extrinsic {:.6} {:.6} {:.6} deg, lever {:.6} {:.6} {:.6} m, td {:.6} ms\n",
        sc.name, sc.seed, e.x, e.y, e.z, l.x, l.y, l.z, sc.rig.td * 1e3
    );
    write_text(&dir.join("run.cfg"), &(header + &cfg.to_text()))?;
    cfg.imu = dir.join(&cfg.imu);
    cfg.lidar = dir.join(&cfg.lidar);
    cfg.truth = cfg.truth.map(|t| dir.join(t));
    cfg.output = dir.join(&cfg.output);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_imu_file() {
        let d = tmp();
        let p = d.path().join("imu.txt");
        write_text(&p, "# nothing\n\n").unwrap();
        assert!(load_imu(&p).unwrap().is_empty());
    }

    #[test]
    fn imu_round_trip() {
        let d = tmp();
        let p = d.path().join("imu.txt");
        let samples: Vec<_> = (0..50)
            .map(|k| {
                let t = k as f64 * 0.005 + 0.1;
                ImuSample::new(t, Vector3::new(t.sin(), 1e-7 * t, -0.3), Vector3::new(0.1, -9.80665, t.cos() * 3.0))
            })
            .collect();
        write_imu(&p, &samples).unwrap();
        let back = load_imu(&p).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a.t - b.t).abs() < 1e-9);
            assert!((a.gyro - b.gyro).amax() < 1e-9);
            assert!((a.accel - b.accel).amax() < 1e-9);
        }
    }

    #[test]
    fn duplicated_imu_time_is_rejected() {
        let d = tmp();
        let p = d.path().join("imu.txt");
        write_text(&p, "0.0 0 0 0 0 0 -9.8\n0.005 0 0 0 0 0 -9.8\n0.005 0 0 0 0 0 -9.8\n").unwrap();
        match load_imu(&p) {
            Err(IoError::NonMonotone { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_imu_line_reports_line_number() {
        let d = tmp();
        let p = d.path().join("imu.txt");
        write_text(&p, "# header\n0.0 0 0 0 0 0 -9.8\n0.005 0 0 x 0 0 -9.8\n").unwrap();
        match load_imu(&p) {
            Err(IoError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_frame_with_three_points() {
        let d = tmp();
        write_text(&d.path().join("1500000000.txt"), "0.0 1 2 3\n0.01 4 5 6\n0.02 7 8 9\n").unwrap();
        let frames = load_lidar(d.path(), 0.1).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].points.len(), 3);
        assert!((frames[0].stamp - 1.5).abs() < 1e-12);
    }

    #[test]
    fn offset_beyond_period_is_rejected() {
        let d = tmp();
        write_text(&d.path().join("0.txt"), "0.0 1 2 3\n0.1 4 5 6\n").unwrap();
        assert!(matches!(load_lidar(d.path(), 0.1), Err(IoError::Offset { line: 2, .. })));
    }

    #[test]
    fn frames_are_ordered_by_stamp() {
        let d = tmp();
        // lexical order puts 900000000 after 1000000000
        write_text(&d.path().join("900000000.txt"), "0 1 0 0\n").unwrap();
        write_text(&d.path().join("1000000000.txt"), "0 2 0 0\n").unwrap();
        write_text(&d.path().join("100000000.txt"), "0 3 0 0\n").unwrap();
        let frames = load_lidar(d.path(), 0.1).unwrap();
        let stamps: Vec<f64> = frames.iter().map(|f| f.stamp).collect();
        assert_eq!(stamps, vec![0.1, 0.9, 1.0]);
    }

    #[test]
    fn trajectory_round_trip() {
        let d = tmp();
        let p = d.path().join("traj.txt");
        let tr: Vec<_> = (0..10)
            .map(|k| {
                let t = k as f64 * 0.1;
                TrajectoryRecord::new(t, Vector3::new(t, -t * t, 0.5), crate::se3::quat_from_euler(0.1 * t, -0.2, t))
            })
            .collect();
        write_trajectory(&p, &tr).unwrap();
        let back = load_trajectory(&p).unwrap();
        for (a, b) in tr.iter().zip(&back) {
            assert!((a.p - b.p).amax() < 1e-12);
            assert!(a.q.angle_to(&b.q) < 1e-12);
        }
    }
}
