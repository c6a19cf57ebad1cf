//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::estimator::{EstimatorConfig, ExtrinsicState, KeyframePolicy};
use crate::ins::ImuNoise;
use crate::se3::{euler_from_quat, quat_from_euler};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing key {0:?}")]
    Missing(&'static str),
    #[error("{key}: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error("{key}: {path} does not exist")]
    NoSuchPath { key: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub imu: PathBuf,
    /// Directory of `<stamp_ns>.txt` frames.
    pub lidar: PathBuf,
    /// Optional ground-truth trajectory for metrics.
    pub truth: Option<PathBuf>,
    pub output: PathBuf,
    /// LiDAR frame period, s.
    pub lidar_period: f64,
    pub noise: ImuNoise,
    pub policy: KeyframePolicy,
    pub sigma_r: f64,
    /// Initial LiDAR-to-IMU extrinsics.
    pub extrinsic: ExtrinsicState,
    /// Initial time delay, s.
    pub td: f64,
    pub calibrate: bool,
    pub window_size: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(imu: PathBuf, lidar: PathBuf, output: PathBuf) -> Self {
        let est = EstimatorConfig::default();
        Self {
            imu,
            lidar,
            truth: None,
            output,
            lidar_period: 0.1,
            noise: est.noise,
            policy: est.policy,
            sigma_r: est.sigma_r,
            extrinsic: est.extrinsic,
            td: est.td,
            calibrate: est.calibrate,
            window_size: est.window_size,
            seed: 0,
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            noise: self.noise,
            policy: self.policy,
            sigma_r: self.sigma_r,
            extrinsic: self.extrinsic,
            td: self.td,
            calibrate: self.calibrate,
            window_size: self.window_size,
            ..Default::default()
        }
    }

    /// Parses `text`; relative paths are taken from `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::new(PathBuf::new(), PathBuf::new(), PathBuf::new());
        let (mut imu, mut lidar, mut output) = (false, false, false);
        let mut euler = euler_from_quat(&cfg.extrinsic.rotation).map(f64::to_degrees);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| ConfigError::Syntax { line: i + 1, msg: msg.into() };
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |k: &'static str| -> Result<f64, ConfigError> {
                let v: f64 = value.parse().map_err(|_| syntax(&format!("{k}: bad number {value:?}")))?;
                if v.is_finite() { Ok(v) } else { Err(syntax(&format!("{k}: not finite"))) }
            };
            let path = || base.join(value);
            match key {
                "imu" => (cfg.imu, imu) = (path(), true),
                "lidar" => (cfg.lidar, lidar) = (path(), true),
                "truth" => cfg.truth = Some(path()),
                "output" => (cfg.output, output) = (path(), true),
                "lidar_period" => cfg.lidar_period = num("lidar_period")?,
                "gyro_noise" => cfg.noise.gyro_noise = num("gyro_noise")?,
                "accel_noise" => cfg.noise.accel_noise = num("accel_noise")?,
                "gyro_bias_rw" => cfg.noise.gyro_bias_rw = num("gyro_bias_rw")?,
                "accel_bias_rw" => cfg.noise.accel_bias_rw = num("accel_bias_rw")?,
                "keyframe_translation" => cfg.policy.translation = num("keyframe_translation")?,
                "keyframe_rotation_deg" => cfg.policy.rotation = num("keyframe_rotation_deg")?.to_radians(),
                "keyframe_interval" => cfg.policy.max_interval = num("keyframe_interval")?,
                "sigma_r" => cfg.sigma_r = num("sigma_r")?,
                "extrinsic_roll_deg" => euler.x = num("extrinsic_roll_deg")?,
                "extrinsic_pitch_deg" => euler.y = num("extrinsic_pitch_deg")?,
                "extrinsic_yaw_deg" => euler.z = num("extrinsic_yaw_deg")?,
                "lever_x" => cfg.extrinsic.lever_arm.x = num("lever_x")?,
                "lever_y" => cfg.extrinsic.lever_arm.y = num("lever_y")?,
                "lever_z" => cfg.extrinsic.lever_arm.z = num("lever_z")?,
                "td_ms" => cfg.td = num("td_ms")? * 1e-3,
                "calibrate" => {
                    cfg.calibrate = match value {
                        "true" | "on" | "1" => true,
                        "false" | "off" | "0" => false,
                        _ => return Err(syntax("calibrate: expected true or false")),
                    }
                }
                "window_size" => cfg.window_size = value.parse().map_err(|_| syntax("window_size: bad integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| syntax("seed: bad integer"))?,
                _ => return Err(ConfigError::UnknownKey(key.into())),
            }
        }
        for (set, key) in [(imu, "imu"), (lidar, "lidar"), (output, "output")] {
            if !set {
                return Err(ConfigError::Missing(key));
            }
        }
        let e = euler.map(f64::to_radians);
        cfg.extrinsic.rotation = quat_from_euler(e.x, e.y, e.z);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, including that the inputs exist.
    pub fn load(path: &Path) -> Result<Self, anyhow::Error> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, msg: &str| Err(ConfigError::Invalid { key, msg: msg.into() });
        if self.lidar_period <= 0.0 {
            return invalid("lidar_period", "must be positive");
        }
        let n = &self.noise;
        if [n.gyro_noise, n.accel_noise, n.gyro_bias_rw, n.accel_bias_rw].iter().any(|&v| v <= 0.0) {
            return invalid("noise", "densities must be positive");
        }
        let p = &self.policy;
        if p.translation <= 0.0 || p.rotation <= 0.0 || p.max_interval <= 0.0 {
            return invalid("keyframe", "thresholds must be positive");
        }
        if self.sigma_r <= 0.0 {
            return invalid("sigma_r", "must be positive");
        }
        if self.window_size == 0 {
            return invalid("window_size", "must be at least 1");
        }
        Ok(())
    }

    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        let mut paths = vec![("imu", &self.imu), ("lidar", &self.lidar)];
        if let Some(t) = &self.truth {
            paths.push(("truth", t));
        }
        for (key, path) in paths {
            if !path.exists() {
                return Err(ConfigError::NoSuchPath { key, path: path.clone() });
            }
        }
        Ok(())
    }

    /// Serializes with paths as given; `parse` reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = euler_from_quat(&self.extrinsic.rotation).map(f64::to_degrees);
        let l = self.extrinsic.lever_arm;
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("imu", self.imu.display().to_string());
        kv("lidar", self.lidar.display().to_string());
        if let Some(t) = &self.truth {
            kv("truth", t.display().to_string());
        }
        kv("output", self.output.display().to_string());
        kv("lidar_period", self.lidar_period.to_string());
        kv("gyro_noise", self.noise.gyro_noise.to_string());
        kv("accel_noise", self.noise.accel_noise.to_string());
        kv("gyro_bias_rw", self.noise.gyro_bias_rw.to_string());
        kv("accel_bias_rw", self.noise.accel_bias_rw.to_string());
        kv("keyframe_translation", self.policy.translation.to_string());
        kv("keyframe_rotation_deg", self.policy.rotation.to_degrees().to_string());
        kv("keyframe_interval", self.policy.max_interval.to_string());
        kv("sigma_r", self.sigma_r.to_string());
        kv("extrinsic_roll_deg", e.x.to_string());
        kv("extrinsic_pitch_deg", e.y.to_string());
        kv("extrinsic_yaw_deg", e.z.to_string());
        kv("lever_x", l.x.to_string());
        kv("lever_y", l.y.to_string());
        kv("lever_z", l.z.to_string());
        kv("td_ms", (self.td * 1e3).to_string());
        kv("calibrate", self.calibrate.to_string());
        kv("window_size", self.window_size.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("imu = a.txt\nlidar = frames\noutput = out\n", Path::new("/data")).unwrap();
        assert_eq!(cfg.imu, Path::new("/data/a.txt"));
        assert_eq!(cfg.estimator().policy, KeyframePolicy::default());
        assert_eq!(cfg.sigma_r, 0.1);
        assert_eq!(cfg.window_size, 10);
        assert!(cfg.calibrate);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::new("i.txt".into(), "l".into(), "o".into());
        cfg.truth = Some("t.txt".into());
        cfg.extrinsic.rotation = quat_from_euler(0.01, -0.02, 0.03);
        cfg.extrinsic.lever_arm = Vector3::new(0.1, 0.2, -0.3);
        cfg.td = 0.004;
        cfg.calibrate = false;
        cfg.seed = 7;
        let back = RunConfig::parse(&cfg.to_text(), Path::new("")).unwrap();
        assert!(back.extrinsic.rotation.angle_to(&cfg.extrinsic.rotation) < 1e-12);
        assert!((back.td - cfg.td).abs() < 1e-15);
        assert_eq!(back.extrinsic.lever_arm, cfg.extrinsic.lever_arm);
        assert_eq!((back.calibrate, back.seed, back.truth), (false, 7, cfg.truth));
    }

    #[test]
    fn errors() {
        let base = Path::new("");
        assert_eq!(RunConfig::parse("imu = a\nlidar = b\n", base), Err(ConfigError::Missing("output")));
        assert!(matches!(RunConfig::parse("bogus = 1", base), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("imu a", base), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("imu=a\nlidar=b\noutput=c\nsigma_r = -1", base), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn missing_input_is_reported() {
        let cfg = RunConfig::new("/nonexistent/imu.txt".into(), "/".into(), "/tmp".into());
        assert!(matches!(cfg.check_inputs(), Err(ConfigError::NoSuchPath { key: "imu", .. })));
    }
}
