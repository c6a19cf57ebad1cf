//! Synthetic plane worlds, analytic trajectories, IMU synthesis and a rosette
//! scanning LiDAR model.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::estimator::ExtrinsicState;
use crate::ins::{Gravity, ImuNoise, ImuSample, NavState};
use crate::pointcloud::{LidarFrame, LidarPoint};
use crate::se3::{quat_from_euler, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown scenario '{0}' (expected corridor, room-orbit or figure-eight)")]
    UnknownScenario(String),
    #[error("invalid rig: {0}")]
    InvalidRig(&'static str),
}

/// Finite rectangle `center + a*u + b*(n x u)`, `|a| <= half_u`, `|b| <= half_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Rect {
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, u: Vector3<f64>, half_u: f64, half_v: f64) -> Self {
        let normal = normal.normalize();
        let u = (u - normal * normal.dot(&u)).normalize();
        Self { center, normal, u, half_u, half_v }
    }

    pub fn v(&self) -> Vector3<f64> {
        self.normal.cross(&self.u)
    }

    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let den = self.normal.dot(dir);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / den;
        if t <= 0.0 {
            return None;
        }
        let h = origin + dir * t - self.center;
        (h.dot(&self.u).abs() <= self.half_u && h.dot(&self.v()).abs() <= self.half_v).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlaneWorld {
    pub planes: Vec<Rect>,
}

impl PlaneWorld {
    /// Nearest hit `(range, plane index)` along a unit ray.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.intersect(origin, dir).map(|t| (t, k)))
            .filter(|(t, _)| *t <= max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// `poly[0] + poly[1] s + ... + sum amp * sin(rate * s + phase)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub poly: Vec<f64>,
    /// `(amp, rate, phase)`
    pub sines: Vec<(f64, f64, f64)>,
}

impl Series {
    pub fn constant(c: f64) -> Self {
        Self { poly: vec![c], sines: vec![] }
    }

    pub fn linear(c: f64, slope: f64) -> Self {
        Self { poly: vec![c, slope], sines: vec![] }
    }

    pub fn sine(mut self, amp: f64, rate: f64, phase: f64) -> Self {
        self.sines.push((amp, rate, phase));
        self
    }

    /// Value and first two derivatives.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for (k, c) in self.poly.iter().enumerate() {
            let k = k as i32;
            f += c * s.powi(k);
            if k >= 1 {
                d1 += c * k as f64 * s.powi(k - 1);
            }
            if k >= 2 {
                d2 += c * (k * (k - 1)) as f64 * s.powi(k - 2);
            }
        }
        for &(a, w, ph) in &self.sines {
            let (sn, cs) = (w * s + ph).sin_cos();
            f += a * sn;
            d1 += a * w * cs;
            d2 -= a * w * w * sn;
        }
        (f, d1, d2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Heading {
    Series(Series),
    /// Along the horizontal path tangent plus an offset, rad.
    Tangent { offset: f64 },
}

/// Pose law in a warped time `s(t)`: at rest for `static_time`, then a
/// smoothstep speed ramp of `ramp` seconds, then `s' = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub x: Series,
    pub y: Series,
    pub z: Series,
    pub roll: Series,
    pub pitch: Series,
    pub heading: Heading,
    pub static_time: f64,
    pub ramp: f64,
    pub duration: f64,
}

/// Kinematic truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    /// Body angular rate, rad/s.
    pub omega: Vector3<f64>,
}

impl TrajectorySpec {
    fn warp(&self, t: f64) -> (f64, f64, f64) {
        let t = t - self.static_time;
        if t < 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if t < self.ramp {
            let u = t / self.ramp;
            let s = self.ramp * (u.powi(3) - 0.5 * u.powi(4));
            return (s, 3.0 * u * u - 2.0 * u.powi(3), (6.0 * u - 6.0 * u * u) / self.ramp);
        }
        (0.5 * self.ramp + t - self.ramp, 1.0, 0.0)
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        let (s, sd, sdd) = self.warp(t);
        let (x, y, z) = (self.x.eval(s), self.y.eval(s), self.z.eval(s));
        let p = Vector3::new(x.0, y.0, z.0);
        let p1 = Vector3::new(x.1, y.1, z.1);
        let p2 = Vector3::new(x.2, y.2, z.2);
        let (yaw, yaw1) = match &self.heading {
            Heading::Series(h) => {
                let e = h.eval(s);
                (e.0, e.1)
            }
            Heading::Tangent { offset } => {
                let n = x.1 * x.1 + y.1 * y.1;
                (y.1.atan2(x.1) + offset, (x.1 * y.2 - y.1 * x.2) / n)
            }
        };
        let (roll, roll1, _) = self.roll.eval(s);
        let (pitch, pitch1, _) = self.pitch.eval(s);
        let (rd, pd, yd) = (roll1 * sd, pitch1 * sd, yaw1 * sd);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega = Vector3::new(rd - yd * sp, pd * cr + yd * sr * cp, -pd * sr + yd * cr * cp);
        Kinematics {
            pose: Pose::new(p, quat_from_euler(roll, pitch, yaw)),
            velocity: p1 * sd,
            accel: p2 * sd * sd + p1 * sdd,
            omega,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.kinematics(t).pose
    }

    /// Total rotation angle integrated over `[t0, t1]`, rad.
    pub fn rotation_excitation(&self, t0: f64, t1: f64, dt: f64) -> f64 {
        let n = ((t1 - t0) / dt).ceil() as usize;
        (0..n).map(|k| self.kinematics(t0 + k as f64 * dt).omega.norm() * dt).sum()
    }

    pub fn path_length(&self, dt: f64) -> f64 {
        let n = (self.duration / dt).ceil() as usize;
        (0..n).map(|k| self.kinematics(k as f64 * dt).velocity.norm() * dt).sum()
    }
}

/// Rosette scan: off-boresight angle `A sin(2 pi f1 t)`, roll about the
/// boresight `2 pi f2 t`, boresight along LiDAR +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RosetteScan {
    pub half_fov: f64,
    pub f1: f64,
    pub f2: f64,
}

impl Default for RosetteScan {
    fn default() -> Self {
        Self { half_fov: 35f64.to_radians(), f1: 7.29, f2: 11.43 }
    }
}

impl RosetteScan {
    pub fn direction(&self, t: f64) -> Vector3<f64> {
        let theta = self.half_fov * (2.0 * PI * self.f1 * t).sin();
        let phi = 2.0 * PI * self.f2 * t;
        let (st, ct) = theta.sin_cos();
        Vector3::new(ct, st * phi.cos(), st * phi.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRig {
    pub extrinsic: ExtrinsicState,
    /// LiDAR clock lags the IMU clock by this much, s.
    pub td: f64,
    pub imu_rate: f64,
    pub lidar_rate: f64,
    pub points_per_frame: usize,
    pub max_range: f64,
    pub scan: RosetteScan,
    /// `None` for a noiseless IMU.
    pub imu_noise: Option<ImuNoise>,
    pub range_noise: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            extrinsic: ExtrinsicState::default(),
            td: 0.0,
            imu_rate: 200.0,
            lidar_rate: 10.0,
            points_per_frame: 2000,
            max_range: 100.0,
            scan: RosetteScan::default(),
            imu_noise: None,
            range_noise: 0.0,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.imu_rate > 0.0 && self.lidar_rate > 0.0) {
            return Err(SimError::InvalidRig("rates must be positive"));
        }
        if self.range_noise < 0.0 {
            return Err(SimError::InvalidRig("negative range noise"));
        }
        Ok(())
    }
}

/// Stream RNG: one independent ChaCha stream per purpose and frame.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal3(rng: &mut ChaCha8Rng, std: f64) -> Vector3<f64> {
    if std <= 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, std).unwrap();
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// IMU samples from `t = 0` to `duration` and the true navigation states at
/// the same times (with the true biases).
pub fn synth_imu(traj: &TrajectorySpec, rig: &SensorRig, g: &Gravity, seed: u64) -> (Vec<ImuSample>, Vec<NavState>) {
    let dt = 1.0 / rig.imu_rate;
    let n = (traj.duration * rig.imu_rate).floor() as usize + 1;
    let mut rng = stream_rng(seed, 0);
    let (mut bg, mut ba) = (rig.gyro_bias, rig.accel_bias);
    let mut samples = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let kin = traj.kinematics(t);
        let r = kin.pose.rotation;
        let f = r.inverse() * (kin.accel - g.0);
        let (mut gyro, mut accel) = (kin.omega + bg, f + ba);
        if let Some(nz) = &rig.imu_noise {
            gyro += normal3(&mut rng, nz.gyro_noise * rig.imu_rate.sqrt());
            accel += normal3(&mut rng, nz.accel_noise * rig.imu_rate.sqrt());
        }
        samples.push(ImuSample::new(t, gyro, accel));
        truth.push(NavState { t, p: kin.pose.translation, q: r, v: kin.velocity, bg, ba });
        if let Some(nz) = &rig.imu_noise {
            bg += normal3(&mut rng, nz.gyro_bias_rw * dt.sqrt());
            ba += normal3(&mut rng, nz.accel_bias_rw * dt.sqrt());
        }
    }
    (samples, truth)
}

/// LiDAR frames with stamps in the LiDAR clock; point `j` of frame `k` is
/// sampled at IMU time `stamp + t_offset + td`. Also returns the source plane
/// of every point.
pub fn synth_lidar(
    traj: &TrajectorySpec,
    world: &PlaneWorld,
    rig: &SensorRig,
    seed: u64,
) -> (Vec<LidarFrame>, Vec<Vec<usize>>) {
    let period = 1.0 / rig.lidar_rate;
    let ext = rig.extrinsic.pose();
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut k = 0u64;
    loop {
        let stamp = k as f64 * period;
        if stamp + period + rig.td > traj.duration {
            break;
        }
        let mut rng = stream_rng(seed, 1 + k);
        let mut points = Vec::with_capacity(rig.points_per_frame);
        let mut lab = Vec::with_capacity(rig.points_per_frame);
        for j in 0..rig.points_per_frame {
            let t_off = j as f64 * period / rig.points_per_frame as f64;
            let pose = traj.pose(stamp + t_off + rig.td).compose(&ext);
            let d_l = rig.scan.direction(stamp + t_off);
            let d_w = pose.rotation * d_l;
            let Some((range, plane)) = world.raycast(&pose.translation, &d_w, rig.max_range) else { continue };
            let noise = if rig.range_noise > 0.0 {
                Normal::new(0.0, rig.range_noise).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            points.push(LidarPoint::new(t_off, d_l * (range + noise)));
            lab.push(plane);
        }
        frames.push(LidarFrame::new(stamp, points));
        labels.push(lab);
        k += 1;
    }
    (frames, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Noiseless,
    Realistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioOptions {
    pub noise: NoiseLevel,
    pub duration: Option<f64>,
    pub extrinsic: ExtrinsicState,
    pub td: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self { noise: NoiseLevel::Noiseless, duration: None, extrinsic: ExtrinsicState::default(), td: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub world: PlaneWorld,
    pub traj: TrajectorySpec,
    pub rig: SensorRig,
    pub gravity: Gravity,
    pub imu: Vec<ImuSample>,
    pub truth: Vec<NavState>,
    pub frames: Vec<LidarFrame>,
    pub labels: Vec<Vec<usize>>,
}

impl Scenario {
    /// Ground-truth state at an IMU time.
    pub fn truth_at(&self, t: f64) -> NavState {
        let kin = self.traj.kinematics(t);
        let k = ((t * self.rig.imu_rate).round() as usize).min(self.truth.len() - 1);
        NavState {
            t,
            p: kin.pose.translation,
            q: kin.pose.rotation,
            v: kin.velocity,
            bg: self.truth[k].bg,
            ba: self.truth[k].ba,
        }
    }
}

/// Clearance left between adjacent panels. It exceeds the diagonal of a
/// 0.5 m voxel, so no map voxel averages points from two surfaces.
pub const EDGE_GAP: f64 = 0.9;

fn wall(center: Vector3<f64>, normal: Vector3<f64>, half_width: f64, half_height: f64) -> Rect {
    let up = Vector3::z();
    Rect::new(center, normal, normal.cross(&up), half_width, half_height)
}

fn horizontal(z: f64, normal_z: f64, half: f64) -> Rect {
    Rect::new(Vector3::new(0.0, 0.0, z), Vector3::new(0.0, 0.0, normal_z), Vector3::x(), half, half)
}

/// Corridor closed at one end: floor, two walls and an end wall. The rig
/// moves back and forth along it while weaving and turning left and right.
fn corridor(duration: f64) -> (PlaneWorld, TrajectorySpec) {
    let g = EDGE_GAP;
    // x spans [-8, 10], y spans [-3, 3], walls 3 m tall
    let (x0, x1, hw, top) = (-8.0, 10.0, 3.0, -3.0);
    let xc = (x0 + x1 - g) / 2.0;
    let xh = (x1 - g - x0) / 2.0;
    let zc = (top - g) / 2.0;
    let zh = (-g - top) / 2.0;
    let world = PlaneWorld {
        planes: vec![
            Rect::new(Vector3::new(xc, 0.0, 0.0), -Vector3::z(), Vector3::x(), xh, hw - g),
            wall(Vector3::new(xc, hw, zc), -Vector3::y(), xh, zh),
            wall(Vector3::new(xc, -hw, zc), Vector3::y(), xh, zh),
            wall(Vector3::new(x1, 0.0, zc), -Vector3::x(), hw - g, zh),
        ],
    };
    let traj = TrajectorySpec {
        x: Series::default().sine(4.0, 0.06, 0.0),
        y: Series::default().sine(1.0, 0.3, 0.0),
        z: Series::constant(-1.5).sine(0.1, 0.9, 0.0),
        roll: Series::constant(0.0).sine(0.03, 1.3, 0.0),
        pitch: Series::constant(0.0).sine(0.04, 1.1, 0.5),
        heading: Heading::Series(Series::default().sine(0.35, 0.2, 0.0)),
        static_time: 2.0,
        ramp: 2.0,
        duration,
    };
    (world, traj)
}

/// 12 x 12 x 4 m box, circular orbit facing the centre with attitude wobble.
fn room_orbit(duration: f64) -> (PlaneWorld, TrajectorySpec) {
    let h = 6.0;
    let g = EDGE_GAP;
    let world = PlaneWorld {
        planes: vec![
            horizontal(0.0, -1.0, h - g),
            horizontal(-4.0, 1.0, h - g),
            wall(Vector3::new(h, 0.0, -2.0), -Vector3::x(), h - g, 2.0 - g),
            wall(Vector3::new(-h, 0.0, -2.0), Vector3::x(), h - g, 2.0 - g),
            wall(Vector3::new(0.0, h, -2.0), -Vector3::y(), h - g, 2.0 - g),
            wall(Vector3::new(0.0, -h, -2.0), Vector3::y(), h - g, 2.0 - g),
        ],
    };
    let r = 4.0;
    let w = 0.25;
    let traj = TrajectorySpec {
        x: Series::default().sine(r, w, PI / 2.0),
        y: Series::default().sine(r, w, 0.0),
        z: Series::constant(-1.5).sine(0.2, 0.7, 0.0),
        roll: Series::constant(0.0).sine(0.12, 0.9, 0.0).sine(0.05, 2.3, 1.0),
        pitch: Series::constant(0.0).sine(0.1, 1.1, 0.4).sine(0.05, 1.9, 0.0),
        // facing the centre: tangent heading (counter-clockwise) plus 90 deg
        heading: Heading::Tangent { offset: PI / 2.0 },
        static_time: 2.0,
        ramp: 2.0,
        duration,
    };
    (world, traj)
}

/// Octagonal room (inradius 10 m) and a Gerono lemniscate with all-axis
/// excitation.
fn figure_eight(duration: f64) -> (PlaneWorld, TrajectorySpec) {
    let inradius = 10.0;
    let height = 5.0;
    let g = EDGE_GAP;
    let half_side = inradius * (PI / 8.0).tan();
    let mut planes = vec![horizontal(0.0, -1.0, 14.0), horizontal(-height, 1.0, 14.0)];
    for k in 0..8 {
        let a = k as f64 * PI / 4.0;
        let dir = Vector3::new(a.cos(), a.sin(), 0.0);
        let center = dir * inradius + Vector3::new(0.0, 0.0, -height / 2.0);
        // adjacent walls meet at 135 deg; trimming each by g/2/cos(22.5 deg)
        // leaves a clearance of g between their edges
        planes.push(wall(center, -dir, half_side - g / 2.0 / (PI / 8.0).cos(), height / 2.0 - g));
    }
    let world = PlaneWorld { planes };
    let a = 5.0;
    let w = 0.2;
    let traj = TrajectorySpec {
        x: Series::default().sine(a, w, 0.0),
        // sin(s) cos(s) = sin(2s) / 2
        y: Series::default().sine(a / 2.0, 2.0 * w, 0.0),
        z: Series::constant(-1.8).sine(0.3, 0.5, 0.0),
        roll: Series::constant(0.0).sine(0.05, 0.8, 0.0),
        pitch: Series::constant(0.0).sine(0.06, 0.6, 1.0),
        heading: Heading::Tangent { offset: 0.0 },
        static_time: 2.0,
        ramp: 2.0,
        duration,
    };
    (world, traj)
}

pub const SCENARIOS: [&str; 3] = ["corridor", "room-orbit", "figure-eight"];

pub fn make_scenario(name: &str, seed: u64, opts: &ScenarioOptions) -> Result<Scenario, SimError> {
    let (world, traj) = match name {
        "corridor" => corridor(opts.duration.unwrap_or(30.0)),
        "room-orbit" => room_orbit(opts.duration.unwrap_or(60.0)),
        "figure-eight" => figure_eight(opts.duration.unwrap_or(120.0)),
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    let mut rig = SensorRig { extrinsic: opts.extrinsic, td: opts.td, ..SensorRig::default() };
    if opts.noise == NoiseLevel::Realistic {
        let mut rng = stream_rng(seed, u64::MAX);
        rig.imu_noise = Some(ImuNoise::default());
        rig.range_noise = 0.02;
        rig.gyro_bias = normal3(&mut rng, 5e-4);
        rig.accel_bias = normal3(&mut rng, 0.02);
    }
    rig.validate()?;
    let gravity = Gravity::default();
    let (imu, truth) = synth_imu(&traj, &rig, &gravity, seed);
    let (frames, labels) = synth_lidar(&traj, &world, &rig, seed);
    Ok(Scenario { name: name.to_string(), seed, world, traj, rig, gravity, imu, truth, frames, labels })
}

/// Unit normals of the planes hit by a frame, deduplicated.
pub fn visible_normals(world: &PlaneWorld, labels: &[usize]) -> Vec<Vector3<f64>> {
    let mut seen = vec![false; world.planes.len()];
    for l in labels {
        seen[*l] = true;
    }
    seen.iter().enumerate().filter(|(_, s)| **s).map(|(k, _)| world.planes[k].normal).collect()
}

/// Rank of a set of directions (number of singular values above `tol`).
pub fn direction_rank(dirs: &[Vector3<f64>], tol: f64) -> usize {
    let m: Matrix3<f64> = dirs.iter().map(|d| d * d.transpose()).sum();
    m.symmetric_eigenvalues().iter().filter(|v| **v > tol).count()
}
