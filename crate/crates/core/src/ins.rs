//! Strapdown mechanization, static initialization, the high-rate pose buffer
//! and IMU preintegration between keyframes.
//!
//! The body frame is front-right-down and the world frame is gravity aligned
//! with `z` pointing down, so gravity is `(0, 0, +9.80665)`.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::se3::{self, quat_exp, quat_log, quat_mul, right_jacobian, right_jacobian_inv, skew, Pose, Quat};

pub const STANDARD_GRAVITY: f64 = 9.80665;

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;

/// Error-state offsets of the 15-dof preintegration error vector.
pub mod idx {
    pub const P: usize = 0;
    pub const PHI: usize = 3;
    pub const V: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InsError {
    #[error("need at least {needed} IMU samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("mean specific force {magnitude:.4} m/s^2 deviates from gravity by more than 10%")]
    NotLevel { magnitude: f64 },
    #[error("window is not static")]
    NotStatic,
    #[error("non-monotone IMU timestamps: {prev} then {next}")]
    NonMonotone { prev: f64, next: f64 },
    #[error("state time {state} does not match sample time {sample}")]
    TimeMismatch { state: f64, sample: f64 },
    #[error("query time {t} outside buffered span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("preintegration spans {pre} s but states are {states} s apart")]
    IntervalMismatch { pre: f64, states: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Angular velocity, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    /// Linear interpolation between two samples at time `t`.
    pub fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        ImuSample {
            t,
            gyro: a.gyro + s * (b.gyro - a.gyro),
            accel: a.accel + s * (b.accel - a.accel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gravity(pub Vector3<f64>);

impl Default for Gravity {
    fn default() -> Self {
        Gravity(Vector3::new(0.0, 0.0, STANDARD_GRAVITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: Quat,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl NavState {
    pub fn at_rest(t: f64, q: Quat) -> Self {
        Self {
            t,
            p: Vector3::zeros(),
            q,
            v: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.p, self.q)
    }

    /// Clamps each bias vector to the configured magnitude.
    pub fn saturate_biases(&mut self, limits: &BiasLimits) {
        let clamp = |b: &mut Vector3<f64>, max: f64| {
            let n = b.norm();
            if n > max {
                *b *= max / n;
            }
        };
        clamp(&mut self.bg, limits.gyro);
        clamp(&mut self.ba, limits.accel);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasLimits {
    pub gyro: f64,
    pub accel: f64,
}

impl Default for BiasLimits {
    fn default() -> Self {
        Self { gyro: 0.1, accel: 2.0 }
    }
}

/// Continuous-time noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    /// rad/s/sqrt(Hz)
    pub gyro_noise: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_rw: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_rw: f64,
}

impl Default for ImuNoise {
    /// Industrial MEMS class: 0.1 deg/sqrt(hr) angle random walk and
    /// 0.01 m/s/sqrt(hr) velocity random walk.
    fn default() -> Self {
        Self {
            gyro_noise: 0.1_f64.to_radians() / 60.0,
            accel_noise: 0.01 / 60.0,
            gyro_bias_rw: 5e-7,
            accel_bias_rw: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroVelocityThresholds {
    pub gyro_std: f64,
    pub accel_std: f64,
    pub gyro_mean: f64,
    pub min_span: f64,
}

impl Default for ZeroVelocityThresholds {
    fn default() -> Self {
        Self {
            gyro_std: 0.005,
            accel_std: 0.05,
            gyro_mean: 0.02,
            min_span: 1.0,
        }
    }
}

fn mean_of(samples: &[ImuSample], f: impl Fn(&ImuSample) -> Vector3<f64>) -> Vector3<f64> {
    samples.iter().map(&f).sum::<Vector3<f64>>() / samples.len() as f64
}

/// Pooled standard deviation of the three axes around their means.
fn std_of(samples: &[ImuSample], f: impl Fn(&ImuSample) -> Vector3<f64>) -> f64 {
    let m = mean_of(samples, &f);
    let n = samples.len().max(2) as f64;
    let ss: f64 = samples.iter().map(|s| (f(s) - m).norm_squared()).sum();
    (ss / (3.0 * (n - 1.0))).sqrt()
}

/// Leveling from the mean specific force. Returns `(roll, pitch)`; yaw is 0 by
/// definition of the world frame.
pub fn init_attitude_from_accel(samples: &[ImuSample]) -> Result<(f64, f64), InsError> {
    if samples.len() < 20 {
        return Err(InsError::TooFewSamples { needed: 20, got: samples.len() });
    }
    let f = mean_of(samples, |s| s.accel);
    let magnitude = f.norm();
    if (magnitude - STANDARD_GRAVITY).abs() > 0.1 * STANDARD_GRAVITY {
        return Err(InsError::NotLevel { magnitude });
    }
    let roll = (-f.y).atan2(-f.z);
    let pitch = f.x.atan2((f.y * f.y + f.z * f.z).sqrt());
    Ok((roll, pitch))
}

pub fn detect_zero_velocity(window: &[ImuSample], th: &ZeroVelocityThresholds) -> bool {
    if window.len() < 2 {
        return false;
    }
    let span = window[window.len() - 1].t - window[0].t;
    if span + 1e-9 < th.min_span {
        return false;
    }
    let gyro_mean = mean_of(window, |s| s.gyro).norm();
    std_of(window, |s| s.gyro) < th.gyro_std
        && std_of(window, |s| s.accel) < th.accel_std
        && gyro_mean < th.gyro_mean
}

pub fn estimate_gyro_bias_static(
    window: &[ImuSample],
    th: &ZeroVelocityThresholds,
) -> Result<Vector3<f64>, InsError> {
    if !detect_zero_velocity(window, th) {
        return Err(InsError::NotStatic);
    }
    Ok(mean_of(window, |s| s.gyro))
}

/// One mechanization interval: quaternion increment from the mean angular
/// rate, trapezoidal specific force and trapezoidal velocity.
pub fn mechanize_step(
    state: &NavState,
    s0: &ImuSample,
    s1: &ImuSample,
    g: &Gravity,
) -> Result<NavState, InsError> {
    if (s0.t - state.t).abs() > 1e-9 {
        return Err(InsError::TimeMismatch { state: state.t, sample: s0.t });
    }
    let dt = s1.t - s0.t;
    if !(dt > 0.0) {
        return Err(InsError::NonMonotone { prev: s0.t, next: s1.t });
    }
    let w = 0.5 * (s0.gyro + s1.gyro) - state.bg;
    let q1 = quat_mul(&state.q, &quat_exp(&(w * dt)));
    let a = 0.5 * (state.q * (s0.accel - state.ba) + q1 * (s1.accel - state.ba)) + g.0;
    let v1 = state.v + a * dt;
    let p1 = state.p + 0.5 * (state.v + v1) * dt;
    Ok(NavState {
        t: s1.t,
        p: p1,
        q: q1,
        v: v1,
        bg: state.bg,
        ba: state.ba,
    })
}

/// Time-ordered INS snapshots at IMU rate, answering pose queries inside the
/// buffered span by interpolation.
#[derive(Debug, Clone, Default)]
pub struct InsPoseBuffer {
    states: VecDeque<NavState>,
}

impl InsPoseBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_states(states: impl IntoIterator<Item = NavState>) -> Result<Self, InsError> {
        let mut buf = Self::new();
        for s in states {
            buf.push(s)?;
        }
        Ok(buf)
    }

    pub fn push(&mut self, s: NavState) -> Result<(), InsError> {
        if let Some(last) = self.states.back() {
            if s.t <= last.t {
                return Err(InsError::NonMonotone { prev: last.t, next: s.t });
            }
        }
        self.states.push_back(s);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.states.front()?.t, self.states.back()?.t))
    }

    pub fn last(&self) -> Option<&NavState> {
        self.states.back()
    }

    pub fn states(&self) -> impl Iterator<Item = &NavState> {
        self.states.iter()
    }

    fn out_of_span(&self, t: f64) -> InsError {
        let (start, end) = self.span().unwrap_or((f64::NAN, f64::NAN));
        InsError::OutOfSpan { t, start, end }
    }

    /// Index `i` with `states[i].t <= t <= states[i + 1].t`.
    fn bracket(&self, t: f64) -> Result<usize, InsError> {
        let (start, end) = self.span().ok_or_else(|| self.out_of_span(t))?;
        if t < start || t > end || self.states.len() < 2 {
            if self.states.len() == 1 && t == start {
                return Ok(0);
            }
            return Err(self.out_of_span(t));
        }
        let i = self.states.partition_point(|s| s.t <= t);
        Ok(i.saturating_sub(1).min(self.states.len() - 2))
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose, InsError> {
        let i = self.bracket(t)?;
        if self.states.len() == 1 {
            return Ok(self.states[0].pose());
        }
        let (a, b) = (&self.states[i], &self.states[i + 1]);
        Ok(se3::interpolate_fraction(&a.pose(), &b.pose(), (t - a.t) / (b.t - a.t)))
    }

    /// Drops snapshots strictly older than `t`, keeping one at or before it.
    pub fn prune_before(&mut self, t: f64) {
        while self.states.len() > 2 && self.states[1].t <= t {
            self.states.pop_front();
        }
    }

    fn truncate_from(&mut self, t: f64) {
        while self.states.back().is_some_and(|s| s.t >= t) {
            self.states.pop_back();
        }
    }
}

/// Mechanization driver: owns the raw IMU log and the pose buffer it feeds.
#[derive(Debug, Clone)]
pub struct Ins {
    gravity: Gravity,
    samples: VecDeque<ImuSample>,
    buffer: InsPoseBuffer,
}

impl Ins {
    /// Starts mechanization from `initial`, whose time must coincide with
    /// `first_sample`.
    pub fn new(initial: NavState, first_sample: ImuSample, gravity: Gravity) -> Result<Self, InsError> {
        if (initial.t - first_sample.t).abs() > 1e-9 {
            return Err(InsError::TimeMismatch { state: initial.t, sample: first_sample.t });
        }
        let mut buffer = InsPoseBuffer::new();
        buffer.push(initial)?;
        Ok(Self {
            gravity,
            samples: VecDeque::from([first_sample]),
            buffer,
        })
    }

    pub fn gravity(&self) -> &Gravity {
        &self.gravity
    }

    pub fn buffer(&self) -> &InsPoseBuffer {
        &self.buffer
    }

    pub fn latest(&self) -> &NavState {
        self.buffer.last().expect("buffer never empty")
    }

    pub fn sample_span(&self) -> (f64, f64) {
        (self.samples.front().unwrap().t, self.samples.back().unwrap().t)
    }

    pub fn push(&mut self, s: ImuSample) -> Result<(), InsError> {
        let last = *self.samples.back().unwrap();
        if s.t <= last.t {
            return Err(InsError::NonMonotone { prev: last.t, next: s.t });
        }
        self.samples.push_back(s);
        self.advance()
    }

    /// Mechanizes from the newest snapshot through every newer sample.
    fn advance(&mut self) -> Result<(), InsError> {
        let mut state = *self.latest();
        let start = self.samples.partition_point(|s| s.t <= state.t);
        for k in start..self.samples.len() {
            let s1 = self.samples[k];
            let s0 = self.sample_at(state.t)?;
            state = mechanize_step(&state, &s0, &s1, &self.gravity)?;
            self.buffer.push(state)?;
        }
        Ok(())
    }

    /// Raw IMU measurement at `t`, interpolated between logged samples.
    pub fn sample_at(&self, t: f64) -> Result<ImuSample, InsError> {
        let (start, end) = self.sample_span();
        if t < start - 1e-12 || t > end + 1e-12 {
            return Err(InsError::OutOfSpan { t, start, end });
        }
        let i = self.samples.partition_point(|s| s.t < t);
        if i < self.samples.len() && (self.samples[i].t - t).abs() < 1e-12 {
            return Ok(ImuSample { t, ..self.samples[i] });
        }
        if i == 0 {
            return Ok(ImuSample { t, ..self.samples[0] });
        }
        if i == self.samples.len() {
            return Ok(ImuSample { t, ..self.samples[i - 1] });
        }
        Ok(ImuSample::interpolate(&self.samples[i - 1], &self.samples[i], t))
    }

    /// Samples covering `[t0, t1]`, with interpolated samples at both ends.
    pub fn samples_between(&self, t0: f64, t1: f64) -> Result<Vec<ImuSample>, InsError> {
        let mut out = vec![self.sample_at(t0)?];
        let last = self.sample_at(t1)?;
        out.extend(self.samples.iter().filter(|s| s.t > t0 + 1e-9 && s.t < t1 - 1e-9).copied());
        out.push(last);
        Ok(out)
    }

    /// Full navigation state at `t`, by a partial mechanization step from the
    /// snapshot before it.
    pub fn state_at(&self, t: f64) -> Result<NavState, InsError> {
        let i = self.buffer.bracket(t)?;
        let base = self.buffer.states[i];
        if (base.t - t).abs() < 1e-12 {
            return Ok(base);
        }
        if t <= base.t {
            return Ok(base);
        }
        let s0 = self.sample_at(base.t)?;
        let s1 = self.sample_at(t)?;
        mechanize_step(&base, &s0, &s1, &self.gravity)
    }

    /// Angular rate in the body frame (bias corrected) at `t`.
    pub fn angular_rate_at(&self, t: f64, bg: &Vector3<f64>) -> Result<Vector3<f64>, InsError> {
        Ok(self.sample_at(t)?.gyro - bg)
    }

    /// Replaces the propagation origin with `state` and re-mechanizes every
    /// logged sample after it.
    pub fn reset(&mut self, state: NavState) -> Result<(), InsError> {
        let (start, end) = self.sample_span();
        if state.t < start - 1e-12 || state.t > end + 1e-12 {
            return Err(InsError::OutOfSpan { t: state.t, start, end });
        }
        self.buffer.truncate_from(state.t);
        self.buffer.push(state)?;
        self.advance()
    }

    /// Forgets samples and snapshots older than `t`.
    pub fn prune_before(&mut self, t: f64) {
        while self.samples.len() > 2 && self.samples[1].t <= t {
            self.samples.pop_front();
        }
        self.buffer.prune_before(t);
    }
}

/// Relative-motion deltas between two keyframes, independent of the absolute
/// start state, with covariance and first-order bias Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub dt: f64,
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dq: Quat,
    /// Error order `(dp, dphi, dv, dbg, dba)`.
    pub covariance: Matrix15,
    /// Jacobian of the error state w.r.t. the initial error state; its bias
    /// columns are the bias Jacobians.
    pub jacobian: Matrix15,
    pub bg0: Vector3<f64>,
    pub ba0: Vector3<f64>,
    pub noise: ImuNoise,
}

impl Preintegration {
    pub fn new(
        samples: &[ImuSample],
        bg0: Vector3<f64>,
        ba0: Vector3<f64>,
        noise: ImuNoise,
    ) -> Result<Self, InsError> {
        if samples.len() < 2 {
            return Err(InsError::TooFewSamples { needed: 2, got: samples.len() });
        }
        let mut pre = Self {
            dt: 0.0,
            dp: Vector3::zeros(),
            dv: Vector3::zeros(),
            dq: Quat::identity(),
            covariance: Matrix15::zeros(),
            jacobian: Matrix15::identity(),
            bg0,
            ba0,
            noise,
        };
        for w in samples.windows(2) {
            pre.integrate(&w[0], &w[1])?;
        }
        Ok(pre)
    }

    fn integrate(&mut self, s0: &ImuSample, s1: &ImuSample) -> Result<(), InsError> {
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(InsError::NonMonotone { prev: s0.t, next: s1.t });
        }
        let w = 0.5 * (s0.gyro + s1.gyro) - self.bg0;
        let a0 = s0.accel - self.ba0;
        let a1 = s1.accel - self.ba0;
        let inc = quat_exp(&(w * dt));
        let r0 = self.dq.to_rotation_matrix().into_inner();
        let dq1 = quat_mul(&self.dq, &inc);
        let r1 = dq1.to_rotation_matrix().into_inner();
        let acc = 0.5 * (r0 * a0 + r1 * a1);

        // error-state transition
        let inc_t = inc.to_rotation_matrix().into_inner().transpose();
        let jr = right_jacobian(&(w * dt));
        let i3 = Matrix3::identity();
        let da_dphi = -0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * inc_t);
        let da_dbg = 0.5 * r1 * skew(&a1) * jr * dt;
        let da_dba = -0.5 * (r0 + r1);

        let mut f = Matrix15::identity();
        f.fixed_view_mut::<3, 3>(idx::P, idx::PHI).copy_from(&(0.5 * dt * dt * da_dphi));
        f.fixed_view_mut::<3, 3>(idx::P, idx::V).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(idx::P, idx::BG).copy_from(&(0.5 * dt * dt * da_dbg));
        f.fixed_view_mut::<3, 3>(idx::P, idx::BA).copy_from(&(0.5 * dt * dt * da_dba));
        f.fixed_view_mut::<3, 3>(idx::PHI, idx::PHI).copy_from(&inc_t);
        f.fixed_view_mut::<3, 3>(idx::PHI, idx::BG).copy_from(&(-jr * dt));
        f.fixed_view_mut::<3, 3>(idx::V, idx::PHI).copy_from(&(dt * da_dphi));
        f.fixed_view_mut::<3, 3>(idx::V, idx::BG).copy_from(&(dt * da_dbg));
        f.fixed_view_mut::<3, 3>(idx::V, idx::BA).copy_from(&(dt * da_dba));

        // noise input: [gyro white, accel white, gyro bias walk, accel bias walk]
        let mut g = SMatrix::<f64, 15, 12>::zeros();
        let rbar = 0.5 * (r0 + r1);
        let da_dng = 0.5 * r1 * skew(&a1) * jr * dt;
        g.fixed_view_mut::<3, 3>(idx::P, 0).copy_from(&(0.5 * dt * dt * da_dng));
        g.fixed_view_mut::<3, 3>(idx::P, 3).copy_from(&(0.5 * dt * dt * rbar));
        g.fixed_view_mut::<3, 3>(idx::PHI, 0).copy_from(&(-jr * dt));
        g.fixed_view_mut::<3, 3>(idx::V, 0).copy_from(&(dt * da_dng));
        g.fixed_view_mut::<3, 3>(idx::V, 3).copy_from(&(dt * rbar));
        g.fixed_view_mut::<3, 3>(idx::BG, 6).copy_from(&i3);
        g.fixed_view_mut::<3, 3>(idx::BA, 9).copy_from(&i3);
        let n = &self.noise;
        let mut q = SVector::<f64, 12>::zeros();
        for k in 0..3 {
            q[k] = n.gyro_noise * n.gyro_noise / dt;
            q[3 + k] = n.accel_noise * n.accel_noise / dt;
            q[6 + k] = n.gyro_bias_rw * n.gyro_bias_rw * dt;
            q[9 + k] = n.accel_bias_rw * n.accel_bias_rw * dt;
        }
        let gq = g * SMatrix::<f64, 12, 12>::from_diagonal(&q);
        let cov = f * self.covariance * f.transpose() + gq * g.transpose();
        self.covariance = 0.5 * (cov + cov.transpose());
        self.jacobian = f * self.jacobian;

        self.dp += self.dv * dt + 0.5 * acc * dt * dt;
        self.dv += acc * dt;
        self.dq = dq1;
        self.dt += dt;
        Ok(())
    }

    pub fn dp_dbg(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(idx::P, idx::BG).into_owned()
    }
    pub fn dp_dba(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(idx::P, idx::BA).into_owned()
    }
    pub fn dq_dbg(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(idx::PHI, idx::BG).into_owned()
    }
    pub fn dv_dbg(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(idx::V, idx::BG).into_owned()
    }
    pub fn dv_dba(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(idx::V, idx::BA).into_owned()
    }

    /// Deltas corrected to first order for new bias estimates.
    pub fn corrected_deltas(&self, bg: &Vector3<f64>, ba: &Vector3<f64>) -> (Vector3<f64>, Quat, Vector3<f64>) {
        let dbg = bg - self.bg0;
        let dba = ba - self.ba0;
        let dp = self.dp + self.dp_dbg() * dbg + self.dp_dba() * dba;
        let dv = self.dv + self.dv_dbg() * dbg + self.dv_dba() * dba;
        let dq = quat_mul(&self.dq, &quat_exp(&(self.dq_dbg() * dbg)));
        (dp, dq, dv)
    }

    /// Propagates `x_i` through the (bias-corrected) deltas.
    pub fn predict(&self, x_i: &NavState, g: &Gravity) -> NavState {
        let (dp, dq, dv) = self.corrected_deltas(&x_i.bg, &x_i.ba);
        let dt = self.dt;
        NavState {
            t: x_i.t + dt,
            p: x_i.p + x_i.v * dt + 0.5 * g.0 * dt * dt + x_i.q * dp,
            q: quat_mul(&x_i.q, &dq),
            v: x_i.v + g.0 * dt + x_i.q * dv,
            bg: x_i.bg,
            ba: x_i.ba,
        }
    }
}

/// Jacobians of the 15-dof preintegration residual. Per state the blocks are
/// position (3), attitude perturbation (3) and `[v, bg, ba]` (9).
#[derive(Debug, Clone)]
pub struct PreintegrationJacobians {
    pub p_i: SMatrix<f64, 15, 3>,
    pub q_i: SMatrix<f64, 15, 3>,
    pub vb_i: SMatrix<f64, 15, 9>,
    pub p_j: SMatrix<f64, 15, 3>,
    pub q_j: SMatrix<f64, 15, 3>,
    pub vb_j: SMatrix<f64, 15, 9>,
}

/// Unwhitened preintegration residual in `(p, phi, v, bg, ba)` order.
pub fn preintegration_residual(
    x_i: &NavState,
    x_j: &NavState,
    pre: &Preintegration,
    g: &Gravity,
) -> Result<(Vector15, PreintegrationJacobians), InsError> {
    if (x_i.t + pre.dt - x_j.t).abs() > 1e-6 {
        return Err(InsError::IntervalMismatch { pre: pre.dt, states: x_j.t - x_i.t });
    }
    Ok(preintegration_residual_unchecked(x_i, x_j, pre, g))
}

pub(crate) fn preintegration_residual_unchecked(
    x_i: &NavState,
    x_j: &NavState,
    pre: &Preintegration,
    g: &Gravity,
) -> (Vector15, PreintegrationJacobians) {
    let dt = pre.dt;
    let dbg = x_i.bg - pre.bg0;
    let dba = x_i.ba - pre.ba0;
    let ri = x_i.q.to_rotation_matrix().into_inner();
    let rj = x_j.q.to_rotation_matrix().into_inner();
    let ri_t = ri.transpose();

    let c = pre.dq_dbg() * dbg;
    let dr = pre.dq.to_rotation_matrix().into_inner();
    let a = (dr * se3::exp_so3(&c)).transpose() * ri_t * rj;
    let r_phi = se3::log_so3(&a);

    let u_p = x_j.p - x_i.p - x_i.v * dt - 0.5 * g.0 * dt * dt;
    let u_v = x_j.v - x_i.v - g.0 * dt;
    let r_p = ri_t * u_p - (pre.dp + pre.dp_dbg() * dbg + pre.dp_dba() * dba);
    let r_v = ri_t * u_v - (pre.dv + pre.dv_dbg() * dbg + pre.dv_dba() * dba);

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(idx::P).copy_from(&r_p);
    r.fixed_rows_mut::<3>(idx::PHI).copy_from(&r_phi);
    r.fixed_rows_mut::<3>(idx::V).copy_from(&r_v);
    r.fixed_rows_mut::<3>(idx::BG).copy_from(&(x_j.bg - x_i.bg));
    r.fixed_rows_mut::<3>(idx::BA).copy_from(&(x_j.ba - x_i.ba));

    let jr_inv = right_jacobian_inv(&r_phi);
    let i3 = Matrix3::identity();
    let mut jac = PreintegrationJacobians {
        p_i: SMatrix::zeros(),
        q_i: SMatrix::zeros(),
        vb_i: SMatrix::zeros(),
        p_j: SMatrix::zeros(),
        q_j: SMatrix::zeros(),
        vb_j: SMatrix::zeros(),
    };
    jac.p_i.fixed_view_mut::<3, 3>(idx::P, 0).copy_from(&-ri_t);
    jac.p_j.fixed_view_mut::<3, 3>(idx::P, 0).copy_from(&ri_t);

    jac.q_i.fixed_view_mut::<3, 3>(idx::P, 0).copy_from(&skew(&(ri_t * u_p)));
    jac.q_i.fixed_view_mut::<3, 3>(idx::PHI, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
    jac.q_i.fixed_view_mut::<3, 3>(idx::V, 0).copy_from(&skew(&(ri_t * u_v)));
    jac.q_j.fixed_view_mut::<3, 3>(idx::PHI, 0).copy_from(&jr_inv);

    // [v, bg, ba] of state i
    jac.vb_i.fixed_view_mut::<3, 3>(idx::P, 0).copy_from(&(-ri_t * dt));
    jac.vb_i.fixed_view_mut::<3, 3>(idx::V, 0).copy_from(&-ri_t);
    jac.vb_i.fixed_view_mut::<3, 3>(idx::P, 3).copy_from(&-pre.dp_dbg());
    jac.vb_i.fixed_view_mut::<3, 3>(idx::P, 6).copy_from(&-pre.dp_dba());
    jac.vb_i.fixed_view_mut::<3, 3>(idx::V, 3).copy_from(&-pre.dv_dbg());
    jac.vb_i.fixed_view_mut::<3, 3>(idx::V, 6).copy_from(&-pre.dv_dba());
    jac.vb_i
        .fixed_view_mut::<3, 3>(idx::PHI, 3)
        .copy_from(&(-jr_inv * a.transpose() * right_jacobian(&c) * pre.dq_dbg()));
    jac.vb_i.fixed_view_mut::<3, 3>(idx::BG, 3).copy_from(&-i3);
    jac.vb_i.fixed_view_mut::<3, 3>(idx::BA, 6).copy_from(&-i3);

    jac.vb_j.fixed_view_mut::<3, 3>(idx::V, 0).copy_from(&ri_t);
    jac.vb_j.fixed_view_mut::<3, 3>(idx::BG, 3).copy_from(&i3);
    jac.vb_j.fixed_view_mut::<3, 3>(idx::BA, 6).copy_from(&i3);

    (r, jac)
}

/// Rotation angle of `q` expressed through its log.
pub fn rotation_angle(q: &Quat) -> f64 {
    quat_log(q).norm()
}
