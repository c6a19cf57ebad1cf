//! Sliding-window estimator: LiDAR plane factors with extrinsic and time-delay
//! terms, preintegration factors, two-step optimization with chi-square
//! culling, and marginalization.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::association::{associate_keyframe, AssociationParams, PlaneAssociation};
use crate::ins::{
    detect_zero_velocity, estimate_gyro_bias_static, init_attitude_from_accel, preintegration_residual_unchecked,
    rotation_angle, BiasLimits, Gravity, ImuNoise, ImuSample, Ins, InsError, Matrix15, NavState, Preintegration,
    ZeroVelocityThresholds,
};
use crate::pointcloud::{
    build_keyframe_map_with_poses, stride_select, undistort_frame, CloudError, KeyframeMap, LidarFrame, VOXEL_LEAF,
};
use crate::se3::{euler_from_quat, euler_rate_matrix, quat_exp, quat_from_array, quat_from_euler, quat_to_array, skew, Pose, Quat};
use crate::solver::{
    BlockKey, CostFunction, LmOptions, Loss, Manifold, PriorFactor, Problem, SolveSummary, SolverError,
};

/// Keyframes kept besides the newest one.
pub const WINDOW_SIZE: usize = 10;
/// LiDAR plane-distance standard deviation, m.
pub const SIGMA_R: f64 = 0.1;
/// 95% quantile of chi-square with one degree of freedom.
pub const CHI2_95_1DOF: f64 = 3.841;
pub const HUBER_DELTA: f64 = 1.0;
/// Floor on the gyro-bias prior after a static initialization, rad/s.
const MIN_GYRO_BIAS_STD: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Ins(#[from] InsError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("solver failed with {keyframes} keyframes and {factors} LiDAR factors: {source}")]
    Solver {
        source: SolverError,
        keyframes: usize,
        factors: usize,
    },
    #[error("frame at {0} s has no points in range")]
    EmptyFrame(f64),
    #[error("IMU data ends at {imu} s, frame needs {needed} s")]
    ImuBehind { imu: f64, needed: f64 },
    #[error("window is empty")]
    EmptyWindow,
}

impl EstimatorError {
    fn solver(source: SolverError, w: &SlidingWindow) -> Self {
        EstimatorError::Solver { source, keyframes: w.len(), factors: w.factors.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    pub translation: f64,
    pub rotation: f64,
    pub max_interval: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { translation: 0.4, rotation: 10f64.to_radians(), max_interval: 0.5 }
    }
}

pub fn select_keyframe(translation: f64, rotation: f64, elapsed: f64, policy: &KeyframePolicy) -> bool {
    translation > policy.translation || rotation > policy.rotation || elapsed >= policy.max_interval
}

/// LiDAR-to-IMU transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicState {
    pub lever_arm: Vector3<f64>,
    pub rotation: Quat,
}

impl Default for ExtrinsicState {
    fn default() -> Self {
        Self { lever_arm: Vector3::zeros(), rotation: Quat::identity() }
    }
}

impl ExtrinsicState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.lever_arm, self.rotation)
    }
}

/// First-order motion of a keyframe around its epoch, used to move the state
/// to a different time delay without re-running mechanization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochShift {
    /// Time delay the keyframe epoch was computed with, s.
    pub td_lin: f64,
    /// Bias-corrected body angular rate, rad/s.
    pub omega: Vector3<f64>,
    /// World velocity, m/s.
    pub velocity: Vector3<f64>,
}

impl EpochShift {
    pub fn still(td_lin: f64) -> Self {
        Self { td_lin, omega: Vector3::zeros(), velocity: Vector3::zeros() }
    }

    /// Body pose at delay `td`.
    pub fn shifted(&self, p: &Vector3<f64>, q: &Quat, td: f64) -> Pose {
        let dt = td - self.td_lin;
        Pose::new(p + self.velocity * dt, q * quat_exp(&(self.omega * dt)))
    }
}

/// Jacobians of the whitened LiDAR residual. Attitude and extrinsic rotation
/// columns are body-frame right perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarJacobians {
    pub p_n: RowVector3<f64>,
    pub q_n: RowVector3<f64>,
    pub p_i: RowVector3<f64>,
    pub q_i: RowVector3<f64>,
    pub ext_p: RowVector3<f64>,
    pub ext_q: RowVector3<f64>,
    pub td: f64,
}

#[allow(clippy::too_many_arguments)]
fn lidar_eval(
    p_n: &Vector3<f64>,
    q_n: &Quat,
    s_n: &EpochShift,
    p_i: &Vector3<f64>,
    q_i: &Quat,
    s_i: &EpochShift,
    ext: &ExtrinsicState,
    td: f64,
    a: &PlaneAssociation,
    want_jac: bool,
) -> (f64, Option<LidarJacobians>) {
    let pose_n = s_n.shifted(p_n, q_n, td);
    let pose_i = s_i.shifted(p_i, q_i, td);
    let r_rb = ext.rotation.to_rotation_matrix().into_inner();
    let rn = pose_n.rotation.to_rotation_matrix().into_inner();
    let ri = pose_i.rotation.to_rotation_matrix().into_inner();

    let p_b = r_rb * a.point + ext.lever_arm;
    let p_w = rn * p_b + pose_n.translation;
    let p_bi = ri.transpose() * (p_w - pose_i.translation);
    let p_ri = r_rb.transpose() * (p_bi - ext.lever_arm);
    let inv_s = 1.0 / a.sigma;
    let r = (a.plane.normal.dot(&p_ri) + a.plane.d) * inv_s;
    if !want_jac {
        return (r, None);
    }

    // n^T R_r^bT R_i'^T / sigma: sensitivity to a world-frame displacement
    let nt = a.plane.normal.transpose() * inv_s;
    let g_w = nt * r_rb.transpose() * ri.transpose();
    let r_ni = ri.transpose() * rn;
    let dphi_n = -g_w * rn * skew(&p_b);
    let dphi_i = nt * r_rb.transpose() * skew(&p_bi);
    let en = exp_t(&s_n.omega, td - s_n.td_lin);
    let ei = exp_t(&s_i.omega, td - s_i.td_lin);
    let ext_p = nt * r_rb.transpose() * (r_ni - Matrix3::identity());
    let ext_q = nt * (-r_rb.transpose() * r_ni * r_rb * skew(&a.point) + skew(&p_ri));
    let td_j = g_w.dot(&(s_n.velocity - s_i.velocity).transpose())
        + dphi_n.dot(&s_n.omega.transpose())
        + dphi_i.dot(&s_i.omega.transpose());
    let jac = LidarJacobians {
        p_n: g_w,
        q_n: dphi_n * en.transpose(),
        p_i: -g_w,
        q_i: dphi_i * ei.transpose(),
        ext_p,
        ext_q,
        td: td_j,
    };
    (r, Some(jac))
}

fn exp_t(omega: &Vector3<f64>, dt: f64) -> Matrix3<f64> {
    quat_exp(&(omega * dt)).to_rotation_matrix().into_inner()
}

/// Whitened point-to-plane residual of `assoc`, with the newest keyframe `x_n`
/// and target keyframe `x_i`.
pub fn lidar_residual(
    x_n: &NavState,
    s_n: &EpochShift,
    x_i: &NavState,
    s_i: &EpochShift,
    ext: &ExtrinsicState,
    td: f64,
    assoc: &PlaneAssociation,
) -> f64 {
    lidar_eval(&x_n.p, &x_n.q, s_n, &x_i.p, &x_i.q, s_i, ext, td, assoc, false).0
}

pub fn lidar_jacobians(
    x_n: &NavState,
    s_n: &EpochShift,
    x_i: &NavState,
    s_i: &EpochShift,
    ext: &ExtrinsicState,
    td: f64,
    assoc: &PlaneAssociation,
) -> LidarJacobians {
    lidar_eval(&x_n.p, &x_n.q, s_n, &x_i.p, &x_i.q, s_i, ext, td, assoc, true).1.unwrap()
}

/// Blocks: `[p_n, q_n, p_i, q_i, ext_p, ext_q, td]`.
pub struct LidarCost {
    pub assoc: PlaneAssociation,
    pub shift_n: EpochShift,
    pub shift_i: EpochShift,
}

impl CostFunction for LidarCost {
    fn residual_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, p: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let ext = ExtrinsicState {
            lever_arm: Vector3::from_column_slice(p[4]),
            rotation: quat_from_array(p[5]),
        };
        let (r, jac) = lidar_eval(
            &Vector3::from_column_slice(p[0]),
            &quat_from_array(p[1]),
            &self.shift_n,
            &Vector3::from_column_slice(p[2]),
            &quat_from_array(p[3]),
            &self.shift_i,
            &ext,
            p[6][0],
            &self.assoc,
            jacobians.is_some(),
        );
        if let (Some(out), Some(j)) = (jacobians, jac) {
            for (k, row) in [j.p_n, j.q_n, j.p_i, j.q_i, j.ext_p, j.ext_q].iter().enumerate() {
                out[k].row_mut(0).copy_from(row);
            }
            out[6][(0, 0)] = j.td;
        }
        DVector::from_element(1, r)
    }
}

/// Whitened preintegration factor. Blocks: `[p_i, q_i, vb_i, p_j, q_j, vb_j]`
/// with `vb = [v, bg, ba]`.
pub struct PreintegrationCost {
    pub pre: Preintegration,
    pub gravity: Gravity,
    pub t_i: f64,
    sqrt_info: Matrix15,
}

impl PreintegrationCost {
    pub fn new(pre: Preintegration, gravity: Gravity, t_i: f64) -> Self {
        let sqrt_info = whitening(&pre.covariance);
        Self { pre, gravity, t_i, sqrt_info }
    }
}

/// S with S^T S = P^-1.
fn whitening(cov: &Matrix15) -> Matrix15 {
    let mut p = *cov;
    let scale = p.diagonal().max().max(1e-300);
    for jitter in [0.0, 1e-14, 1e-12, 1e-10] {
        if let Some(ch) = (p + Matrix15::identity() * jitter * scale).cholesky() {
            let l = ch.l();
            return l.try_inverse().unwrap_or_else(Matrix15::zeros);
        }
        p = *cov;
    }
    Matrix15::zeros()
}

pub(crate) fn state_from_blocks(t: f64, p: &[f64], q: &[f64], vb: &[f64]) -> NavState {
    NavState {
        t,
        p: Vector3::from_column_slice(p),
        q: quat_from_array(q),
        v: Vector3::from_column_slice(&vb[0..3]),
        bg: Vector3::from_column_slice(&vb[3..6]),
        ba: Vector3::from_column_slice(&vb[6..9]),
    }
}

impl CostFunction for PreintegrationCost {
    fn residual_dim(&self) -> usize {
        15
    }

    fn evaluate(&self, p: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let xi = state_from_blocks(self.t_i, p[0], p[1], p[2]);
        let xj = state_from_blocks(self.t_i + self.pre.dt, p[3], p[4], p[5]);
        let (r, j) = preintegration_residual_unchecked(&xi, &xj, &self.pre, &self.gravity);
        if let Some(out) = jacobians {
            let s = &self.sqrt_info;
            out[0].copy_from(&(s * j.p_i));
            out[1].copy_from(&(s * j.q_i));
            out[2].copy_from(&(s * j.vb_i));
            out[3].copy_from(&(s * j.p_j));
            out[4].copy_from(&(s * j.q_j));
            out[5].copy_from(&(s * j.vb_j));
        }
        DVector::from_column_slice((self.sqrt_info * r).as_slice())
    }
}

pub mod keys {
    use crate::solver::BlockKey;

    pub const EXT_P: BlockKey = u64::MAX - 2;
    pub const EXT_Q: BlockKey = u64::MAX - 1;
    pub const TD: BlockKey = u64::MAX;

    pub fn p(id: u64) -> BlockKey {
        3 * id
    }
    pub fn q(id: u64) -> BlockKey {
        3 * id + 1
    }
    pub fn vb(id: u64) -> BlockKey {
        3 * id + 2
    }
}

pub const TAG_PRIOR: u64 = u64::MAX;
pub const TAG_PREINT: u64 = u64::MAX - 1;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    /// LiDAR stamp, s.
    pub stamp: f64,
    /// Navigation state at `stamp + shift.td_lin`.
    pub state: NavState,
    pub shift: EpochShift,
    /// Raw undistorted points offered for association, LiDAR frame.
    pub points: Vec<Vector3<f64>>,
    pub map: KeyframeMap,
    /// Preintegration from the previous keyframe.
    pub preint: Option<Preintegration>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarFactor {
    pub assoc: PlaneAssociation,
    /// Keyframe id owning the point.
    pub source: u64,
    /// Keyframe id owning the plane.
    pub target: u64,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub keyframes: VecDeque<Keyframe>,
    pub extrinsic: ExtrinsicState,
    pub td: f64,
    pub prior: Option<PriorFactor>,
    pub factors: Vec<LidarFactor>,
    /// Number of keyframes kept after sliding.
    pub size: usize,
    pub gravity: Gravity,
}

impl SlidingWindow {
    pub fn new(extrinsic: ExtrinsicState, td: f64, gravity: Gravity) -> Self {
        Self {
            keyframes: VecDeque::new(),
            extrinsic,
            td,
            prior: None,
            factors: Vec::new(),
            size: WINDOW_SIZE,
            gravity,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.keyframes.len() > self.size
    }

    pub fn newest(&self) -> Option<&Keyframe> {
        self.keyframes.back()
    }

    fn find(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    /// Assembles the window problem. Extrinsic and delay blocks are constant
    /// unless `calibrate`.
    pub fn build_problem(&self, calibrate: bool, huber: Option<f64>) -> Problem {
        let mut pb = Problem::new();
        for kf in &self.keyframes {
            let s = &kf.state;
            pb.add_block(keys::p(kf.id), Manifold::Euclidean, DVector::from_column_slice(s.p.as_slice())).unwrap();
            pb.add_block(keys::q(kf.id), Manifold::UnitQuaternion, DVector::from_row_slice(&quat_to_array(&s.q)))
                .unwrap();
            let mut vb = DVector::zeros(9);
            vb.rows_mut(0, 3).copy_from(&s.v);
            vb.rows_mut(3, 3).copy_from(&s.bg);
            vb.rows_mut(6, 3).copy_from(&s.ba);
            pb.add_block(keys::vb(kf.id), Manifold::Euclidean, vb).unwrap();
        }
        let e = &self.extrinsic;
        pb.add_block(keys::EXT_P, Manifold::Euclidean, DVector::from_column_slice(e.lever_arm.as_slice())).unwrap();
        pb.add_block(keys::EXT_Q, Manifold::UnitQuaternion, DVector::from_row_slice(&quat_to_array(&e.rotation)))
            .unwrap();
        pb.add_block(keys::TD, Manifold::Euclidean, DVector::from_element(1, self.td)).unwrap();
        for k in [keys::EXT_P, keys::EXT_Q, keys::TD] {
            pb.set_constant(k, !calibrate).unwrap();
        }
        if let Some(prior) = &self.prior {
            pb.add_prior(prior.clone(), TAG_PRIOR).unwrap();
        }
        for w in self.keyframes.iter().collect::<Vec<_>>().windows(2) {
            let (a, b) = (w[0], w[1]);
            if let Some(pre) = &b.preint {
                let cost = PreintegrationCost::new(pre.clone(), self.gravity, a.state.t);
                let blocks = vec![keys::p(a.id), keys::q(a.id), keys::vb(a.id), keys::p(b.id), keys::q(b.id), keys::vb(b.id)];
                pb.add_residual(Box::new(cost), Loss::Trivial, blocks, TAG_PREINT).unwrap();
            }
        }
        let loss = huber.map_or(Loss::Trivial, Loss::Huber);
        for f in &self.factors {
            let (Some(src), Some(dst)) = (self.find(f.source), self.find(f.target)) else { continue };
            let cost = LidarCost { assoc: f.assoc, shift_n: src.shift, shift_i: dst.shift };
            let blocks = vec![
                keys::p(src.id),
                keys::q(src.id),
                keys::p(dst.id),
                keys::q(dst.id),
                keys::EXT_P,
                keys::EXT_Q,
                keys::TD,
            ];
            pb.add_residual(Box::new(cost), loss, blocks, f.assoc.id).unwrap();
        }
        pb
    }

    /// Copies optimized values back into the window.
    pub fn write_back(&mut self, pb: &Problem) {
        for kf in self.keyframes.iter_mut() {
            let t = kf.state.t;
            kf.state = state_from_blocks(
                t,
                pb.values(keys::p(kf.id)).unwrap().as_slice(),
                pb.values(keys::q(kf.id)).unwrap().as_slice(),
                pb.values(keys::vb(kf.id)).unwrap().as_slice(),
            );
        }
        self.extrinsic = ExtrinsicState {
            lever_arm: Vector3::from_column_slice(pb.values(keys::EXT_P).unwrap().as_slice()),
            rotation: quat_from_array(pb.values(keys::EXT_Q).unwrap().as_slice()),
        };
        self.td = pb.values(keys::TD).unwrap()[0];
    }

    /// LiDAR pose of keyframe `kf` at the current delay estimate.
    pub fn lidar_pose(&self, kf: &Keyframe) -> Pose {
        kf.shift.shifted(&kf.state.p, &kf.state.q, self.td).compose(&self.extrinsic.pose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub lm: LmOptions,
    pub huber_delta: f64,
    pub chi2_gate: f64,
    pub calibrate: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self { lm: LmOptions::default(), huber_delta: HUBER_DELTA, chi2_gate: CHI2_95_1DOF, calibrate: false }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub step1: SolveSummary,
    pub step2: Option<SolveSummary>,
    /// Association ids removed by the chi-square gate.
    pub culled: Vec<u64>,
    /// Sum of squared whitened LiDAR residuals at the solution, and count.
    pub lidar_chi2: (f64, usize),
}

/// Whitened squared residual of every LiDAR factor currently in `pb`.
fn lidar_chi2(pb: &Problem) -> Vec<(u64, f64)> {
    (0..pb.num_residuals())
        .filter(|i| !matches!(pb.residuals()[*i].tag, TAG_PRIOR | TAG_PREINT))
        .map(|i| (pb.residuals()[i].tag, pb.residual_value(i).norm_squared()))
        .collect()
}

/// Half squared whitened residual summed per factor kind: (prior, preintegration, LiDAR).
pub fn cost_breakdown(pb: &Problem) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for i in 0..pb.num_residuals() {
        let v = 0.5 * pb.residual_value(i).norm_squared();
        match pb.residuals()[i].tag {
            TAG_PRIOR => c.0 += v,
            TAG_PREINT => c.1 += v,
            _ => c.2 += v,
        }
    }
    c
}

/// Two-step optimization: Huber-weighted solve, chi-square culling of LiDAR
/// factors, then a solve on the survivors.
pub fn optimize_window(w: &mut SlidingWindow, opts: &OptimizeOptions) -> Result<OptimizeReport, EstimatorError> {
    if w.is_empty() {
        return Err(EstimatorError::EmptyWindow);
    }
    let mut pb = w.build_problem(opts.calibrate, Some(opts.huber_delta));
    if pb.num_residuals() == 0 {
        return Err(EstimatorError::solver(SolverError::Empty, w));
    }
    let step1 = pb.solve_lm(&opts.lm).map_err(|e| EstimatorError::solver(e, w))?;
    let culled: Vec<u64> =
        lidar_chi2(&pb).into_iter().filter(|(_, r2)| *r2 > opts.chi2_gate).map(|(id, _)| id).collect();
    let mut step2 = None;
    if !culled.is_empty() {
        pb.retain_residuals(|r| !culled.contains(&r.tag) || matches!(r.tag, TAG_PRIOR | TAG_PREINT));
        w.factors.retain(|f| !culled.contains(&f.assoc.id));
        step2 = Some(pb.solve_lm(&opts.lm).map_err(|e| EstimatorError::solver(e, w))?);
    }
    w.write_back(&pb);
    let chi2 = lidar_chi2(&pb);
    let lidar_chi2 = (chi2.iter().map(|(_, r2)| r2).sum(), chi2.len());
    Ok(OptimizeReport { step1, step2, culled, lidar_chi2 })
}

/// Removes the oldest keyframe, folding its factors and the previous prior
/// into a new prior. Extrinsic and delay blocks stay in the prior.
pub fn marginalize_and_slide(w: &mut SlidingWindow) -> Result<(), EstimatorError> {
    let Some(old) = w.keyframes.front() else { return Err(EstimatorError::EmptyWindow) };
    let id = old.id;
    let mut pb = w.build_problem(true, Some(HUBER_DELTA));
    let prior = pb
        .marginalize(&[keys::p(id), keys::q(id), keys::vb(id)], TAG_PRIOR)
        .map_err(|e| EstimatorError::solver(e, w))?;
    // factors of the old prior not connected to the dropped state remain
    let mut prior = prior;
    if let Some(old_prior) = &w.prior {
        if !old_prior.keys.iter().any(|k| [keys::p(id), keys::q(id), keys::vb(id)].contains(k)) {
            prior = merge_priors(old_prior, &prior);
        }
    }
    w.prior = Some(prior);
    w.keyframes.pop_front();
    if let Some(next) = w.keyframes.front_mut() {
        next.preint = None;
    }
    w.factors.retain(|f| f.source != id && f.target != id);
    Ok(())
}

/// Stacks two priors over possibly overlapping blocks into one.
fn merge_priors(a: &PriorFactor, b: &PriorFactor) -> PriorFactor {
    let mut keys = a.keys.clone();
    let mut manifolds = a.manifolds.clone();
    let mut x_lin = a.x_lin.clone();
    for (k, key) in b.keys.iter().enumerate() {
        if !keys.contains(key) {
            keys.push(*key);
            manifolds.push(b.manifolds[k]);
            x_lin.push(b.x_lin[k].clone());
        }
    }
    let dims: Vec<usize> = manifolds.iter().zip(&x_lin).map(|(m, x)| if *m == Manifold::UnitQuaternion { 3 } else { x.len() }).collect();
    let offset = |key: &BlockKey| -> usize {
        let i = keys.iter().position(|k| k == key).unwrap();
        dims[..i].iter().sum()
    };
    let n: usize = dims.iter().sum();
    let rows = a.residual.len() + b.residual.len();
    let mut j = DMatrix::zeros(rows, n);
    let mut r = DVector::zeros(rows);
    let mut row = 0;
    for p in [a, b] {
        let pd = p.tangent_dims();
        let mut col = 0;
        for (k, key) in p.keys.iter().enumerate() {
            let o = offset(key);
            j.view_mut((row, o), (p.residual.len(), pd[k])).copy_from(&p.sqrt_info.columns(col, pd[k]));
            col += pd[k];
        }
        r.rows_mut(row, p.residual.len()).copy_from(&p.residual);
        row += p.residual.len();
    }
    PriorFactor { keys, manifolds, x_lin, sqrt_info: j, residual: r }
}

/// Roll, pitch and yaw standard deviations of the newest keyframe, degrees.
pub fn attitude_std(w: &SlidingWindow, calibrate: bool) -> Result<Vector3<f64>, EstimatorError> {
    let kf = w.newest().ok_or(EstimatorError::EmptyWindow)?;
    let pb = w.build_problem(calibrate, Some(HUBER_DELTA));
    let cov = pb.covariance(&[keys::q(kf.id)]).map_err(|e| EstimatorError::solver(e, w))?;
    let e = euler_from_quat(&kf.state.q);
    let m = euler_rate_matrix(e.x, e.y);
    let cov = m * Matrix3::from_iterator(cov.iter().copied()) * m.transpose();
    Ok(cov.diagonal().map(|v| v.max(0.0).sqrt().to_degrees()))
}

/// Initial uncertainty of the first keyframe and the calibration blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPrior {
    pub position: f64,
    /// Roll and pitch, rad.
    pub tilt: f64,
    pub yaw: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub ext_rotation: f64,
    pub ext_translation: f64,
    pub time_delay: f64,
}

impl Default for InitialPrior {
    fn default() -> Self {
        Self {
            position: 0.01,
            tilt: 0.5f64.to_radians(),
            yaw: 0.01f64.to_radians(),
            velocity: 0.01,
            gyro_bias: 1e-3,
            accel_bias: 0.05,
            ext_rotation: 5f64.to_radians(),
            ext_translation: 0.5,
            time_delay: 0.05,
        }
    }
}

/// Prior on the first keyframe state and the calibration blocks. Tilt and yaw
/// uncertainties are world-frame and mapped into the body perturbation.
pub fn initial_prior(kf: &Keyframe, ext: &ExtrinsicState, td: f64, s: &InitialPrior) -> PriorFactor {
    let mut info = DMatrix::zeros(22, 22);
    for k in 0..3 {
        info[(k, k)] = 1.0 / s.position;
        info[(6 + k, 6 + k)] = 1.0 / s.velocity;
        info[(9 + k, 9 + k)] = 1.0 / s.gyro_bias;
        info[(12 + k, 12 + k)] = 1.0 / s.accel_bias;
        info[(15 + k, 15 + k)] = 1.0 / s.ext_translation;
        info[(18 + k, 18 + k)] = 1.0 / s.ext_rotation;
    }
    info[(21, 21)] = 1.0 / s.time_delay;
    // body perturbation dphi maps to world tilt/yaw error R dphi
    let r = kf.state.q.to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0 / s.tilt, 1.0 / s.tilt, 1.0 / s.yaw));
    info.view_mut((3, 3), (3, 3)).copy_from(&(d * r));
    let st = &kf.state;
    let mut vb = DVector::zeros(9);
    vb.rows_mut(0, 3).copy_from(&st.v);
    vb.rows_mut(3, 3).copy_from(&st.bg);
    vb.rows_mut(6, 3).copy_from(&st.ba);
    PriorFactor {
        keys: vec![keys::p(kf.id), keys::q(kf.id), keys::vb(kf.id), keys::EXT_P, keys::EXT_Q, keys::TD],
        manifolds: vec![
            Manifold::Euclidean,
            Manifold::UnitQuaternion,
            Manifold::Euclidean,
            Manifold::Euclidean,
            Manifold::UnitQuaternion,
            Manifold::Euclidean,
        ],
        x_lin: vec![
            DVector::from_column_slice(st.p.as_slice()),
            DVector::from_row_slice(&quat_to_array(&st.q)),
            vb,
            DVector::from_column_slice(ext.lever_arm.as_slice()),
            DVector::from_row_slice(&quat_to_array(&ext.rotation)),
            DVector::from_element(1, td),
        ],
        sqrt_info: info,
        residual: DVector::zeros(22),
    }
}

/// Smallest eigenvalue of the mean outer product of unit normals.
pub fn normal_spread(normals: &[Vector3<f64>]) -> f64 {
    if normals.is_empty() {
        return 0.0;
    }
    let c = normals.iter().map(|n| n * n.transpose()).sum::<Matrix3<f64>>() / normals.len() as f64;
    SymmetricEigen::new(c).eigenvalues.min()
}

pub type AssociationHook = Box<dyn FnMut(&mut Vec<PlaneAssociation>, &SlidingWindow)>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub policy: KeyframePolicy,
    pub sigma_r: f64,
    pub noise: ImuNoise,
    pub gravity: Gravity,
    pub extrinsic: ExtrinsicState,
    pub td: f64,
    pub calibrate: bool,
    pub window_size: usize,
    pub optimize: OptimizeOptions,
    pub association: AssociationParams,
    pub voxel_leaf: f64,
    pub range: (f64, f64),
    /// Cap on association source points per keyframe.
    pub max_source_points: usize,
    /// Accumulated rotation needed before calibration starts, rad.
    pub calibration_rotation: f64,
    /// Minimum normal spread for calibration updates.
    pub degeneracy_gate: f64,
    /// Static span needed for initialization, s.
    pub init_span: f64,
    pub zero_velocity: ZeroVelocityThresholds,
    pub bias_limits: BiasLimits,
    pub prior: InitialPrior,
    /// Compute the attitude STD per keyframe.
    pub attitude_std: bool,
    pub max_lever_arm: f64,
    pub max_time_delay: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            policy: KeyframePolicy::default(),
            sigma_r: SIGMA_R,
            noise: ImuNoise::default(),
            gravity: Gravity::default(),
            extrinsic: ExtrinsicState::default(),
            td: 0.0,
            calibrate: true,
            window_size: WINDOW_SIZE,
            optimize: OptimizeOptions::default(),
            association: AssociationParams::default(),
            voxel_leaf: VOXEL_LEAF,
            range: (0.5, 200.0),
            max_source_points: 80,
            calibration_rotation: 15f64.to_radians(),
            degeneracy_gate: 0.01,
            init_span: 1.0,
            zero_velocity: ZeroVelocityThresholds::default(),
            bias_limits: BiasLimits::default(),
            prior: InitialPrior::default(),
            attitude_std: true,
            max_lever_arm: 2.0,
            max_time_delay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    /// Waiting for initialization.
    Skipped,
    NonKeyframe,
    Keyframe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub kind: FrameKind,
    /// IMU time of the output state, s.
    pub t: f64,
    pub state: Option<NavState>,
    pub attitude_std: Option<Vector3<f64>>,
    pub extrinsic: ExtrinsicState,
    pub td: f64,
    pub associations: usize,
    pub culled: usize,
    /// Sum of squared whitened LiDAR residuals after optimization and the
    /// number of factors it covers.
    pub lidar_chi2: (f64, usize),
    pub calibrating: bool,
}

pub struct Estimator {
    cfg: EstimatorConfig,
    imu_backlog: Vec<ImuSample>,
    ins: Option<Ins>,
    window: SlidingWindow,
    pending: Vec<LidarFrame>,
    next_kf: u64,
    next_assoc: u64,
    rotation_accum: f64,
    calib_latched: bool,
    culled: Vec<u64>,
    hook: Option<AssociationHook>,
    static_init: bool,
    /// Length of the IMU span used for initialization, s.
    init_span: f64,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig) -> Self {
        let mut window = SlidingWindow::new(cfg.extrinsic, cfg.td, cfg.gravity);
        window.size = cfg.window_size;
        Self {
            cfg,
            imu_backlog: Vec::new(),
            ins: None,
            window,
            pending: Vec::new(),
            next_kf: 0,
            next_assoc: 0,
            rotation_accum: 0.0,
            calib_latched: false,
            culled: Vec::new(),
            hook: None,
            static_init: false,
            init_span: 0.0,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    pub fn is_initialized(&self) -> bool {
        self.ins.is_some()
    }

    pub fn calibration_active(&self) -> bool {
        self.calib_latched
    }

    /// Association ids removed by the chi-square gate so far.
    pub fn culled_ids(&self) -> &[u64] {
        &self.culled
    }

    /// Called on every keyframe's fresh associations before they enter the
    /// window.
    pub fn set_association_hook(&mut self, hook: AssociationHook) {
        self.hook = Some(hook);
    }

    pub fn push_imu(&mut self, s: ImuSample) -> Result<(), EstimatorError> {
        match &mut self.ins {
            Some(ins) => Ok(ins.push(s)?),
            None => {
                if let Some(last) = self.imu_backlog.last() {
                    if s.t <= last.t {
                        return Err(InsError::NonMonotone { prev: last.t, next: s.t }.into());
                    }
                }
                self.imu_backlog.push(s);
                Ok(())
            }
        }
    }

    pub fn imu_time(&self) -> Option<f64> {
        match &self.ins {
            Some(ins) => Some(ins.latest().t),
            None => self.imu_backlog.last().map(|s| s.t),
        }
    }

    /// Levels from the IMU backlog once `init_span` of data precedes `t`.
    fn try_initialize(&mut self, t: f64) -> Result<bool, EstimatorError> {
        let Some(first) = self.imu_backlog.first() else { return Ok(false) };
        if t - first.t < self.cfg.init_span {
            return Ok(false);
        }
        let used: Vec<ImuSample> = self.imu_backlog.iter().filter(|s| s.t <= t).copied().collect();
        let (roll, pitch) = init_attitude_from_accel(&used)?;
        let mut state = NavState::at_rest(first.t, quat_from_euler(roll, pitch, 0.0));
        self.static_init = detect_zero_velocity(&used, &self.cfg.zero_velocity);
        self.init_span = used.last().map_or(0.0, |s| s.t - first.t);
        if self.static_init {
            state.bg = estimate_gyro_bias_static(&used, &self.cfg.zero_velocity)?;
        } else {
            warn!("no zero-velocity period before {t:.3} s; starting with zero gyro bias");
        }
        let mut ins = Ins::new(state, *first, self.cfg.gravity)?;
        for s in self.imu_backlog.drain(..).skip(1) {
            ins.push(s)?;
        }
        self.ins = Some(ins);
        Ok(true)
    }

    pub fn process_frame(&mut self, frame: &LidarFrame) -> Result<FrameOutput, EstimatorError> {
        let td = self.window.td;
        let mut out = FrameOutput {
            kind: FrameKind::Skipped,
            t: frame.stamp + td,
            state: None,
            attitude_std: None,
            extrinsic: self.window.extrinsic,
            td,
            associations: 0,
            culled: 0,
            lidar_chi2: (0.0, 0),
            calibrating: self.calib_latched,
        };
        if self.ins.is_none() && !self.try_initialize(frame.stamp + td)? {
            return Ok(out);
        }
        let needed = frame.stamp + frame.max_offset() + td;
        let imu = self.ins.as_ref().unwrap().latest().t;
        if imu < needed {
            return Err(EstimatorError::ImuBehind { imu, needed });
        }
        let mut raw = frame.clone();
        raw.gate_range(self.cfg.range.0, self.cfg.range.1);
        if raw.points.is_empty() {
            return Err(EstimatorError::EmptyFrame(frame.stamp));
        }
        let ext_pose = self.window.extrinsic.pose();
        let ins = self.ins.as_ref().unwrap();
        let undistorted = undistort_frame(&raw, ins.buffer(), &ext_pose, td)?;
        let epoch = frame.stamp + td;
        let state = ins.state_at(epoch)?;
        out.state = Some(state);

        let (is_kf, rotation) = match self.window.newest() {
            None => (true, 0.0),
            Some(last) => {
                let trans = (state.p - last.state.p).norm();
                let rot = rotation_angle(&(last.state.q.inverse() * state.q));
                (select_keyframe(trans, rot, frame.stamp - last.stamp, &self.cfg.policy), rot)
            }
        };
        if !is_kf {
            self.pending.push(undistorted);
            out.kind = FrameKind::NonKeyframe;
            return Ok(out);
        }
        self.rotation_accum += rotation;
        self.add_keyframe(undistorted, state, epoch, &mut out)?;
        Ok(out)
    }

    fn add_keyframe(
        &mut self,
        mut frame: LidarFrame,
        state: NavState,
        epoch: f64,
        out: &mut FrameOutput,
    ) -> Result<(), EstimatorError> {
        let ins = self.ins.as_ref().unwrap();
        let td = self.window.td;
        let ext_pose = self.window.extrinsic.pose();
        frame.is_keyframe = true;
        let id = self.next_kf;
        self.next_kf += 1;

        let kf_pose = state.pose().compose(&ext_pose);
        let mut sources = Vec::with_capacity(self.pending.len());
        for f in &self.pending {
            sources.push((f, ins.buffer().pose_at(f.stamp + td)?.compose(&ext_pose)));
        }
        let map = build_keyframe_map_with_poses(id, &frame, &kf_pose, &sources, self.cfg.voxel_leaf);
        let points = stride_select(&frame.positions(), self.cfg.max_source_points);

        let omega = ins.angular_rate_at(epoch, &state.bg)?;
        let shift = EpochShift { td_lin: td, omega, velocity: state.v };
        let preint = match self.window.newest() {
            Some(last) => {
                let samples = ins.samples_between(last.state.t, epoch)?;
                Some(Preintegration::new(&samples, last.state.bg, last.state.ba, self.cfg.noise)?)
            }
            None => None,
        };

        // associations against every older keyframe map
        let mut assoc = Vec::new();
        if !self.window.is_empty() {
            let targets: Vec<(usize, Pose, &KeyframeMap)> = self
                .window
                .keyframes
                .iter()
                .enumerate()
                .map(|(slot, kf)| (slot, self.window.lidar_pose(kf), &kf.map))
                .collect();
            let params = AssociationParams { sigma: self.cfg.sigma_r, ..self.cfg.association };
            assoc = associate_keyframe(&points, &kf_pose, &targets, &params);
            for a in assoc.iter_mut() {
                a.id = self.next_assoc;
                self.next_assoc += 1;
            }
            if let Some(hook) = self.hook.as_mut() {
                hook(&mut assoc, &self.window);
            }
        }
        let normals: Vec<Vector3<f64>> = assoc
            .iter()
            .map(|a| self.window.lidar_pose(&self.window.keyframes[a.target]).rotation * a.plane.normal)
            .collect();
        for a in &assoc {
            let target = self.window.keyframes[a.target].id;
            self.window.factors.push(LidarFactor { assoc: *a, source: id, target });
        }
        out.associations = assoc.len();

        let kf = Keyframe { id, stamp: frame.stamp, state, shift, points, map, preint };
        if self.window.is_empty() {
            self.window.prior = Some(initial_prior(&kf, &self.window.extrinsic, td, &self.initial_prior()));
        }
        self.window.keyframes.push_back(kf);

        if self.cfg.calibrate
            && !self.calib_latched
            && self.window.is_full()
            && self.rotation_accum > self.cfg.calibration_rotation
        {
            debug!("calibration activated at {epoch:.3} s");
            self.calib_latched = true;
        }
        let spread = normal_spread(&normals);
        let calibrate = self.calib_latched && spread >= self.cfg.degeneracy_gate;
        if self.calib_latched && !calibrate {
            debug!("degenerate geometry at {epoch:.3} s (spread {spread:.4}); calibration frozen");
        }

        let before = (self.window.extrinsic, self.window.td);
        let opts = OptimizeOptions { calibrate, ..self.cfg.optimize };
        let report = optimize_window(&mut self.window, &opts)?;
        debug!(
            "keyframe {id} at {epoch:.3} s: {} factors, cost {:.3e} -> {:.3e} in {} iterations ({:?}), {} culled",
            self.window.factors.len(),
            report.step1.initial_cost,
            report.step2.as_ref().unwrap_or(&report.step1).final_cost,
            report.step1.iterations,
            report.step1.termination,
            report.culled.len()
        );
        if self.window.extrinsic.lever_arm.norm() > self.cfg.max_lever_arm || self.window.td.abs() > self.cfg.max_time_delay {
            warn!("calibration left its sanity range at {epoch:.3} s; restoring previous values");
            (self.window.extrinsic, self.window.td) = before;
        }
        for kf in self.window.keyframes.iter_mut() {
            kf.state.saturate_biases(&self.cfg.bias_limits);
        }
        out.culled = report.culled.len();
        out.lidar_chi2 = report.lidar_chi2;
        self.culled.extend(&report.culled);
        if self.cfg.attitude_std {
            out.attitude_std = attitude_std(&self.window, calibrate).ok();
        }
        let newest = self.window.newest().unwrap().state;
        if self.window.is_full() {
            marginalize_and_slide(&mut self.window)?;
        }
        let ins = self.ins.as_mut().unwrap();
        ins.reset(newest)?;
        let oldest = self.window.keyframes.front().map_or(epoch, |k| k.state.t);
        ins.prune_before(oldest.min(epoch - 1.0));
        self.pending.clear();

        out.kind = FrameKind::Keyframe;
        out.t = epoch;
        out.state = Some(newest);
        out.extrinsic = self.window.extrinsic;
        out.td = self.window.td;
        out.calibrating = calibrate;
        Ok(())
    }

    fn initial_prior(&self) -> InitialPrior {
        let mut p = self.cfg.prior;
        if self.static_init && self.init_span > 0.0 {
            // standard error of the static gyro average
            let sigma = (self.cfg.noise.gyro_noise / self.init_span.sqrt()).max(MIN_GYRO_BIAS_STD);
            p.gyro_bias = p.gyro_bias.min(sigma);
            // levelling error is dominated by the unseparated accelerometer bias
            p.tilt = p.tilt.min(p.accel_bias / self.cfg.gravity.0.norm());
        } else {
            p.velocity = p.velocity.max(1.0);
            p.gyro_bias = p.gyro_bias.max(0.01);
        }
        p
    }
}
