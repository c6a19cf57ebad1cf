//! Trajectory metrics under the yaw-plus-translation gauge.

use nalgebra::{Rotation3, Vector3};
use thiserror::Error;

use crate::se3::{pose_interpolate, quat_log, Pose, Quat};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: Quat,
}

impl TrajectoryRecord {
    pub fn new(t: f64, p: Vector3<f64>, q: Quat) -> Self {
        Self { t, p, q }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.p, self.q)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least 2 overlapping poses, got {0}")]
    TooFewPoses(usize),
    #[error("trajectory not time-ordered at {0} s")]
    Unordered(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// RMS position error after alignment, m.
    pub ate: f64,
    /// RMS attitude error after alignment, deg.
    pub are: f64,
    /// Final position error after aligning the first pose, m.
    pub end_to_end: f64,
    /// Distance travelled by the truth over the compared span, m.
    pub distance: f64,
    pub poses: usize,
}

/// Yaw about the world z axis plus a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawAlignment {
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

impl YawAlignment {
    pub fn rotation(&self) -> Quat {
        Quat::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn apply(&self, r: &TrajectoryRecord) -> TrajectoryRecord {
        let rot = self.rotation();
        TrajectoryRecord::new(r.t, rot * r.p + self.translation, rot * r.q)
    }
}

/// Least-squares yaw and translation mapping `est` positions onto `truth`.
pub fn align_yaw_translation(est: &[Vector3<f64>], truth: &[Vector3<f64>]) -> YawAlignment {
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / n;
    let ct = truth.iter().sum::<Vector3<f64>>() / n;
    let (mut s_cos, mut s_sin) = (0.0, 0.0);
    for (e, g) in est.iter().zip(truth) {
        let (a, b) = (e - ce, g - ct);
        s_cos += a.x * b.x + a.y * b.y;
        s_sin += a.x * b.y - a.y * b.x;
    }
    let yaw = if s_cos == 0.0 && s_sin == 0.0 { 0.0 } else { s_sin.atan2(s_cos) };
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    YawAlignment { yaw, translation: ct - rot * ce }
}

/// Truth interpolated at `t`, if inside its span.
pub fn interpolate_truth(truth: &[TrajectoryRecord], t: f64) -> Option<TrajectoryRecord> {
    let i = truth.partition_point(|r| r.t < t);
    if i < truth.len() && (truth[i].t - t).abs() < 1e-9 {
        return Some(truth[i]);
    }
    if i == 0 || i == truth.len() {
        return None;
    }
    let (a, b) = (&truth[i - 1], &truth[i]);
    let p = pose_interpolate(&a.pose(), a.t, &b.pose(), b.t, t).ok()?;
    Some(TrajectoryRecord::new(t, p.translation, p.rotation))
}

fn check_order(tr: &[TrajectoryRecord]) -> Result<(), EvalError> {
    for w in tr.windows(2) {
        if w[1].t <= w[0].t {
            return Err(EvalError::Unordered(w[1].t));
        }
    }
    Ok(())
}

pub fn evaluate(estimate: &[TrajectoryRecord], truth: &[TrajectoryRecord]) -> Result<Metrics, EvalError> {
    check_order(estimate)?;
    check_order(truth)?;
    let pairs: Vec<(TrajectoryRecord, TrajectoryRecord)> =
        estimate.iter().filter_map(|e| interpolate_truth(truth, e.t).map(|g| (*e, g))).collect();
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPoses(pairs.len()));
    }
    let est_p: Vec<_> = pairs.iter().map(|(e, _)| e.p).collect();
    let tru_p: Vec<_> = pairs.iter().map(|(_, g)| g.p).collect();
    let al = align_yaw_translation(&est_p, &tru_p);
    let n = pairs.len() as f64;
    let (mut se_p, mut se_r) = (0.0, 0.0);
    for (e, g) in &pairs {
        let a = al.apply(e);
        se_p += (a.p - g.p).norm_squared();
        se_r += quat_log(&(a.q.inverse() * g.q)).norm_squared();
    }

    let (e0, g0) = pairs[0];
    let yaw0 = {
        // heading of the body x axis in the horizontal plane
        let he = e0.q * Vector3::x();
        let hg = g0.q * Vector3::x();
        hg.y.atan2(hg.x) - he.y.atan2(he.x)
    };
    let rot0 = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw0);
    let first = YawAlignment { yaw: yaw0, translation: g0.p - rot0 * e0.p };
    let (el, gl) = pairs[pairs.len() - 1];
    let end_to_end = (first.apply(&el).p - gl.p).norm();
    let distance = tru_p.windows(2).map(|w| (w[1] - w[0]).norm()).sum();

    Ok(Metrics {
        ate: (se_p / n).sqrt(),
        are: (se_r / n).sqrt().to_degrees(),
        end_to_end,
        distance,
        poses: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::quat_from_euler;
    use proptest::prelude::*;

    fn line(n: usize) -> Vec<TrajectoryRecord> {
        (0..n)
            .map(|k| {
                let t = k as f64;
                TrajectoryRecord::new(t, Vector3::new(t, 0.3 * t * t, 0.1 * t), quat_from_euler(0.01 * t, 0.0, 0.2 * t))
            })
            .collect()
    }

    #[test]
    fn identical_trajectories() {
        let tr = line(10);
        let m = evaluate(&tr, &tr).unwrap();
        assert!(m.ate < 1e-12 && m.are < 1e-9 && m.end_to_end < 1e-12);
    }

    #[test]
    fn constant_offset_is_absorbed() {
        let tr = line(10);
        let est: Vec<_> = tr.iter().map(|r| TrajectoryRecord { p: r.p + Vector3::x(), ..*r }).collect();
        let m = evaluate(&est, &tr).unwrap();
        assert!(m.ate < 1e-12 && m.end_to_end < 1e-12);
    }

    #[test]
    fn yaw_and_translation_are_absorbed() {
        let tr = line(10);
        let al = YawAlignment { yaw: 0.7, translation: Vector3::new(1.0, -2.0, 0.5) };
        let est: Vec<_> = tr.iter().map(|r| al.apply(r)).collect();
        let m = evaluate(&est, &tr).unwrap();
        assert!(m.ate < 1e-12 && m.are < 1e-9 && m.end_to_end < 1e-12);
    }

    #[test]
    fn three_pose_hand_case() {
        // collinear poses along x; the z perturbation on the middle pose is
        // partly absorbed by the translation: residuals (-1/3, 2/3, -1/3) * 0.1
        let tr: Vec<_> =
            (0..3).map(|k| TrajectoryRecord::new(k as f64, Vector3::new(k as f64, 0.0, 0.0), Quat::identity())).collect();
        let mut est = tr.clone();
        est[1].p.z += 0.1;
        let m = evaluate(&est, &tr).unwrap();
        let oracle = (0.1f64 * 0.1 * (1.0 + 4.0 + 1.0) / 9.0 / 3.0).sqrt();
        assert!((m.ate - oracle).abs() < 1e-9);
        assert!((m.ate - 0.1 * 2f64.sqrt() / 3.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_poses() {
        let tr = line(3);
        assert_eq!(evaluate(&tr[..1], &tr), Err(EvalError::TooFewPoses(1)));
    }

    #[test]
    fn unordered_is_rejected() {
        let mut tr = line(4);
        tr.swap(1, 2);
        assert!(matches!(evaluate(&tr, &line(4)), Err(EvalError::Unordered(_))));
    }

    proptest! {
        #[test]
        fn time_shift_invariance(shift in -100.0..100.0f64, dz in -0.2..0.2f64) {
            let tr = line(8);
            let est: Vec<_> = tr.iter().enumerate().map(|(k, r)| TrajectoryRecord { p: r.p + Vector3::new(0.0, 0.0, dz * (k % 3) as f64), ..*r }).collect();
            let a = evaluate(&est, &tr).unwrap();
            let sh = |v: &[TrajectoryRecord]| v.iter().map(|r| TrajectoryRecord { t: r.t + shift, ..*r }).collect::<Vec<_>>();
            let b = evaluate(&sh(&est), &sh(&tr)).unwrap();
            prop_assert!((a.ate - b.ate).abs() < 1e-9);
            prop_assert!((a.end_to_end - b.end_to_end).abs() < 1e-9);
        }
    }
}
