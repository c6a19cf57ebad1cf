//! Frame-to-frame data association: newest keyframe points against the
//! accumulated maps of the older keyframes in the window.

use nalgebra::Vector3;

use crate::pointcloud::{fit_plane, KeyframeMap, PlaneCoeffs, PLANE_FIT_GATE, PLANE_NEIGHBORS};
use crate::se3::Pose;

/// A raw point of the newest keyframe bound to a plane of an older keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneAssociation {
    /// Unique per run; assigned by the estimator.
    pub id: u64,
    /// Point in the newest keyframe's LiDAR frame, m.
    pub point: Vector3<f64>,
    /// Window slot of the keyframe owning the plane.
    pub target: usize,
    /// Plane in the target keyframe's LiDAR frame.
    pub plane: PlaneCoeffs,
    /// Plane-distance standard deviation, m.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationParams {
    pub neighbors: usize,
    /// Farthest neighbour allowed before fitting, m.
    pub search_radius: f64,
    /// Largest distance of any fit point from the fitted plane, m.
    pub plane_gate: f64,
    /// Gate on the projected point's distance to the fitted plane, m.
    pub projection_gate: f64,
    pub sigma: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            neighbors: PLANE_NEIGHBORS,
            search_radius: 1.0,
            plane_gate: PLANE_FIT_GATE,
            projection_gate: 0.2,
            sigma: 0.1,
        }
    }
}

/// Projects a point of LiDAR frame `n` into LiDAR frame `i`.
pub fn project_point(p: &Vector3<f64>, pose_n: &Pose, pose_i: &Pose) -> Vector3<f64> {
    pose_i.rotation.inverse() * (pose_n.rotation * p + pose_n.translation - pose_i.translation)
}

/// Associates each point with each map. `targets[k] = (window slot, LiDAR
/// pose, map)`; results come out in (map, point) order.
pub fn associate_keyframe(
    points: &[Vector3<f64>],
    pose_n: &Pose,
    targets: &[(usize, Pose, &KeyframeMap)],
    params: &AssociationParams,
) -> Vec<PlaneAssociation> {
    let mut out = Vec::new();
    let radius_sq = params.search_radius * params.search_radius;
    let mut nbrs = Vec::with_capacity(params.neighbors);
    for (slot, pose_i, map) in targets {
        if map.len() < params.neighbors {
            continue;
        }
        for p in points {
            let q = project_point(p, pose_n, pose_i);
            let nn = map.index().knn(&q, params.neighbors);
            if nn.last().map_or(true, |n| n.dist_sq > radius_sq) {
                continue;
            }
            nbrs.clear();
            nbrs.extend(nn.iter().map(|n| map.points()[n.index]));
            let Ok(plane) = fit_plane(&nbrs, params.plane_gate) else {
                continue;
            };
            if plane.signed_distance(&q).abs() >= params.projection_gate {
                continue;
            }
            out.push(PlaneAssociation {
                id: 0,
                point: *p,
                target: *slot,
                plane,
                sigma: params.sigma,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{quat_exp, Quat};
    use proptest::prelude::*;

    fn floor_map(z: f64) -> KeyframeMap {
        let pts = (-20..=20)
            .flat_map(|i| (-20..=20).map(move |j| Vector3::new(i as f64 * 0.5, j as f64 * 0.5, z)))
            .collect();
        KeyframeMap::new(0, pts)
    }

    #[test]
    fn projection_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let pose = Pose::new(Vector3::new(4.0, -1.0, 0.5), quat_exp(&Vector3::new(0.1, 0.2, 0.3)));
        assert!((project_point(&p, &pose, &pose) - p).amax() < 1e-15);
        let tn = Vector3::new(1.0, 0.0, 0.0);
        let ti = Vector3::new(0.0, 2.0, 0.0);
        let got = project_point(&p, &Pose::new(tn, Quat::identity()), &Pose::new(ti, Quat::identity()));
        assert_eq!(got, p + tn - ti);
    }

    #[test]
    fn exact_plane_associates_everything() {
        let map = floor_map(2.0);
        let points: Vec<_> = (0..30).map(|k| Vector3::new(-3.0 + 0.2 * k as f64, 0.1 * k as f64 - 1.0, 2.0)).collect();
        let params = AssociationParams::default();
        let out = associate_keyframe(&points, &Pose::identity(), &[(0, Pose::identity(), &map)], &params);
        assert_eq!(out.len(), points.len());
        for a in &out {
            assert!(a.plane.signed_distance(&a.point).abs() < 1e-9);
            assert_eq!(a.target, 0);
        }
    }

    #[test]
    fn radius_gate_rejects_far_maps() {
        let map = floor_map(2.0);
        let far = [Vector3::new(0.0, 0.0, 4.0)];
        let out = associate_keyframe(&far, &Pose::identity(), &[(0, Pose::identity(), &map)], &Default::default());
        assert!(out.is_empty());
    }

    #[test]
    fn pose_error_along_normal_is_rejected() {
        let map = floor_map(2.0);
        let points = [Vector3::new(0.3, 0.2, 2.0), Vector3::new(-1.1, 0.7, 2.0)];
        let shifted = Pose::new(Vector3::new(0.0, 0.0, 0.5), Quat::identity());
        // 0.5 m offset along the normal exceeds the 0.2 m projection gate
        let out = associate_keyframe(&points, &shifted, &[(0, Pose::identity(), &map)], &Default::default());
        assert!(out.is_empty());
        let small = Pose::new(Vector3::new(0.0, 0.0, 0.15), Quat::identity());
        let out = associate_keyframe(&points, &small, &[(0, Pose::identity(), &map)], &Default::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn association_count_monotone_in_gate() {
        let map = floor_map(2.0);
        let points: Vec<_> = (0..40)
            .map(|k| Vector3::new(0.1 * k as f64 - 2.0, 0.05 * k as f64, 2.0 + 0.01 * k as f64))
            .collect();
        let mut last = 0;
        for gate in [0.05, 0.1, 0.2, 0.3, 0.5] {
            let params = AssociationParams { projection_gate: gate, ..Default::default() };
            let n = associate_keyframe(&points, &Pose::identity(), &[(0, Pose::identity(), &map)], &params).len();
            assert!(n >= last);
            last = n;
        }
    }

    proptest! {
        #[test]
        fn projection_inverse_composition(
            a in proptest::array::uniform3(-2.0..2.0f64),
            b in proptest::array::uniform3(-2.0..2.0f64),
            ta in proptest::array::uniform3(-10.0..10.0f64),
            tb in proptest::array::uniform3(-10.0..10.0f64),
            p in proptest::array::uniform3(-20.0..20.0f64),
        ) {
            let pn = Pose::new(Vector3::from(ta), quat_exp(&Vector3::from(a)));
            let pi = Pose::new(Vector3::from(tb), quat_exp(&Vector3::from(b)));
            let p = Vector3::from(p);
            let back = project_point(&project_point(&p, &pn, &pi), &pi, &pn);
            prop_assert!((back - p).amax() < 1e-12);
        }
    }
}
