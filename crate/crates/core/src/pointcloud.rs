//! LiDAR frame containers, voxel-grid filtering, exact nearest-neighbour
//! search, local plane fitting, motion compensation and keyframe map building.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::ins::{InsError, InsPoseBuffer};
use crate::se3::Pose;

/// Voxel leaf size for frames and keyframe maps, m.
pub const VOXEL_LEAF: f64 = 0.5;
/// Neighbours used for each local plane.
pub const PLANE_NEIGHBORS: usize = 5;
/// Maximum point-to-plane distance of every fit point, m.
pub const PLANE_FIT_GATE: f64 = 0.1;
/// Minimum ratio of singular values accepted by the plane solve.
pub const PLANE_CONDITION_GATE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("nearest-neighbour query on an empty map")]
    EmptyMap,
    #[error("pose buffer does not cover point time: {0}")]
    BufferGap(#[from] InsError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum PlaneFitError {
    #[error("need {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate neighbourhood (singular value ratio {0:.2e})")]
    Degenerate(f64),
    #[error("fit point {distance:.3} m off the plane")]
    NotPlanar { distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Seconds after the frame stamp.
    pub t_offset: f64,
    /// Position in the LiDAR frame at sample time, m.
    pub position: Vector3<f64>,
}

impl LidarPoint {
    pub fn new(t_offset: f64, position: Vector3<f64>) -> Self {
        Self { t_offset, position }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarFrame {
    /// Frame start in the LiDAR clock, s.
    pub stamp: f64,
    pub points: Vec<LidarPoint>,
    pub is_keyframe: bool,
}

impl LidarFrame {
    pub fn new(stamp: f64, mut points: Vec<LidarPoint>) -> Self {
        points.sort_by(|a, b| a.t_offset.total_cmp(&b.t_offset));
        Self {
            stamp,
            points,
            is_keyframe: false,
        }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn max_offset(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.t_offset)
    }

    /// Drops points whose range lies outside `[min, max]`.
    pub fn gate_range(&mut self, min: f64, max: f64) {
        self.points.retain(|p| {
            let r = p.position.norm();
            r.is_finite() && r >= min && r <= max
        });
    }
}

/// Plane `n^T p + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCoeffs {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl PlaneCoeffs {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }

    /// The same plane expressed in a parent frame, `x_parent = T * x`.
    pub fn transformed(&self, pose: &Pose) -> PlaneCoeffs {
        let normal = pose.rotation * self.normal;
        PlaneCoeffs {
            normal,
            d: self.d - normal.dot(&pose.translation),
        }
    }
}

fn voxel_key(p: &Vector3<f64>, leaf: f64) -> u64 {
    const OFFSET: i64 = 1 << 20;
    const MASK: u64 = (1 << 21) - 1;
    let c = |v: f64| (((v / leaf).floor() as i64 + OFFSET) as u64) & MASK;
    (c(p.x) << 42) | (c(p.y) << 21) | c(p.z)
}

/// One centroid per occupied voxel, in first-occupancy order.
pub fn voxel_downsample(points: &[Vector3<f64>], leaf: f64) -> Vec<Vector3<f64>> {
    assert!(leaf > 0.0, "voxel leaf must be positive");
    let mut slots: HashMap<u64, usize> = HashMap::with_capacity(points.len());
    let mut acc: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in points {
        let slot = *slots.entry(voxel_key(p, leaf)).or_insert_with(|| {
            acc.push((Vector3::zeros(), 0));
            acc.len() - 1
        });
        acc[slot].0 += p;
        acc[slot].1 += 1;
    }
    acc.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// At most `max` points taken at an even stride in scan order. Unlike a
/// per-voxel pick, the choice does not depend on the noisy positions.
pub fn stride_select(points: &[Vector3<f64>], max: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max {
        return points.to_vec();
    }
    let stride = points.len() as f64 / max as f64;
    (0..max).map(|k| points[(k as f64 * stride) as usize]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static 3-d tree with exact k-nearest-neighbour queries.
#[derive(Debug, Clone, Default)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::with_capacity(order.len()),
            root: None,
        };
        tree.root = tree.build_rec(&mut order);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        // split on the axis of largest extent
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(KdNode { point, axis, left: None, right: None });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build_rec(l);
        let right = self.build_rec(&mut r[1..]);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// The `min(k, len)` nearest points, closest first. Ties break on index.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, query, k, &mut heap);
            }
        }
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let cand = Neighbor { index: n.point, dist_sq: (p - q).norm_squared() };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, k, heap);
        }
        if let Some(c) = far {
            if heap.len() < k || diff * diff <= heap.peek().unwrap().dist_sq {
                self.search(c, q, k, heap);
            }
        }
    }
}

/// Accumulated, downsampled cloud of one keyframe, expressed in the
/// keyframe's LiDAR frame at its anchor epoch.
#[derive(Debug, Clone)]
pub struct KeyframeMap {
    pub id: u64,
    index: KdTree,
}

impl KeyframeMap {
    pub fn new(id: u64, points: Vec<Vector3<f64>>) -> Self {
        Self { id, index: KdTree::build(points) }
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        self.index.points()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &KdTree {
        &self.index
    }
}

pub fn knn(map: &KeyframeMap, query: &Vector3<f64>, k: usize) -> Result<Vec<Neighbor>, CloudError> {
    if map.is_empty() {
        return Err(CloudError::EmptyMap);
    }
    Ok(map.index.knn(query, k))
}

/// Least-squares plane through the points with `d` normalised to 1, followed
/// by the per-point distance gate.
pub fn fit_plane(points: &[Vector3<f64>], gate: f64) -> Result<PlaneCoeffs, PlaneFitError> {
    if points.len() < 3 {
        return Err(PlaneFitError::TooFewPoints { needed: 3, got: points.len() });
    }
    // A n = -1 with rows p^T
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        ata += p * p.transpose();
        atb -= p;
    }
    let eig = ata.symmetric_eigenvalues();
    let (min, max) = (eig.min().max(0.0), eig.max());
    let ratio = if max > 0.0 { (min / max).sqrt() } else { 0.0 };
    if ratio < PLANE_CONDITION_GATE {
        return Err(PlaneFitError::Degenerate(ratio));
    }
    let n = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or(PlaneFitError::Degenerate(ratio))?;
    let norm = n.norm();
    let plane = PlaneCoeffs { normal: n / norm, d: 1.0 / norm };
    for p in points {
        let distance = plane.signed_distance(p).abs();
        if distance >= gate {
            return Err(PlaneFitError::NotPlanar { distance });
        }
    }
    Ok(plane)
}

/// LiDAR pose in the world at IMU time `t`.
fn lidar_pose_at(buffer: &InsPoseBuffer, extrinsic: &Pose, t: f64) -> Result<Pose, CloudError> {
    Ok(buffer.pose_at(t)?.compose(extrinsic))
}

/// Re-expresses every point in the LiDAR frame at the frame start
/// (`stamp + t_d` in IMU time), using the pose buffer at each point's sample
/// time. `extrinsic` is the LiDAR-to-IMU transform.
pub fn undistort_frame(
    frame: &LidarFrame,
    buffer: &InsPoseBuffer,
    extrinsic: &Pose,
    t_d: f64,
) -> Result<LidarFrame, CloudError> {
    let anchor = lidar_pose_at(buffer, extrinsic, frame.stamp + t_d)?;
    let mut points = Vec::with_capacity(frame.points.len());
    for pt in &frame.points {
        let pose = lidar_pose_at(buffer, extrinsic, frame.stamp + pt.t_offset + t_d)?;
        let world = pose.transform_point(&pt.position);
        points.push(LidarPoint::new(pt.t_offset, anchor.inverse_transform_point(&world)));
    }
    Ok(LidarFrame {
        stamp: frame.stamp,
        points,
        is_keyframe: frame.is_keyframe,
    })
}

/// Projects undistorted intermediate frames into the keyframe's LiDAR frame
/// using the buffered INS poses, unions them with the keyframe cloud and
/// downsamples the result.
pub fn build_keyframe_map(
    id: u64,
    keyframe: &LidarFrame,
    intermediates: &[LidarFrame],
    buffer: &InsPoseBuffer,
    extrinsic: &Pose,
    t_d: f64,
    leaf: f64,
) -> Result<KeyframeMap, CloudError> {
    let anchor = lidar_pose_at(buffer, extrinsic, keyframe.stamp + t_d)?;
    let mut sources = Vec::with_capacity(intermediates.len());
    for f in intermediates {
        sources.push((f, lidar_pose_at(buffer, extrinsic, f.stamp + t_d)?));
    }
    Ok(build_keyframe_map_with_poses(id, keyframe, &anchor, &sources, leaf))
}

/// As [`build_keyframe_map`], with the LiDAR poses of every frame supplied.
pub fn build_keyframe_map_with_poses(
    id: u64,
    keyframe: &LidarFrame,
    keyframe_pose: &Pose,
    intermediates: &[(&LidarFrame, Pose)],
    leaf: f64,
) -> KeyframeMap {
    let mut cloud = keyframe.positions();
    for (frame, pose) in intermediates {
        let rel = keyframe_pose.between(pose);
        cloud.extend(frame.points.iter().map(|p| rel.transform_point(&p.position)));
    }
    KeyframeMap::new(id, voxel_downsample(&cloud, leaf))
}
