//! Control nodes, primitive-to-node binding and motion propagation.
//!
//! Each node carries a canonical center `c`, an RBF radius `ρ` and a
//! [`SplineTrajectory`]. Its rigid transform at time `t` rotates space about
//! the canonical center and carries the center onto the trajectory:
//!
//! ```text
//! T(t)·x = R(t)·(x − c) + ξ(t)
//! ```
//!
//! Primitives bind to their `K` nearest nodes in canonical space with
//! normalized Gaussian weights `exp(−‖x − c‖² / 2ρ²)`. At query time the
//! bound node transforms are combined by dual quaternion blending.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::rigid::{dqb_blend, se3_to_dq, RigidError, SE3Pose, UnitQuaternion};
use crate::spline::{keyframe_weights, SplineError, SplineTrajectory};

/// Default neighborhood size.
pub const DEFAULT_K: usize = 4;
/// The radius of a node is its distance to this many-th nearest other node.
pub const RADIUS_NEIGHBOR_RANK: usize = 3;
/// Pairs closer than this are treated as coincident by the ARAP term.
const COINCIDENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeformError {
    #[error("need {needed} nodes, only {available} available")]
    InsufficientNodes { needed: usize, available: usize },
    #[error("empty neighborhood")]
    EmptyNeighborhood,
    #[error("node index {0} out of range")]
    NodeIndex(usize),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("neighbor graph is not symmetric ({0} -> {1} has no reverse edge)")]
    AsymmetricGraph(usize, usize),
    #[error("nodes do not share keyframe times")]
    KeyframeMismatch,
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Rigid(#[from] RigidError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub trajectory: SplineTrajectory,
}

impl Node {
    pub fn new(center: Vector3<f64>, radius: f64, trajectory: SplineTrajectory) -> Result<Self, DeformError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(DeformError::InvalidNode(format!("radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius, trajectory })
    }

    /// Node resting at `center` for the whole span, identity rotations.
    pub fn fixed(center: Vector3<f64>, radius: f64, keyframe_times: Vec<f64>) -> Result<Self, DeformError> {
        Self::new(center, radius, SplineTrajectory::constant(keyframe_times, center)?)
    }

    pub fn se3_at(&self, t: f64) -> Result<SE3Pose, DeformError> {
        node_se3_at(self, t)
    }
}

/// `R = rotation(t)`, `t = ξ(t) − R·c`, so that `c ↦ ξ(t)`.
pub fn node_se3_at(node: &Node, t: f64) -> Result<SE3Pose, DeformError> {
    let rotation = node.trajectory.eval_rotation(t)?;
    let position = node.trajectory.eval_position(t)?;
    Ok(SE3Pose::new(rotation, position - rotation.rotate(&node.center)))
}

/// A 3D Gaussian with degree-0 color.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Primitive {
    pub fn new(
        mean: Vector3<f64>,
        covariance: Matrix3<f64>,
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self, DeformError> {
        if (covariance - covariance.transpose()).amax() > 1e-12 {
            return Err(DeformError::InvalidPrimitive("covariance is not symmetric".into()));
        }
        let eig = covariance.symmetric_eigenvalues();
        if eig.iter().any(|&e| !(e > 1e-12)) {
            return Err(DeformError::InvalidPrimitive("covariance is not positive definite".into()));
        }
        if !(opacity > 0.0 && opacity < 1.0) {
            return Err(DeformError::InvalidPrimitive(format!("opacity {opacity} outside (0, 1)")));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DeformError::InvalidPrimitive("color outside [0, 1]".into()));
        }
        Ok(Self { mean, covariance, opacity, color })
    }

    /// `μ ↦ T·μ`, `Σ ↦ R·Σ·Rᵀ`.
    pub fn transformed(&self, pose: &SE3Pose) -> Primitive {
        let r = pose.rotation_matrix();
        Primitive {
            mean: pose.transform_point(&self.mean),
            covariance: r * self.covariance * r.transpose(),
            opacity: self.opacity,
            color: self.color,
        }
    }
}

/// Indices of the `k` nearest node centers; ties go to the lower index.
pub fn knn_nodes(point: &Vector3<f64>, nodes: &[Node], k: usize) -> Result<Vec<usize>, DeformError> {
    let centers: Vec<_> = nodes.iter().map(|n| n.center).collect();
    knn_points(point, &centers, k)
}

pub(crate) fn knn_points(point: &Vector3<f64>, centers: &[Vector3<f64>], k: usize) -> Result<Vec<usize>, DeformError> {
    if centers.len() < k {
        return Err(DeformError::InsufficientNodes { needed: k, available: centers.len() });
    }
    let mut order: Vec<(f64, usize)> =
        centers.iter().enumerate().map(|(i, c)| ((c - point).norm_squared(), i)).collect();
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.truncate(k);
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

/// Normalized RBF weights over `neighbors`.
///
/// If every kernel value underflows, the nearest neighbor receives the
/// full weight.
pub fn bind_weights(point: &Vector3<f64>, nodes: &[Node], neighbors: &[usize]) -> Result<Vec<f64>, DeformError> {
    if neighbors.is_empty() {
        return Err(DeformError::EmptyNeighborhood);
    }
    let mut raw = Vec::with_capacity(neighbors.len());
    for &i in neighbors {
        let node = nodes.get(i).ok_or(DeformError::NodeIndex(i))?;
        let d2 = (point - node.center).norm_squared();
        raw.push((-d2 / (2.0 * node.radius * node.radius)).exp());
    }
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return Ok(raw.into_iter().map(|w| w / sum).collect());
    }
    let nearest = neighbors
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (point - nodes[*a.1].center).norm_squared();
            let db = (point - nodes[*b.1].center).norm_squared();
            da.total_cmp(&db)
        })
        .map(|(slot, _)| slot)
        .unwrap_or(0);
    let mut w = vec![0.0; neighbors.len()];
    w[nearest] = 1.0;
    Ok(w)
}

/// Per-node RBF radius: distance to the third-nearest other node. Falls
/// back to the farthest available neighbor, then to `fallback`.
pub fn node_radii(centers: &[Vector3<f64>], fallback: f64) -> Vec<f64> {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut d: Vec<f64> = centers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| (o - c).norm())
                .filter(|&d| d > 1e-9)
                .collect();
            d.sort_by(f64::total_cmp);
            match d.len() {
                0 => fallback,
                n => d[(RADIUS_NEIGHBOR_RANK - 1).min(n - 1)],
            }
        })
        .collect()
}

/// Frozen `(node, weight)` lists, one per primitive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BindingTable {
    rows: Vec<Vec<(usize, f64)>>,
}

impl BindingTable {
    /// Binds every point to its `k` nearest nodes.
    pub fn build(points: &[Vector3<f64>], nodes: &[Node], k: usize) -> Result<Self, DeformError> {
        let rows = points
            .iter()
            .map(|p| {
                let idx = knn_nodes(p, nodes, k)?;
                let w = bind_weights(p, nodes, &idx)?;
                Ok(idx.into_iter().zip(w).collect())
            })
            .collect::<Result<Vec<_>, DeformError>>()?;
        Ok(Self { rows })
    }

    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self, DeformError> {
        for row in &rows {
            if row.is_empty() {
                return Err(DeformError::EmptyNeighborhood);
            }
            let sum: f64 = row.iter().map(|r| r.1).sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|r| r.1 < 0.0) {
                return Err(DeformError::Rigid(RigidError::InvalidWeights { sum }));
            }
            for (a, (i, _)) in row.iter().enumerate() {
                if row[a + 1..].iter().any(|(j, _)| j == i) {
                    return Err(DeformError::InvalidNode(format!("node {i} bound twice")));
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, primitive: usize) -> &[(usize, f64)] {
        &self.rows[primitive]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Blended rigid transform of one binding row at time `t`.
pub fn blended_pose(nodes: &[Node], binding: &[(usize, f64)], t: f64) -> Result<SE3Pose, DeformError> {
    let entries = binding
        .iter()
        .map(|&(i, w)| {
            let node = nodes.get(i).ok_or(DeformError::NodeIndex(i))?;
            Ok((w, se3_to_dq(&node_se3_at(node, t)?)))
        })
        .collect::<Result<Vec<_>, DeformError>>()?;
    Ok(dqb_blend(&entries)?)
}

pub fn deform_primitive(
    prim: &Primitive,
    nodes: &[Node],
    binding: &[(usize, f64)],
    t: f64,
) -> Result<Primitive, DeformError> {
    Ok(prim.transformed(&blended_pose(nodes, binding, t)?))
}

/// Symmetric k-nearest-neighbor graph over node centers.
pub fn node_neighbor_graph(nodes: &[Node], k: usize) -> Vec<Vec<usize>> {
    let centers: Vec<_> = nodes.iter().map(|n| n.center).collect();
    let k = k.min(centers.len().saturating_sub(1));
    let mut graph = vec![Vec::new(); centers.len()];
    for (i, c) in centers.iter().enumerate() {
        let near = knn_points(c, &centers, k + 1).unwrap_or_default();
        for j in near.into_iter().filter(|&j| j != i).take(k) {
            graph[i].push(j);
            graph[j].push(i);
        }
    }
    for list in &mut graph {
        list.sort_unstable();
        list.dedup();
    }
    graph
}

/// Gradient with respect to keyframe positions, indexed `[node][keyframe]`.
pub type PositionGradient = Vec<Vec<Vector3<f64>>>;

pub fn zero_gradient(nodes: &[Node]) -> PositionGradient {
    nodes.iter().map(|n| vec![Vector3::zeros(); n.trajectory.keyframe_count()]).collect()
}

/// All nodes must share one keyframe grid for the position gradients.
pub(crate) fn shared_times(nodes: &[Node]) -> Result<Vec<f64>, DeformError> {
    let Some(first) = nodes.first() else {
        return Ok(Vec::new());
    };
    let times = first.trajectory.times();
    if nodes.iter().any(|n| n.trajectory.times() != times) {
        return Err(DeformError::KeyframeMismatch);
    }
    Ok(times.to_vec())
}

/// Pairwise distance-preservation energy between times `t_a` and `t_b`.
///
/// Each undirected edge `{i, j}` of the symmetric `graph` contributes
/// `(‖ξ_i(t_a) − ξ_j(t_a)‖ − ‖ξ_i(t_b) − ξ_j(t_b)‖)²` once. The gradient is
/// taken with respect to every keyframe position, assuming Catmull–Rom
/// tangents. A coincident pair has a zero norm derivative.
pub fn arap_energy(
    nodes: &[Node],
    graph: &[Vec<usize>],
    t_a: f64,
    t_b: f64,
) -> Result<(f64, PositionGradient), DeformError> {
    let times = shared_times(nodes)?;
    let mut grad = zero_gradient(nodes);
    if nodes.is_empty() {
        return Ok((0.0, grad));
    }
    let ca = keyframe_weights(&times, t_a)?;
    let cb = keyframe_weights(&times, t_b)?;
    let pa = nodes.iter().map(|n| n.trajectory.eval_position(t_a)).collect::<Result<Vec<_>, _>>()?;
    let pb = nodes.iter().map(|n| n.trajectory.eval_position(t_b)).collect::<Result<Vec<_>, _>>()?;

    let mut energy = 0.0;
    for (i, list) in graph.iter().enumerate() {
        for &j in list {
            if j >= nodes.len() {
                return Err(DeformError::NodeIndex(j));
            }
            if !graph[j].contains(&i) {
                return Err(DeformError::AsymmetricGraph(i, j));
            }
            if j <= i {
                continue;
            }
            let da = pa[i] - pa[j];
            let db = pb[i] - pb[j];
            let (la, lb) = (da.norm(), db.norm());
            let e = la - lb;
            energy += e * e;
            let ua = if la > COINCIDENT { da / la } else { Vector3::zeros() };
            let ub = if lb > COINCIDENT { db / lb } else { Vector3::zeros() };
            for m in 0..times.len() {
                let g = (ua * ca[m] - ub * cb[m]) * (2.0 * e);
                if g != Vector3::zeros() {
                    grad[i][m] += g;
                    grad[j][m] -= g;
                }
            }
        }
    }
    Ok((energy, grad))
}

/// Canonicalize quaternion signs (`w ≥ 0`), for serialization.
pub fn canonical_rotations(traj: &SplineTrajectory) -> Vec<UnitQuaternion> {
    traj.rotations().iter().map(|q| q.canonical()).collect()
}
