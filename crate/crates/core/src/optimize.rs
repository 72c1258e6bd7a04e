//! Refinement of node keyframes against tracklets, sparse depth and the
//! ARAP regularizer.
//!
//! Loss terms and their gradients are taken with respect to keyframe
//! positions through the Catmull–Rom coefficients of
//! [`keyframe_weights`](crate::spline::keyframe_weights), so every node must
//! carry Catmull–Rom tangents on a shared keyframe grid.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deform::{arap_energy, shared_times, zero_gradient, BindingTable, DeformError, Node, PositionGradient, Primitive};
use crate::harness::{Camera, HarnessError, Tracklet};
use crate::rigid::{quat_mul, UnitQuaternion};
use crate::spline::{keyframe_weights, SplineError, RANGE_SLACK};

/// Halvings tried before a descent step is abandoned.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("step size must be positive, got {0}")]
    InvalidStep(f64),
    #[error("node {0} does not use Catmull-Rom tangents")]
    NotCatmullRom(usize),
    #[error("observation index out of range: {0}")]
    BadObservation(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, state: Box<OptimState> },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_mask: f64,
    pub lambda_depth: f64,
    pub lambda_track: f64,
    pub lambda_arap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rgb: 0.0, lambda_mask: 0.0, lambda_depth: 0.1, lambda_track: 1.0, lambda_arap: 0.1 }
    }
}

impl LossWeights {
    /// Photometric and mask terms are not modeled and must be zero.
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.lambda_rgb != 0.0 || self.lambda_mask != 0.0 {
            return Err(OptimError::InvalidWeights("lambda_rgb and lambda_mask must be 0".into()));
        }
        for (name, v) in [("lambda_depth", self.lambda_depth), ("lambda_track", self.lambda_track), ("lambda_arap", self.lambda_arap)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OptimError::InvalidWeights(format!("{name} must be a nonnegative real")));
            }
        }
        Ok(())
    }
}

/// One tracklet sample assigned to a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredTrack {
    pub node: usize,
    pub samples: Vec<Observation>,
}

/// Everything the loss needs besides the nodes themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimData {
    pub frame_times: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub tracks: Vec<AnchoredTrack>,
    /// Symmetric node neighbor graph for the ARAP term.
    pub graph: Vec<Vec<usize>>,
}

impl OptimData {
    /// Tracks from `(tracklet index, node index)` pairs, keeping visible samples.
    pub fn from_tracklets(
        frame_times: Vec<f64>,
        cameras: Vec<Camera>,
        tracklets: &[Tracklet],
        anchors: &[(usize, usize)],
        graph: Vec<Vec<usize>>,
    ) -> Result<Self, OptimError> {
        let tracks = anchors
            .iter()
            .map(|&(k, node)| {
                let t = tracklets.get(k).ok_or_else(|| OptimError::BadObservation(format!("tracklet {k}")))?;
                let samples = t
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.visible)
                    .map(|(frame, s)| Observation { frame, pixel: s.pixel, depth: s.depth })
                    .collect();
                Ok(AnchoredTrack { node, samples })
            })
            .collect::<Result<_, OptimError>>()?;
        Ok(Self { frame_times, cameras, tracks, graph })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub track: f64,
    pub depth: f64,
    pub arap: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub nodes: Vec<Node>,
    pub binding: BindingTable,
    pub primitives: Vec<Primitive>,
    pub iteration: usize,
    /// Loss before the first step, then after every iteration.
    pub history: Vec<LossTerms>,
}

impl OptimState {
    pub fn new(nodes: Vec<Node>, binding: BindingTable, primitives: Vec<Primitive>) -> Self {
        Self { nodes, binding, primitives, iteration: 0, history: Vec::new() }
    }
}

/// Checks the shared Catmull–Rom grid and span; returns per-frame
/// keyframe coefficients.
fn prepare(nodes: &[Node], data: &OptimData) -> Result<Vec<Vec<f64>>, OptimError> {
    let times = shared_times(nodes)?;
    if let Some(i) = nodes.iter().position(|n| !n.trajectory.is_catmull_rom()) {
        return Err(OptimError::NotCatmullRom(i));
    }
    if data.cameras.len() != data.frame_times.len() {
        return Err(OptimError::BadObservation("one camera per frame is required".into()));
    }
    if let (Some(first), Some(&lo), Some(&hi)) = (nodes.first(), data.frame_times.first(), data.frame_times.last()) {
        let (a, b) = first.trajectory.span();
        if a > lo + RANGE_SLACK || b < hi - RANGE_SLACK {
            return Err(HarnessError::SpanMismatch { lo: a, hi: b, need_lo: lo, need_hi: hi }.into());
        }
    }
    if nodes.is_empty() {
        return Ok(vec![Vec::new(); data.frame_times.len()]);
    }
    Ok(data.frame_times.iter().map(|&t| keyframe_weights(&times, t)).collect::<Result<_, _>>()?)
}

/// Per-sample residual term: returns `(loss, ∂loss/∂x)` at world point `x`.
fn track_sample(cam: &Camera, x: &Vector3<f64>, obs: &Observation) -> Result<(f64, Vector3<f64>), OptimError> {
    let (u, _) = cam.project(x)?;
    let r = u - obs.pixel;
    let j = cam.project_jacobian(x)?;
    Ok((r.norm_squared(), j.transpose() * r * 2.0))
}

fn depth_sample(cam: &Camera, x: &Vector3<f64>, obs: &Observation) -> Result<(f64, Vector3<f64>), OptimError> {
    let row = cam.rotation.row(2).transpose();
    let r = row.dot(x) + cam.translation.z - obs.depth;
    Ok((r * r, row * (2.0 * r)))
}

type SampleTerm = fn(&Camera, &Vector3<f64>, &Observation) -> Result<(f64, Vector3<f64>), OptimError>;

fn observation_loss(nodes: &[Node], data: &OptimData, term: SampleTerm) -> Result<(f64, PositionGradient), OptimError> {
    let coeffs = prepare(nodes, data)?;
    let per_track: Vec<(f64, Vec<Vector3<f64>>)> = data
        .tracks
        .par_iter()
        .map(|track| {
            let node = nodes.get(track.node).ok_or(DeformError::NodeIndex(track.node))?;
            let mut loss = 0.0;
            let mut grad = vec![Vector3::zeros(); node.trajectory.keyframe_count()];
            for obs in &track.samples {
                let cam = data.cameras.get(obs.frame).ok_or_else(|| OptimError::BadObservation(format!("frame {}", obs.frame)))?;
                let x = node.trajectory.eval_position(data.frame_times[obs.frame])?;
                let (l, g) = term(cam, &x, obs)?;
                loss += l;
                for (gm, c) in grad.iter_mut().zip(&coeffs[obs.frame]) {
                    *gm += g * *c;
                }
            }
            Ok((loss, grad))
        })
        .collect::<Result<_, OptimError>>()?;
    let mut total = 0.0;
    let mut grad = zero_gradient(nodes);
    for (track, (l, g)) in data.tracks.iter().zip(per_track) {
        total += l;
        for (acc, gm) in grad[track.node].iter_mut().zip(g) {
            *acc += gm;
        }
    }
    Ok((total, grad))
}

/// `Σ ‖project(ξ(t)) − u_t‖²` over visible samples, pixels².
pub fn track_loss(nodes: &[Node], data: &OptimData) -> Result<(f64, PositionGradient), OptimError> {
    observation_loss(nodes, data, track_sample)
}

/// `Σ (z_cam(ξ(t)) − d_t)²`, meters².
pub fn depth_loss(nodes: &[Node], data: &OptimData) -> Result<(f64, PositionGradient), OptimError> {
    observation_loss(nodes, data, depth_sample)
}

/// ARAP energy summed over consecutive keyframe pairs.
pub fn arap_loss(nodes: &[Node], data: &OptimData) -> Result<(f64, PositionGradient), OptimError> {
    let times = shared_times(nodes)?;
    let mut total = 0.0;
    let mut grad = zero_gradient(nodes);
    for w in times.windows(2) {
        let (e, g) = arap_energy(nodes, &data.graph, w[0], w[1])?;
        total += e;
        add_scaled(&mut grad, &g, 1.0);
    }
    Ok((total, grad))
}

fn add_scaled(acc: &mut PositionGradient, g: &PositionGradient, s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y * s;
        }
    }
}

/// Weighted sum of the in-scope terms. A term with zero weight is skipped
/// entirely.
pub fn total_loss(nodes: &[Node], data: &OptimData, w: &LossWeights) -> Result<(LossTerms, PositionGradient), OptimError> {
    w.validate()?;
    prepare(nodes, data)?;
    let mut terms = LossTerms::default();
    let mut grad = zero_gradient(nodes);
    if w.lambda_track != 0.0 {
        let (l, g) = track_loss(nodes, data)?;
        terms.track = l;
        add_scaled(&mut grad, &g, w.lambda_track);
    }
    if w.lambda_depth != 0.0 {
        let (l, g) = depth_loss(nodes, data)?;
        terms.depth = l;
        add_scaled(&mut grad, &g, w.lambda_depth);
    }
    if w.lambda_arap != 0.0 {
        let (l, g) = arap_loss(nodes, data)?;
        terms.arap = l;
        add_scaled(&mut grad, &g, w.lambda_arap);
    }
    terms.total = w.lambda_track * terms.track + w.lambda_depth * terms.depth + w.lambda_arap * terms.arap;
    Ok((terms, grad))
}

/// Central finite-difference gradient of `objective` with respect to each
/// keyframe rotation, in the axis-angle chart `q ↦ exp(v)·q`. Indexed
/// `[node][keyframe]`.
pub fn rotation_gradient(nodes: &[Node], h: f64, objective: impl Fn(&[Node]) -> f64) -> PositionGradient {
    let mut work = nodes.to_vec();
    let mut grad = zero_gradient(nodes);
    for i in 0..nodes.len() {
        for m in 0..nodes[i].trajectory.keyframe_count() {
            let q = nodes[i].trajectory.rotations()[m];
            for d in 0..3 {
                let mut v = Vector3::zeros();
                v[d] = h;
                work[i].trajectory.set_rotation(m, quat_mul(&UnitQuaternion::from_scaled_axis(&v), &q));
                let plus = objective(&work);
                work[i].trajectory.set_rotation(m, quat_mul(&UnitQuaternion::from_scaled_axis(&-v), &q));
                let minus = objective(&work);
                grad[i][m][d] = (plus - minus) / (2.0 * h);
            }
            work[i].trajectory.set_rotation(m, q);
        }
    }
    grad
}

fn rotate_step(nodes: &mut [Node], grad: &PositionGradient, step: f64) {
    for (node, g) in nodes.iter_mut().zip(grad) {
        for (m, gm) in g.iter().enumerate() {
            if *gm != Vector3::zeros() {
                let q = node.trajectory.rotations()[m];
                node.trajectory.set_rotation(m, quat_mul(&UnitQuaternion::from_scaled_axis(&(-gm * step)), &q));
            }
        }
    }
}

fn position_step(nodes: &[Node], grad: &PositionGradient, step: f64) -> Result<Vec<Node>, OptimError> {
    let mut out = nodes.to_vec();
    for (node, g) in out.iter_mut().zip(grad) {
        let moved = node.trajectory.positions().iter().zip(g).map(|(p, gm)| p - gm * step).collect();
        node.trajectory.set_positions(moved)?;
    }
    Ok(out)
}

/// Whether any weighted term depends on keyframe rotations. Rotations only
/// reach the loss through deformed primitives, which feed the photometric
/// and mask terms; both are pinned to zero here.
fn rotation_sensitive(w: &LossWeights) -> bool {
    w.lambda_rgb != 0.0 || w.lambda_mask != 0.0
}

/// Gradient descent with backtracking on keyframe positions and rotations.
///
/// Each iteration starts from `step_size` and halves it (at most
/// [`MAX_HALVINGS`] times) until the loss does not increase; if no such
/// step exists the state is stationary and the loop stops early. Rotations
/// follow a finite-difference gradient in an axis-angle chart when a
/// weighted term depends on them. The returned loss never exceeds the
/// initial one.
pub fn refine(
    mut state: OptimState,
    data: &OptimData,
    weights: &LossWeights,
    iterations: usize,
    step_size: f64,
) -> Result<OptimState, OptimError> {
    weights.validate()?;
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(OptimError::InvalidStep(step_size));
    }
    let (mut terms, mut grad) = total_loss(&state.nodes, data, weights)?;
    let finite = |t: &LossTerms, g: &PositionGradient| t.total.is_finite() && g.iter().flatten().all(|v| v.iter().all(|x| x.is_finite()));
    if !finite(&terms, &grad) {
        let iteration = state.iteration;
        return Err(OptimError::NonFiniteLoss { iteration, state: Box::new(state) });
    }
    if state.history.is_empty() {
        state.history.push(terms);
    }
    for _ in 0..iterations {
        let rot_grad = if rotation_sensitive(weights) {
            Some(rotation_gradient(&state.nodes, 1e-6, |n| total_loss(n, data, weights).map(|t| t.0.total).unwrap_or(f64::INFINITY)))
        } else {
            None
        };
        let mut step = step_size;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = position_step(&state.nodes, &grad, step).map(|mut nodes| {
                if let Some(rg) = &rot_grad {
                    rotate_step(&mut nodes, rg, step);
                }
                nodes
            });
            if let Ok(nodes) = candidate {
                if let Ok((t, g)) = total_loss(&nodes, data, weights) {
                    if finite(&t, &g) && t.total <= terms.total {
                        accepted = Some((nodes, t, g));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((nodes, t, g)) = accepted else {
            break;
        };
        state.nodes = nodes;
        terms = t;
        grad = g;
        state.iteration += 1;
        state.history.push(terms);
    }
    Ok(state)
}
