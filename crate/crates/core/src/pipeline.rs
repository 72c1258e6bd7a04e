//! The stages chained by the command-line tool: node initialization from
//! patches, spline fitting to tracklets, refinement and evaluation.

use nalgebra::Vector3;
use thiserror::Error;

use crate::deform::{node_neighbor_graph, node_radii, BindingTable, DeformError, Node, DEFAULT_K};
use crate::harness::format::{NodeInfo, NodeSet};
use crate::harness::{eval_metrics, HarnessError, Metrics, SceneBundle};
use crate::node_init::{compress, patch_to_nodes, CompressionParams, NodeInitError};
use crate::optimize::{refine, LossTerms, LossWeights, OptimData, OptimError, OptimState};
use crate::rigid::UnitQuaternion;
use crate::spline::{fit_spline, uniform_keyframes, SplineError, SplineTrajectory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    NodeInit(#[from] NodeInitError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Frames used as node sources: every `stride`-th frame from 0.
pub fn keyframe_frames(frame_count: usize, stride: usize) -> Vec<usize> {
    (0..frame_count).step_by(stride.max(1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    pub set: NodeSet,
    pub candidates: usize,
    pub iterations: usize,
    /// False when compression stopped above the target count.
    pub reached_target: bool,
}

/// Back-projects the patches of every `keyframe_stride`-th frame, pools
/// them and compresses the pool. Nodes get static trajectories on
/// `spline_keyframes` uniform keyframes.
pub fn init_nodes(
    bundle: &SceneBundle,
    keyframe_stride: usize,
    params: &CompressionParams,
    spline_keyframes: usize,
) -> Result<InitOutcome, PipelineError> {
    let frames = keyframe_frames(bundle.frame_count(), keyframe_stride);
    let patches: Vec<_> = frames.iter().map(|&f| bundle.patches[f].clone()).collect();
    let cameras: Vec<_> = frames.iter().map(|&f| bundle.cameras[f].clone()).collect();
    let candidates = patch_to_nodes(&patches, bundle.patch_size as f64, &cameras)?;
    let times = uniform_keyframes(spline_keyframes)?;
    let (outcome, reached) = match compress(&candidates, params, &times) {
        Ok(c) => (c, true),
        Err(NodeInitError::TargetNotReached { outcome, .. }) => (*outcome, false),
        Err(e) => return Err(e.into()),
    };
    let info = outcome
        .survivors
        .iter()
        .map(|s| NodeInfo { tracklet: None, source_frame: s.source_frame, prior: s.foreground_prior, merged_count: s.merged_count })
        .collect();
    Ok(InitOutcome {
        set: NodeSet { keyframe_times: times, nodes: outcome.nodes, info },
        candidates: candidates.len(),
        iterations: outcome.iterations,
        reached_target: reached,
    })
}

/// World positions of a tracklet's visible samples, `(time, point)`.
pub fn tracklet_points(bundle: &SceneBundle, tracklet: usize) -> Result<Vec<(f64, Vector3<f64>)>, HarnessError> {
    let t = &bundle.tracklets[tracklet];
    t.samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.visible)
        .map(|(f, s)| Ok((bundle.frame_times[f], bundle.cameras[f].backproject(&s.pixel, s.depth)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub set: NodeSet,
    /// RMS fit residual per node; `None` for nodes left static.
    pub residuals: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Largest distance, as a fraction of the scene diagonal, between a node
/// and the tracklet it is fitted to.
pub const MAX_ANCHOR_FRACTION: f64 = 0.1;

/// Picks the nearest tracklet visible at `frame`, preferring ones not yet
/// claimed by another node.
fn pick_tracklet(bundle: &SceneBundle, position: &Vector3<f64>, frame: usize, used: &[bool], max_dist: f64) -> Option<usize> {
    let mut best_free: Option<(f64, usize)> = None;
    let mut best_any: Option<(f64, usize)> = None;
    for (k, t) in bundle.tracklets.iter().enumerate() {
        let s = &t.samples[frame];
        if !s.visible {
            continue;
        }
        let Ok(x) = bundle.cameras[frame].backproject(&s.pixel, s.depth) else { continue };
        let d = (x - position).norm();
        if d > max_dist {
            continue;
        }
        if best_any.is_none_or(|(b, _)| d < b) {
            best_any = Some((d, k));
        }
        if !used[k] && best_free.is_none_or(|(b, _)| d < b) {
            best_free = Some((d, k));
        }
    }
    best_free.or(best_any).map(|(_, k)| k)
}

/// Fits each node's trajectory to the nearest tracklet observed at the
/// node's source frame, then re-anchors its center at `ξ(0)` and
/// recomputes radii. Nodes without a usable tracklet stay static.
pub fn fit_nodes(bundle: &SceneBundle, set: &NodeSet, spline_keyframes: usize) -> Result<FitOutcome, PipelineError> {
    let times = uniform_keyframes(spline_keyframes)?;
    let max_dist = MAX_ANCHOR_FRACTION * bundle.bbox_diagonal();
    let mut used = vec![false; bundle.tracklets.len()];
    let mut trajectories = Vec::with_capacity(set.nodes.len());
    let mut info = Vec::with_capacity(set.nodes.len());
    let mut residuals = Vec::with_capacity(set.nodes.len());
    let mut warnings = Vec::new();
    for (i, (node, meta)) in set.nodes.iter().zip(&set.info).enumerate() {
        let frame = meta.source_frame.min(bundle.frame_count() - 1);
        let t_src = bundle.frame_times[frame];
        let position = node.trajectory.eval_position(t_src).unwrap_or(node.center);
        let mut meta = meta.clone();
        let fitted = match pick_tracklet(bundle, &position, frame, &used, max_dist) {
            None => {
                warnings.push(format!("node {i}: no tracklet near it at frame {frame}; kept static"));
                None
            }
            Some(k) => match fit_spline(&tracklet_points(bundle, k)?, &times) {
                Ok(fit) => {
                    used[k] = true;
                    meta.tracklet = Some(k);
                    Some(fit)
                }
                Err(e @ (SplineError::RankDeficient { .. } | SplineError::NoSamples)) => {
                    warnings.push(format!("node {i}: tracklet {k} cannot be fitted ({e}); kept static"));
                    None
                }
                Err(e) => return Err(e.into()),
            },
        };
        match fitted {
            Some(fit) => {
                residuals.push(Some(fit.residual));
                trajectories.push(fit.trajectory);
            }
            None => {
                meta.tracklet = None;
                residuals.push(None);
                trajectories.push(SplineTrajectory::constant(times.clone(), position)?);
            }
        }
        info.push(meta);
    }
    let centers: Vec<Vector3<f64>> = trajectories.iter().map(|t| t.eval_position(times[0])).collect::<Result<_, _>>()?;
    let radii = node_radii(&centers, 0.01 * bundle.bbox_diagonal());
    let nodes = trajectories
        .into_iter()
        .zip(centers.iter().zip(radii))
        .map(|(t, (c, r))| Node::new(*c, r, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FitOutcome { set: NodeSet { keyframe_times: times, nodes, info }, residuals, warnings })
}

/// Binds canonical primitives to their nearest `min(4, n)` nodes.
pub fn bind(bundle: &SceneBundle, nodes: &[Node]) -> Result<BindingTable, PipelineError> {
    if nodes.is_empty() {
        return Err(PipelineError::Invalid("no nodes to bind to".into()));
    }
    let means: Vec<_> = bundle.primitives.iter().map(|p| p.mean).collect();
    Ok(BindingTable::build(&means, nodes, DEFAULT_K.min(nodes.len()))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub set: NodeSet,
    pub history: Vec<LossTerms>,
}

/// Refines anchored nodes against their tracklets with the ARAP term over
/// the node neighbor graph. Rotations are reset to canonical sign on output.
pub fn optimize_nodes(
    bundle: &SceneBundle,
    set: &NodeSet,
    weights: &LossWeights,
    iterations: usize,
    step_size: f64,
) -> Result<OptimizeOutcome, PipelineError> {
    let anchors: Vec<(usize, usize)> = set.info.iter().enumerate().filter_map(|(i, m)| m.tracklet.map(|k| (k, i))).collect();
    let graph = node_neighbor_graph(&set.nodes, DEFAULT_K);
    let data = OptimData::from_tracklets(bundle.frame_times.clone(), bundle.cameras.clone(), &bundle.tracklets, &anchors, graph)?;
    let binding = bind(bundle, &set.nodes)?;
    let state = OptimState::new(set.nodes.clone(), binding, bundle.primitives.clone());
    let out = refine(state, &data, weights, iterations, step_size)?;
    let nodes = out
        .nodes
        .into_iter()
        .map(|mut n| {
            for m in 0..n.trajectory.keyframe_count() {
                let q: UnitQuaternion = n.trajectory.rotations()[m].canonical();
                n.trajectory.set_rotation(m, q);
            }
            n
        })
        .collect();
    Ok(OptimizeOutcome { set: NodeSet { keyframe_times: set.keyframe_times.clone(), nodes, info: set.info.clone() }, history: out.history })
}

pub fn evaluate(bundle: &SceneBundle, set: &NodeSet) -> Result<Metrics, PipelineError> {
    let binding = bind(bundle, &set.nodes)?;
    let anchors: Vec<Option<usize>> = set.info.iter().map(|m| m.tracklet).collect();
    Ok(eval_metrics(bundle, &set.nodes, &binding, &anchors, &set.source_frames())?)
}

/// Default compression settings for a bundle: diagonal-scaled voxels and a
/// target of `fraction` of the candidate count.
pub fn default_params(bundle: &SceneBundle, candidates: usize, fraction: f64) -> CompressionParams {
    let target = ((candidates as f64 * fraction).floor() as usize).max(1);
    CompressionParams::with_defaults(bundle.bbox_diagonal(), target)
}

/// Number of candidates `init_nodes` would start from.
pub fn candidate_count(bundle: &SceneBundle, keyframe_stride: usize) -> usize {
    keyframe_frames(bundle.frame_count(), keyframe_stride)
        .iter()
        .map(|&f| bundle.patches[f].depth.iter().filter(|d| **d > 0.0 && d.is_finite()).count())
        .sum()
}
