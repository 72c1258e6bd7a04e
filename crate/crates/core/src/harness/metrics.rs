//! Ground-truth evaluation of a node set on a bundle.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, SceneBundle, FORMAT_VERSION};
use crate::deform::{deform_primitive, BindingTable, Node};
use crate::spline::RANGE_SLACK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub format_version: String,
    /// RMSE of deformed primitive centers over all primitives and frames, meters.
    pub deformed_rmse: f64,
    /// RMSE of node trajectories against their anchor tracklets' ground
    /// truth, meters; absent when no node has an anchor.
    pub node_traj_rmse: Option<f64>,
    /// Dynamic node density over static node density, each per primitive
    /// of the region; absent when either region is empty.
    pub density_ratio: Option<f64>,
    pub node_count: usize,
    pub bbox_diagonal: f64,
    /// `deformed_rmse / bbox_diagonal`.
    pub relative_rmse: f64,
}

/// Labels node `i` dynamic when, at frame `frames[i]`, the ground-truth
/// primitive nearest to the node's position there is dynamic. Frames past
/// the end are clamped.
pub fn label_nodes(bundle: &SceneBundle, nodes: &[Node], frames: &[usize]) -> Vec<bool> {
    let last = bundle.frame_count().saturating_sub(1);
    nodes
        .iter()
        .zip(frames)
        .map(|(n, &f)| {
            let f = f.min(last);
            let at = n.trajectory.eval_position(bundle.frame_times[f]).unwrap_or(n.center);
            let nearest = (0..bundle.primitives.len())
                .map(|i| ((bundle.gt_position(i, f) - at).norm_squared(), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            nearest.is_some_and(|(_, i)| bundle.is_dynamic(i))
        })
        .collect()
}

/// Dynamic nodes per dynamic primitive over static nodes per static
/// primitive, with nodes labeled as in [`label_nodes`]; `None` when any of
/// the four counts is zero.
pub fn density_ratio(bundle: &SceneBundle, nodes: &[Node], frames: &[usize]) -> Option<f64> {
    let labels = label_nodes(bundle, nodes, frames);
    let dyn_nodes = labels.iter().filter(|d| **d).count();
    let static_nodes = labels.len() - dyn_nodes;
    let dyn_prims = (0..bundle.primitives.len()).filter(|&p| bundle.is_dynamic(p)).count();
    let static_prims = bundle.primitives.len() - dyn_prims;
    (dyn_nodes > 0 && static_nodes > 0 && dyn_prims > 0 && static_prims > 0)
        .then(|| (dyn_nodes as f64 / dyn_prims as f64) / (static_nodes as f64 / static_prims as f64))
}

fn check_span(bundle: &SceneBundle, nodes: &[Node]) -> Result<(), HarnessError> {
    let need_lo = bundle.frame_times[0];
    let need_hi = bundle.frame_times[bundle.frame_count() - 1];
    for n in nodes {
        let (lo, hi) = n.trajectory.span();
        if lo > need_lo + RANGE_SLACK || hi < need_hi - RANGE_SLACK {
            return Err(HarnessError::SpanMismatch { lo, hi, need_lo, need_hi });
        }
    }
    Ok(())
}

/// `anchors[i]` is the tracklet node `i` was fitted to, if any, and
/// `source_frames[i]` the frame it was created from.
pub fn eval_metrics(
    bundle: &SceneBundle,
    nodes: &[Node],
    binding: &BindingTable,
    anchors: &[Option<usize>],
    source_frames: &[usize],
) -> Result<Metrics, HarnessError> {
    check_span(bundle, nodes)?;
    if binding.len() != bundle.primitives.len() {
        return Err(HarnessError::Format {
            line: 0,
            message: format!("binding covers {} of {} primitives", binding.len(), bundle.primitives.len()),
        });
    }
    let times = &bundle.frame_times;
    let per_prim: Vec<f64> = (0..bundle.primitives.len())
        .into_par_iter()
        .map(|p| {
            let prim = &bundle.primitives[p];
            let mut s = 0.0;
            for (f, &t) in times.iter().enumerate() {
                let moved = deform_primitive(prim, nodes, binding.row(p), t)?;
                s += (moved.mean - bundle.gt_position(p, f)).norm_squared();
            }
            Ok(s)
        })
        .collect::<Result<_, HarnessError>>()?;
    let samples = (per_prim.len() * times.len()).max(1);
    let deformed_rmse = (per_prim.iter().sum::<f64>() / samples as f64).sqrt();

    let mut traj_sum = 0.0;
    let mut traj_count = 0usize;
    for (node, anchor) in nodes.iter().zip(anchors) {
        let Some(k) = anchor else { continue };
        let track = bundle.tracklets.get(*k).ok_or_else(|| HarnessError::Format {
            line: 0,
            message: format!("anchor tracklet {k} does not exist"),
        })?;
        for (f, &t) in times.iter().enumerate() {
            let truth: Vector3<f64> = bundle.gt_position(track.primitive, f);
            traj_sum += (node.trajectory.eval_position(t)? - truth).norm_squared();
            traj_count += 1;
        }
    }
    let node_traj_rmse = (traj_count > 0).then(|| (traj_sum / traj_count as f64).sqrt());

    let density_ratio = density_ratio(bundle, nodes, source_frames);
    let diag = bundle.bbox_diagonal();
    Ok(Metrics {
        format_version: FORMAT_VERSION.into(),
        deformed_rmse,
        node_traj_rmse,
        density_ratio,
        node_count: nodes.len(),
        bbox_diagonal: diag,
        relative_rmse: if diag > 0.0 { deformed_rmse / diag } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_scene, parse_scene_config, REFERENCE_SCENE};
    use crate::spline::{fit_spline, uniform_keyframes};

    fn small_bundle(src: &str) -> SceneBundle {
        let src = src.replace("primitives = 2500", "primitives = 300").replace("primitives = 2000", "primitives = 200");
        gen_scene(&parse_scene_config(&src).unwrap(), 11).unwrap()
    }

    /// Nodes following every `stride`-th primitive's ground truth.
    fn truth_nodes(bundle: &SceneBundle, stride: usize) -> (Vec<Node>, Vec<usize>) {
        let times = uniform_keyframes(8).unwrap();
        let picked: Vec<usize> = (0..bundle.primitives.len()).step_by(stride).collect();
        let nodes = picked
            .iter()
            .map(|&p| {
                let samples: Vec<_> = bundle.frame_times.iter().enumerate().map(|(f, t)| (*t, bundle.gt_position(p, f))).collect();
                let fit = fit_spline(&samples, &times).unwrap();
                Node::new(bundle.gt_position(p, 0), 0.2, fit.trajectory).unwrap()
            })
            .collect();
        (nodes, picked)
    }

    fn metrics_for(bundle: &SceneBundle, nodes: &[Node]) -> Metrics {
        let means: Vec<_> = bundle.primitives.iter().map(|p| p.mean).collect();
        let binding = BindingTable::build(&means, nodes, 4).unwrap();
        eval_metrics(bundle, nodes, &binding, &vec![None; nodes.len()], &vec![0; nodes.len()]).unwrap()
    }

    #[test]
    fn ground_truth_nodes_have_zero_error() {
        let bundle = small_bundle(REFERENCE_SCENE);
        let (nodes, _) = truth_nodes(&bundle, 5);
        let m = metrics_for(&bundle, &nodes);
        assert!(m.deformed_rmse < 1e-9, "{}", m.deformed_rmse);
        assert_eq!(m.node_count, nodes.len());
        assert!((m.relative_rmse * m.bbox_diagonal - m.deformed_rmse).abs() < 1e-15);
    }

    #[test]
    fn perturbing_a_keyframe_increases_error() {
        let bundle = small_bundle(REFERENCE_SCENE);
        let (mut nodes, _) = truth_nodes(&bundle, 5);
        let base = metrics_for(&bundle, &nodes).deformed_rmse;
        let mut p = nodes[3].trajectory.positions().to_vec();
        p[4].x += 0.05;
        nodes[3].trajectory.set_positions(p).unwrap();
        assert!(metrics_for(&bundle, &nodes).deformed_rmse > base);
    }

    #[test]
    fn anchored_nodes_report_trajectory_error() {
        let bundle = small_bundle(REFERENCE_SCENE);
        let (nodes, picked) = truth_nodes(&bundle, 5);
        let anchors: Vec<Option<usize>> = picked.iter().map(|p| bundle.tracklets.iter().position(|t| t.primitive == *p)).collect();
        assert!(anchors.iter().any(Option::is_some));
        let means: Vec<_> = bundle.primitives.iter().map(|p| p.mean).collect();
        let binding = BindingTable::build(&means, &nodes, 4).unwrap();
        let m = eval_metrics(&bundle, &nodes, &binding, &anchors, &vec![0; nodes.len()]).unwrap();
        assert!(m.node_traj_rmse.unwrap() < 1e-9);
    }

    #[test]
    fn density_ratio_counts_per_primitive() {
        let bundle = small_bundle(REFERENCE_SCENE);
        let (nodes, picked) = truth_nodes(&bundle, 5);
        let labels = label_nodes(&bundle, &nodes, &vec![0; nodes.len()]);
        for (l, p) in labels.iter().zip(&picked) {
            assert_eq!(*l, bundle.is_dynamic(*p));
        }
        // Every 5th primitive in both regions gives equal per-primitive density.
        let r = density_ratio(&bundle, &nodes, &vec![0; nodes.len()]).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r}");
    }

    #[test]
    fn static_scene_has_no_density_ratio() {
        let bundle = small_bundle(&REFERENCE_SCENE.replace("motion = \"translation\"", "motion = \"static\""));
        let (nodes, _) = truth_nodes(&bundle, 5);
        assert_eq!(density_ratio(&bundle, &nodes, &vec![0; nodes.len()]), None);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let bundle = small_bundle(REFERENCE_SCENE);
        let nodes = vec![Node::fixed(Vector3::zeros(), 1.0, vec![0.0, 0.5]).unwrap()];
        let binding = BindingTable::build(&[Vector3::zeros(); 1], &nodes, 1).unwrap();
        assert!(matches!(eval_metrics(&bundle, &nodes, &binding, &[None], &[0]), Err(HarnessError::SpanMismatch { .. })));
    }
}
