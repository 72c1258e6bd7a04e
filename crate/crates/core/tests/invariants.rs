use motion_nodes::deform::{bind_weights, knn_nodes, Node};
use motion_nodes::harness::composite_alpha;
use motion_nodes::node_init::{adaptive_ratio, compress_step, CandidateNode, CompressionParams};
use motion_nodes::rigid::{dq_to_se3, dqb_blend, se3_to_dq, SE3Pose, UnitQuaternion};
use motion_nodes::spline::{fit_spline, uniform_keyframes, SplineTrajectory};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = SE3Pose> {
    (vec3(1.0), -3.1f64..3.1, vec3(10.0)).prop_map(|(axis, angle, t)| SE3Pose::new(UnitQuaternion::from_axis_angle(&axis, angle), t))
}

proptest! {
    #[test]
    fn dual_quaternion_round_trip(p in pose()) {
        let back = dq_to_se3(&se3_to_dq(&p)).unwrap();
        prop_assert!((back.translation - p.translation).norm() < 1e-9);
        prop_assert!(back.rotation.angle_to(&p.rotation) < 1e-9);
    }

    #[test]
    fn blend_is_rigid(poses in prop::collection::vec(pose(), 2..8), raw in prop::collection::vec(0.01f64..1.0, 8)) {
        let sum: f64 = raw[..poses.len()].iter().sum();
        let entries: Vec<_> = poses.iter().zip(&raw).map(|(p, w)| (w / sum, se3_to_dq(p))).collect();
        let r = dqb_blend(&entries).unwrap().rotation_matrix();
        prop_assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn blend_of_one_pose_is_that_pose(p in pose(), n in 1usize..6) {
        let entries = vec![(1.0 / n as f64, se3_to_dq(&p)); n];
        let out = dqb_blend(&entries).unwrap();
        prop_assert!((out.translation - p.translation).norm() < 1e-9);
        prop_assert!(out.rotation.angle_to(&p.rotation) < 1e-9);
    }

    #[test]
    fn binding_weights_are_a_partition_of_unity(centers in prop::collection::vec(vec3(3.0), 4..12), x in vec3(3.0)) {
        let times = uniform_keyframes(2).unwrap();
        let nodes: Vec<Node> = centers.iter().map(|c| Node::fixed(*c, 0.5, times.clone()).unwrap()).collect();
        let idx = knn_nodes(&x, &nodes, 4).unwrap();
        let w = bind_weights(&x, &nodes, &idx).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn fit_reproduces_its_own_samples(points in prop::collection::vec(vec3(2.0), 5)) {
        let times = uniform_keyframes(5).unwrap();
        let truth = SplineTrajectory::from_positions(times.clone(), points, vec![UnitQuaternion::IDENTITY; 5]).unwrap();
        let samples: Vec<_> = (0..30).map(|i| i as f64 / 29.0).map(|t| (t, truth.eval_position(t).unwrap())).collect();
        let fit = fit_spline(&samples, &times).unwrap();
        for (a, b) in fit.trajectory.positions().iter().zip(truth.positions()) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn compositing_stays_in_unit_range(list in prop::collection::vec(((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 0.0f64..=1.0), 0..30)) {
        let list: Vec<([f64; 3], f64)> = list.into_iter().map(|((r, g, b), a)| ([r, g, b], a)).collect();
        let c = composite_alpha(&list);
        prop_assert!(c.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn ratio_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, lo in 0.0f64..0.5, span in 0.0f64..0.5) {
        let (p, q) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(adaptive_ratio(p, lo, lo + span) >= adaptive_ratio(q, lo, lo + span));
    }

    #[test]
    fn compression_conserves_mass(points in prop::collection::vec((vec3(1.0), 0.0f64..1.0), 1..80), voxel in 0.05f64..1.0) {
        let cands: Vec<CandidateNode> = points
            .iter()
            .enumerate()
            .map(|(i, (p, prior))| CandidateNode::new(*p, vec![1.0, i as f64 * 0.1, 0.5], *prior, 0).unwrap())
            .collect();
        let params = CompressionParams::with_defaults(2.0, 1);
        let out = compress_step(&cands, voxel, &params).unwrap();
        prop_assert!(out.len() <= cands.len());
        prop_assert_eq!(out.iter().map(|c| c.merged_count).sum::<u32>(), cands.len() as u32);
    }
}
