//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use motion_nodes::deform::{arap_energy, deform_primitive, node_neighbor_graph, BindingTable, Node, Primitive};
use motion_nodes::harness::{composite_alpha, gen_scene, parse_scene_config, Camera, REFERENCE_SCENE};
use motion_nodes::harness::format::read_metrics;
use motion_nodes::node_init::{adaptive_ratio, compress, dyn_score, patch_to_nodes, CandidateNode, CompressionParams};
use motion_nodes::optimize::{depth_loss, track_loss, AnchoredTrack, Observation, OptimData};
use motion_nodes::rigid::{dq_to_se3, dqb_blend, se3_to_dq, SE3Pose, UnitQuaternion};
use motion_nodes::spline::{fit_spline, hermite_basis, uniform_keyframes, SplineTrajectory};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok { Ok(detail) } else { Err(detail) }
}

fn rand_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn rand_rotation(rng: &mut impl Rng) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(&rand_vec(rng, 1.0), rng.random_range(-3.1..3.1))
}

fn rand_pose(rng: &mut impl Rng) -> SE3Pose {
    SE3Pose::new(rand_rotation(rng), rand_vec(rng, 5.0))
}

fn rigidity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut orth, mut det) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=8);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let entries: Vec<_> = raw.iter().map(|w| (w / sum, se3_to_dq(&rand_pose(&mut rng)))).collect();
        let r = dqb_blend(&entries).map_err(|e| e.to_string())?.rotation_matrix();
        orth = orth.max((r * r.transpose() - Matrix3::identity()).amax());
        det = det.max((r.determinant() - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(orth < 1e-9 && det <= 1e-9 && secs < 5.0, format!("max |RRᵀ−I| {orth:.2e}, max |det−1| {det:.2e}, {secs:.2} s"))
}

fn dq_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut pos, mut ang) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let pose = rand_pose(&mut rng);
        let back = dq_to_se3(&se3_to_dq(&pose)).map_err(|e| e.to_string())?;
        pos = pos.max((back.translation - pose.translation).norm());
        ang = ang.max(back.rotation.angle_to(&pose.rotation));
    }
    ensure(pos < 1e-9 && ang < 1e-9, format!("max position error {pos:.2e} m, max angle error {ang:.2e} rad"))
}

fn random_spline(rng: &mut impl Rng, k: usize) -> SplineTrajectory {
    let pos = (0..k).map(|_| rand_vec(rng, 1.0)).collect();
    SplineTrajectory::from_positions(uniform_keyframes(k).unwrap(), pos, vec![UnitQuaternion::IDENTITY; k]).unwrap()
}

fn hermite() -> Check {
    let expected = [(0.0, [1.0, 0.0, 0.0, 0.0]), (0.5, [0.5, 0.125, 0.5, -0.125]), (1.0, [0.0, 0.0, 1.0, 0.0])];
    let mut basis_err = 0.0f64;
    for (tau, want) in expected {
        let got = hermite_basis(tau).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(want) {
            basis_err = basis_err.max((g - w).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut jump = 0.0f64;
    let h = 1e-6;
    for _ in 0..20 {
        let traj = random_spline(&mut rng, 6);
        let at = |t: f64| traj.eval_position(t).unwrap();
        for &tk in &traj.times()[1..traj.keyframe_count() - 1] {
            let left = (at(tk) * 3.0 - at(tk - h) * 4.0 + at(tk - 2.0 * h)) / (2.0 * h);
            let right = (at(tk + h) * 4.0 - at(tk) * 3.0 - at(tk + 2.0 * h)) / (2.0 * h);
            jump = jump.max((left - right).norm());
        }
    }
    let truth = random_spline(&mut rng, 2);
    let samples: Vec<_> = (0..40).map(|i| i as f64 / 39.0).map(|t| (t, truth.eval_position(t).unwrap())).collect();
    let refit = fit_spline(&samples, truth.times()).map_err(|e| e.to_string())?.residual;
    ensure(
        basis_err <= 1e-12 && jump < 1e-6 && refit < 1e-8,
        format!("basis error {basis_err:.2e}, max derivative jump {jump:.2e}, cubic refit residual {refit:.2e}"),
    )
}

fn fitting_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut recover = 0.0f64;
    for _ in 0..20 {
        let truth = random_spline(&mut rng, 8);
        let samples: Vec<_> = (0..48).map(|i| i as f64 / 47.0).map(|t| (t, truth.eval_position(t).unwrap())).collect();
        let fit = fit_spline(&samples, truth.times()).map_err(|e| e.to_string())?;
        for (a, b) in fit.trajectory.positions().iter().zip(truth.positions()) {
            recover = recover.max((a - b).norm());
        }
    }
    let s = 0.01;
    let normal = rand_distr::Normal::new(0.0, s).unwrap();
    let mut worst_ratio = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let truth = random_spline(&mut rng, 8);
        let samples: Vec<_> = (0..48)
            .map(|i| i as f64 / 47.0)
            .map(|t| {
                let noise = Vector3::from_fn(|_, _| rng.sample(normal));
                (t, truth.eval_position(t).unwrap() + noise)
            })
            .collect();
        let fit = fit_spline(&samples, truth.times()).map_err(|e| e.to_string())?;
        let bound = (3.0 * s).powi(2) * samples.len() as f64;
        worst_ratio = worst_ratio.max(fit.residual / bound);
    }
    ensure(
        recover < 1e-9 && worst_ratio <= 1.0,
        format!("max keyframe error {recover:.2e} m, worst noisy residual {worst_ratio:.3} of bound over 20 seeds"),
    )
}

fn rigid_consistency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 10;
    let times = uniform_keyframes(k).unwrap();
    let poses: Vec<SE3Pose> = (0..k).map(|_| rand_pose(&mut rng)).collect();
    let nodes: Vec<Node> = (0..12)
        .map(|_| {
            let c = rand_vec(&mut rng, 2.0);
            let pos = poses.iter().map(|p| p.transform_point(&c)).collect();
            let rots = poses.iter().map(|p| p.rotation).collect();
            Node::new(c, 1.0, SplineTrajectory::from_positions(times.clone(), pos, rots).unwrap()).unwrap()
        })
        .collect();
    let prims: Vec<Primitive> = (0..1000)
        .map(|_| {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            Primitive::new(rand_vec(&mut rng, 2.0), a * a.transpose() + Matrix3::identity() * 1e-3, 0.5, [0.5; 3]).unwrap()
        })
        .collect();
    let means: Vec<_> = prims.iter().map(|p| p.mean).collect();
    let binding = BindingTable::build(&means, &nodes, 4).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    // Keyframe times are where the shared pose is exactly an SE(3) trajectory
    // of every node.
    for (t, pose) in times.iter().zip(&poses) {
        for (p, prim) in prims.iter().enumerate() {
            let moved = deform_primitive(prim, &nodes, binding.row(p), *t).map_err(|e| e.to_string())?;
            err = err.max((moved.mean - pose.transform_point(&prim.mean)).norm());
        }
    }
    ensure(err < 1e-8, format!("max deviation from the direct transform {err:.2e} m over 1000 primitives × 10 times"))
}

fn allocation() -> Check {
    let start = Instant::now();
    let cfg = parse_scene_config(REFERENCE_SCENE).map_err(|e| e.to_string())?;
    let bundle = gen_scene(&cfg, 0).map_err(|e| e.to_string())?;
    let all = patch_to_nodes(&bundle.patches, bundle.patch_size as f64, &bundle.cameras).map_err(|e| e.to_string())?;
    let (dynamic, mut fixed): (Vec<CandidateNode>, Vec<CandidateNode>) = all.into_iter().partition(|c| c.foreground_prior > 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    fixed.shuffle(&mut rng);
    fixed.truncate(dynamic.len());
    if fixed.len() != dynamic.len() {
        return Err(format!("only {} static candidates for {} dynamic", fixed.len(), dynamic.len()));
    }
    let region = dynamic.len();
    let mut pool = dynamic;
    pool.extend(fixed);
    let params = CompressionParams::with_defaults(bundle.bbox_diagonal(), pool.len() / 10);
    let out = compress(&pool, &params, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let dyn_nodes = out.survivors.iter().filter(|c| c.foreground_prior > 0.5).count();
    let static_nodes = out.survivors.len() - dyn_nodes;
    let ratio = dyn_nodes as f64 / static_nodes.max(1) as f64;
    let mass: u64 = out.survivors.iter().map(|c| u64::from(c.merged_count)).sum();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        static_nodes > 0 && ratio >= 3.0 && mass == pool.len() as u64 && secs < 10.0,
        format!(
            "{region} candidates per region → {dyn_nodes} dynamic / {static_nodes} static nodes, density ratio {ratio:.2}, merged_count {mass}/{}, {secs:.2} s",
            pool.len()
        ),
    )
}

fn ratio_and_score() -> Check {
    let endpoints = adaptive_ratio(1.0, 0.1, 0.7) == 0.1 && adaptive_ratio(0.0, 0.1, 0.7) == 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..10);
        let cluster: Vec<CandidateNode> = (0..n)
            .map(|_| {
                let token: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                CandidateNode::new(rand_vec(&mut rng, 1.0), token, rng.random_range(0.0..0.9), 0).unwrap()
            })
            .collect();
        let pairs: Vec<(usize, usize, f64)> = (0..n / 2).map(|i| (2 * i, 2 * i + 1, rng.random_range(-0.9..0.9))).collect();
        let (a, b) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let base = dyn_score(&cluster, &pairs, a, b);
        let brighter: Vec<_> = cluster
            .iter()
            .map(|c| CandidateNode::new(c.position, c.token().to_vec(), c.foreground_prior + 0.1, 0).unwrap())
            .collect();
        let similar: Vec<_> = pairs.iter().map(|&(i, j, s)| (i, j, s + 0.1)).collect();
        if !(dyn_score(&brighter, &pairs, a, b) > base && dyn_score(&cluster, &similar, a, b) < base && base > 0.0 && base < 1.0) {
            failures += 1;
        }
    }
    ensure(endpoints && failures == 0, format!("endpoints exact: {endpoints}, monotonicity failures {failures}/100"))
}

fn probe_cameras() -> Vec<Camera> {
    (0..6)
        .map(|f| {
            let eye = Vector3::new(0.3 * f as f64 - 0.8, -0.5, -3.0);
            Camera::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0), (120.0, 120.0, 80.0, 60.0), (160, 120)).unwrap()
        })
        .collect()
}

fn random_nodes(rng: &mut impl Rng, n: usize) -> Vec<Node> {
    (0..n)
        .map(|_| {
            let c = rand_vec(rng, 0.5);
            let traj = SplineTrajectory::from_positions(
                uniform_keyframes(4).unwrap(),
                (0..4).map(|_| c + rand_vec(rng, 0.2)).collect(),
                vec![UnitQuaternion::IDENTITY; 4],
            )
            .unwrap();
            Node::new(c, 0.5, traj).unwrap()
        })
        .collect()
}

/// Relative error of `grad` against central differences of `f` in every
/// keyframe coordinate.
fn fd_error(f: impl Fn(&[Node]) -> f64, nodes: &[Node], grad: &[Vec<Vector3<f64>>]) -> f64 {
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..nodes.len() {
        for m in 0..nodes[i].trajectory.keyframe_count() {
            for d in 0..3 {
                let shifted = |delta: f64| {
                    let mut out = nodes.to_vec();
                    let mut p = out[i].trajectory.positions().to_vec();
                    p[m][d] += delta;
                    out[i].trajectory.set_positions(p).unwrap();
                    f(&out)
                };
                let num = (shifted(h) - shifted(-h)) / (2.0 * h);
                diff += (num - grad[i][m][d]).powi(2);
                norm += num * num;
            }
        }
    }
    diff.sqrt() / f64::max(norm.sqrt(), 1e-12)
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cams = probe_cameras();
    let times: Vec<f64> = (0..cams.len()).map(|f| f as f64 / (cams.len() - 1) as f64).collect();
    let (mut track, mut depth, mut arap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let truth = random_nodes(&mut rng, 4);
        let tracks = truth
            .iter()
            .enumerate()
            .map(|(i, n)| AnchoredTrack {
                node: i,
                samples: (0..cams.len())
                    .map(|f| {
                        let (u, d) = cams[f].project(&n.trajectory.eval_position(times[f]).unwrap()).unwrap();
                        Observation { frame: f, pixel: u + Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)), depth: d }
                    })
                    .collect(),
            })
            .collect();
        let nodes = random_nodes(&mut rng, 4);
        let graph = node_neighbor_graph(&nodes, 2);
        let data = OptimData { frame_times: times.clone(), cameras: cams.clone(), tracks, graph: graph.clone() };
        let (_, g) = track_loss(&nodes, &data).map_err(|e| e.to_string())?;
        track = track.max(fd_error(|n| track_loss(n, &data).unwrap().0, &nodes, &g));
        let (_, g) = depth_loss(&nodes, &data).map_err(|e| e.to_string())?;
        depth = depth.max(fd_error(|n| depth_loss(n, &data).unwrap().0, &nodes, &g));
        let (ta, tb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (_, g) = arap_energy(&nodes, &graph, ta, tb).map_err(|e| e.to_string())?;
        arap = arap.max(fd_error(|n| arap_energy(n, &graph, ta, tb).unwrap().0, &nodes, &g));
    }
    ensure(
        track < 1e-4 && depth < 1e-4 && arap < 1e-4,
        format!("worst relative error over 50 states: track {track:.2e}, depth {depth:.2e}, arap {arap:.2e}"),
    )
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_motion-nodes")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out)
}

fn scene_file(dir: &Path) -> Result<String, String> {
    let path = dir.join("scene.cfg");
    std::fs::write(&path, REFERENCE_SCENE).map_err(|e| e.to_string())?;
    Ok(path.display().to_string())
}

/// Runs every stage as a separate process and returns the file paths.
fn pipeline(dir: &Path, seed: &str) -> Result<[String; 5], String> {
    let p = |name: &str| dir.join(name).display().to_string();
    let (bundle, nodes, fitted, refined, metrics) = (p("bundle.jsonl"), p("nodes.jsonl"), p("fitted.jsonl"), p("optimized.jsonl"), p("metrics.json"));
    let scene = scene_file(dir)?;
    cli(&["--threads", "1", "gen-scene", "--config", &scene, "--seed", seed, "--out", &bundle])?;
    cli(&["--threads", "1", "init-nodes", "--bundle", &bundle, "--out", &nodes])?;
    cli(&["--threads", "1", "fit", "--bundle", &bundle, "--nodes", &nodes, "--out", &fitted])?;
    cli(&["--threads", "1", "optimize", "--bundle", &bundle, "--nodes", &fitted, "--out", &refined])?;
    cli(&["--threads", "1", "eval", "--bundle", &bundle, "--nodes", &refined, "--out", &metrics])?;
    Ok([bundle, nodes, fitted, refined, metrics])
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let [.., metrics] = pipeline(dir.path(), "42")?;
    let secs = start.elapsed().as_secs_f64();
    let file = std::fs::File::open(&metrics).map_err(|e| e.to_string())?;
    let m = read_metrics(std::io::BufReader::new(file)).map_err(|e| e.to_string())?;
    ensure(
        m.relative_rmse < 0.01 && secs < 120.0,
        format!("deformed RMSE {:.2e} m = {:.2e} of diagonal {:.3} m, {} nodes, {secs:.1} s", m.deformed_rmse, m.relative_rmse, m.bbox_diagonal, m.node_count),
    )
}

fn compositing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..20);
        let list: Vec<([f64; 3], f64)> = (0..n)
            .map(|_| ([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)], rng.random_range(0.0..=1.0)))
            .collect();
        let mut brute = [0.0; 3];
        for (i, (c, a)) in list.iter().enumerate() {
            let mut t = 1.0;
            for (_, aj) in &list[..i] {
                t *= 1.0 - aj;
            }
            for ch in 0..3 {
                brute[ch] += c[ch] * a * t;
            }
        }
        if composite_alpha(&list) != brute {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches}/1000 lists differ from the expanded sum"))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), "7")?;
    let second = pipeline(b.path(), "7")?;
    let mut differing = Vec::new();
    for (x, y) in first.iter().zip(&second) {
        let (bx, by) = (std::fs::read(x).map_err(|e| e.to_string())?, std::fs::read(y).map_err(|e| e.to_string())?);
        if bx != by {
            differing.push(Path::new(x).file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    ensure(differing.is_empty(), format!("{} of {} files differ {:?}", differing.len(), first.len(), differing))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("1 rigidity of blended rotations", rigidity),
        ("2 SE(3) to dual quaternion round trip", dq_round_trip),
        ("3 Hermite basis, continuity, cubic refit", hermite),
        ("4 spline fitting oracle", fitting_oracle),
        ("5 rigid consistency of deformation", rigid_consistency),
        ("6 motion-adaptive node allocation", allocation),
        ("7 compression ratio and dynamic score", ratio_and_score),
        ("8 loss gradients vs finite differences", gradients),
        ("9 end-to-end pipeline accuracy", end_to_end),
        ("10 alpha compositing oracle", compositing),
        ("11 deterministic output files", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
