use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use motion_nodes::harness::format::{read_bundle, read_nodes, write_bundle, write_nodes};
use motion_nodes::harness::{gen_scene, parse_scene_config, SceneBundle, REFERENCE_SCENE};
use motion_nodes::optimize::LossWeights;
use motion_nodes::pipeline::{candidate_count, default_params, evaluate, fit_nodes, init_nodes, optimize_nodes};

fn small_bundle() -> SceneBundle {
    let src = REFERENCE_SCENE.replace("primitives = 2500", "primitives = 600").replace("primitives = 2000", "primitives = 400");
    gen_scene(&parse_scene_config(&src).unwrap(), 5).unwrap()
}

#[test]
fn stages_through_files_recover_the_motion() {
    let dir = tempfile::tempdir().unwrap();
    let bundle_path = dir.path().join("bundle.jsonl");
    let bundle = small_bundle();
    let mut w = BufWriter::new(File::create(&bundle_path).unwrap());
    write_bundle(&mut w, &bundle).unwrap();
    w.flush().unwrap();
    drop(w);
    let bundle = read_bundle(BufReader::new(File::open(&bundle_path).unwrap())).unwrap();

    let params = default_params(&bundle, candidate_count(&bundle, 6), 0.1);
    let init = init_nodes(&bundle, 6, &params, 8).unwrap();
    assert!(init.reached_target);
    assert!(init.set.nodes.len() <= params.target_count);

    let nodes_path = dir.path().join("nodes.jsonl");
    let mut w = BufWriter::new(File::create(&nodes_path).unwrap());
    write_nodes(&mut w, &init.set, "init").unwrap();
    w.flush().unwrap();
    drop(w);
    let set = read_nodes(BufReader::new(File::open(&nodes_path).unwrap())).unwrap();

    let fit = fit_nodes(&bundle, &set, 8).unwrap();
    let anchored = fit.set.info.iter().filter(|m| m.tracklet.is_some()).count();
    assert!(anchored * 2 > fit.set.nodes.len());

    let out = optimize_nodes(&bundle, &fit.set, &LossWeights::default(), 20, 1e-4).unwrap();
    assert!(out.history.windows(2).all(|w| w[1].total <= w[0].total));
    let m = evaluate(&bundle, &out.set).unwrap();
    assert!(m.relative_rmse < 0.01, "{}", m.relative_rmse);
    assert!(m.density_ratio.unwrap() > 1.0);
}

#[test]
fn unfitted_nodes_leave_dynamic_error() {
    let bundle = small_bundle();
    let params = default_params(&bundle, candidate_count(&bundle, 6), 0.1);
    let init = init_nodes(&bundle, 6, &params, 8).unwrap();
    let fitted = fit_nodes(&bundle, &init.set, 8).unwrap();
    let before = evaluate(&bundle, &init.set).unwrap();
    let after = evaluate(&bundle, &fitted.set).unwrap();
    assert!(after.deformed_rmse < before.deformed_rmse);
}
