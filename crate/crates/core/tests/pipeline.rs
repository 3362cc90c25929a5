use sst_core::attention::{PeContext, PeMode};
use sst_core::backbone::SstConfig;
use sst_core::grouping::RegionConfig;
use sst_core::io::{load_tensors, read_points, save_tensors, write_points};
use sst_core::model::{run_scene, ModelDims, SstParams};
use sst_core::synth::{synth_scene, Profile, SceneSpec};
use sst_core::voxelizer::{GridConfig, PointCloud};
use sst_core::SstError;

fn setup() -> (GridConfig, SstConfig, ModelDims) {
    let grid = GridConfig::square(48, 0.32);
    let backbone = SstConfig {
        num_blocks: 2,
        region: RegionConfig::default().resolve(&grid).unwrap(),
        pe: PeContext { mode: PeMode::RegionLocal, grid_nx: 48, grid_ny: 48 },
        cache_grouping: false,
    };
    let dims = ModelDims { num_blocks: 2, channels: 16, heads: 4, hidden: 32, anchors_per_cell: 4 };
    (grid, backbone, dims)
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (grid, backbone, dims) = setup();
    let cloud = synth_scene(&SceneSpec::new(3, 0.2, 15.0, Profile::Clustered), &grid).unwrap();
    let points_path = dir.path().join("scene.sstp");
    write_points(&cloud, &points_path).unwrap();
    let loaded = read_points(&points_path).unwrap();
    assert_eq!(loaded.len(), cloud.len());

    let csv_path = dir.path().join("scene.csv");
    let mut text = String::from("x,y,z,intensity\n");
    for p in &loaded.points {
        text += &format!("{},{},{},{}\n", p.x, p.y, p.z, p.intensity);
    }
    std::fs::write(&csv_path, text).unwrap();
    assert_eq!(read_points(&csv_path).unwrap(), loaded);

    let params = SstParams::<f32>::random(&dims, 4).unwrap();
    let weights_path = dir.path().join("model.sstw");
    save_tensors(&params.to_tensors(), &weights_path).unwrap();
    let reloaded = SstParams::<f32>::from_tensors(&load_tensors(&weights_path).unwrap(), &dims).unwrap();
    assert_eq!(reloaded, params);

    let a = run_scene(&loaded, &grid, &backbone, &params, None).unwrap();
    let b = run_scene(&loaded, &grid, &backbone, &reloaded, None).unwrap();
    assert_eq!(a.head, b.head);
}

#[test]
fn thread_count_does_not_change_results() {
    let (grid, backbone, dims) = setup();
    let cloud = synth_scene(&SceneSpec::new(5, 0.3, 15.36, Profile::Uniform), &grid).unwrap();
    let params = SstParams::<f32>::random(&dims, 6).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_scene(&cloud, &grid, &backbone, &params, None).unwrap())
    };
    let (one, many) = (run(1), run(6));
    assert_eq!(one.tokens, many.tokens);
    assert_eq!(one.dense, many.dense);
    assert_eq!(one.head, many.head);
    assert_eq!(one.ledger, many.ledger);
}

#[test]
fn float_modes_agree() {
    let (grid, backbone, dims) = setup();
    let cloud = synth_scene(&SceneSpec::new(7, 0.15, 15.36, Profile::Uniform), &grid).unwrap();
    let p32 = SstParams::<f32>::random(&dims, 8).unwrap();
    let p64: SstParams<f64> = p32.cast();
    let a = run_scene(&cloud, &grid, &backbone, &p32, None).unwrap();
    let b = run_scene(&cloud, &grid, &backbone, &p64, None).unwrap();
    let scale = b.tokens.features.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.tokens.features.iter().zip(&b.tokens.features).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs()));
    assert!(err < 1e-4 * scale, "{err} vs {scale}");
}

#[test]
fn empty_scene_runs() {
    let (grid, backbone, dims) = setup();
    let params = SstParams::<f64>::random(&dims, 9).unwrap();
    let out = run_scene(&PointCloud::default(), &grid, &backbone, &params, None).unwrap();
    assert!(out.tokens.is_empty());
    assert_eq!(out.ledger.projections() + out.ledger.attention() + out.ledger.mlp, 0);
}

#[test]
fn broken_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.sstw");
    std::fs::write(&path, b"SSTW\x01\x00\x00\x00\x05\x00\x00\x00").unwrap();
    assert!(matches!(load_tensors(&path), Err(SstError::Format(_))));
    let missing = dir.path().join("missing.sstp");
    assert!(matches!(read_points(&missing), Err(SstError::Io(_))));
}
