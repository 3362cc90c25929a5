use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[grid]\nx_min = -5.12\nx_max = 5.12\ny_min = -5.12\ny_max = 5.12\n\
                     [model]\nblocks = 1\nchannels = 16\nheads = 4\nhidden = 32\n\
                     [head]\nscore_threshold = 0.0\n[scene]\nsparsity = 0.2\nextent = 10\n";

fn sst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sst")).current_dir(dir).args(args).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = setup();
    assert_eq!(sst(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(sst(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sst(dir.path(), &["--workers", "0", "voxelize"]).status.code(), Some(1));
    assert_eq!(sst(dir.path(), &["--help"]).status.code(), Some(0));
    std::fs::write(dir.path().join("bad.toml"), "[region]\nsize = 3.83\n").unwrap();
    let o = sst(dir.path(), &["--config", "bad.toml", "voxelize"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("multiple"));
    std::fs::write(dir.path().join("typo.toml"), "[model]\nchanels = 8\n").unwrap();
    assert_eq!(sst(dir.path(), &["--config", "typo.toml", "voxelize"]).status.code(), Some(1));
    assert_eq!(sst(dir.path(), &["--points", "missing.bin", "voxelize"]).status.code(), Some(1));
    let o = sst(dir.path(), &["--config", "small.toml", "attn-dump", "--query", "0,0", "--module", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn voxelize_reports_regions_and_buckets() {
    let dir = setup();
    let o = sst(dir.path(), &["--config", "small.toml", "voxelize"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["tokens = ", "sparsity = ", "plain.padding_waste", "shifted.bucket."] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn weights_round_trip_through_forward() {
    let dir = setup();
    let p = dir.path();
    assert!(sst(p, &["--config", "small.toml", "--seed", "4", "init-weights", "--out", "w.sstw"]).status.success());
    let a = sst(p, &["--config", "small.toml", "--seed", "4", "forward", "--out", "a.csv"]);
    let b = sst(p, &["--config", "small.toml", "--seed", "4", "--weights", "w.sstw", "forward", "--out", "b.csv"]);
    assert!(a.status.success() && b.status.success());
    let a = std::fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("b.csv")).unwrap());
    assert!(a.starts_with("cx,cy,cz,l,w,h,yaw,score,class\n"));
    assert!(a.lines().count() > 1);
    // Weights for another model shape are rejected as a usage error.
    std::fs::write(p.join("wide.toml"), SMALL.replace("channels = 16", "channels = 32")).unwrap();
    let o = sst(p, &["--config", "wide.toml", "--weights", "w.sstw", "forward"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn forward_reads_csv_points_and_f64() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("pts.csv"), "x,y,z,intensity\n0.1,0.1,0.5,0.2\n0.2,0.15,0.4,0.3\n-3.0,2.0,1.0,0.9\n")
        .unwrap();
    let o = sst(p, &["--config", "small.toml", "--points", "pts.csv", "--f64", "forward", "--dense-out", "d.sstw"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("cx,cy"));
    let bytes = std::fs::read(p.join("d.sstw")).unwrap();
    assert_eq!(&bytes[..4], b"SSTW");
}

#[test]
fn flops_attn_dump_and_bench() {
    let dir = setup();
    let p = dir.path();
    let o = sst(p, &["--config", "small.toml", "flops", "--out", "flops.csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("attention_ratio_times_heads"));
    assert!(std::fs::read_to_string(p.join("flops.csv")).unwrap().starts_with("key,value\n"));

    let vox = stdout(&sst(p, &["--config", "small.toml", "voxelize"]));
    assert!(vox.contains("tokens"));
    // Find an occupied cell from the dense dump of token coordinates.
    assert!(sst(p, &["--config", "small.toml", "forward", "--out", "d.csv", "--dense-out", "d.sstw"]).status.success());
    let tensors = sst_core::io::load_tensors(&p.join("d.sstw")).unwrap();
    let coords = &tensors["tokens.coords"];
    let query = format!("{},{}", coords[[0, 0]], coords[[0, 1]]);
    let o = sst(p, &["--config", "small.toml", "attn-dump", "--query", &query, "--module", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    assert!(csv.starts_with("ix,iy,weight_head_0"));
    let total: f64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5, "{total}");

    let o = sst(p, &["--config", "small.toml", "bench", "--sparsity", "0.1,0.2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn gradcheck_and_selftest_pass() {
    let dir = setup();
    let o = sst(dir.path(), &["gradcheck"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max_rel_error"));
    let o = sst(dir.path(), &["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn corrupt_weights_are_rejected() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("junk.sstw"), b"SSTW\x01\x00\x00\x00\x05").unwrap();
    let o = sst(p, &["--config", "small.toml", "--weights", "junk.sstw", "forward"]);
    assert_eq!(o.status.code(), Some(1));
}
