use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cskf-bench")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bench(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generated_sessions_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["sim", "generate", "--seed", "4", "--out", p(&a)]);
    ok(&["sim", "generate", "--seed", "4", "--out", p(&b)]);
    for f in ["world.csv", "mapping/obs.csv", "localization/imu.csv", "localization/truth.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn built_map_can_be_inspected_exported_and_used() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("map.bin");
    ok(&["map", "build", "--seed", "3", "--submaps", "2", "--out", p(&bundle)]);
    let info = ok(&["map", "inspect", p(&bundle)]);
    assert!(info.contains("sub-maps 2"), "{info}");

    let export = dir.path().join("export");
    ok(&["map", "export", p(&bundle), "--out", p(&export)]);
    for f in ["factors.csv", "submap0_poses.csv", "submap1_features.csv"] {
        assert!(export.join(f).is_file(), "{f}");
    }

    let run = dir.path().join("run");
    ok(&["run", "--mode", "scskf", "--submaps", "2", "--seed", "3", "--map", p(&bundle), "--out", p(&run)]);
    for f in ["summary.json", "config.toml", "scskf-l2_seed3.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn mismatched_bundle_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("map.bin");
    ok(&["map", "build", "--seed", "3", "--submaps", "2", "--out", p(&bundle)]);
    let out = bench(&["run", "--mode", "cskf", "--seed", "3", "--map", p(&bundle), "--out", p(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub-map"));
}

#[test]
fn missing_bundle_is_an_error() {
    let out = bench(&["map", "inspect", "/nonexistent/map.bin"]);
    assert!(!out.status.success());
}

#[test]
fn partition_lists_segments() {
    let text = ok(&["map", "partition", "--seed", "2", "--submaps", "3"]);
    assert!(text.lines().count() >= 3, "{text}");
}
