use std::fs::File;
use std::path::Path;
use std::process::{Command, Output};

use defa_core::pruning::{read_mask, MaskFile};

fn defa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defa")).args(args).arg("--out").arg(out).output().unwrap()
}

const SMALL: &str = "levels = \"8x8,4x4,2x2,1x1\"\nd_in = 8\nn_heads = 2\nblocks = 2\n";

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn simulate_writes_versioned_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("out");
    let o = defa(&["simulate", cfg.to_str().unwrap(), "--mode", "intra", "--fusion", "off"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("simulate.json")).unwrap()).unwrap();
    assert_eq!(json["format_version"], 1);
    assert_eq!(json["runs"][0]["spec"]["flags"]["parallelism"], "intra");
    assert_eq!(json["runs"][0]["spec"]["flags"]["fused"], false);
    let csv = std::fs::read_to_string(out.join("simulate.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("format_version,"));
    let echoed = std::fs::read_to_string(out.join("simulate.config.toml")).unwrap();
    assert!(echoed.contains("parallelism = \"intra\""));
}

#[test]
fn report_diff_flags_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let cfg = cfg.to_str().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        assert!(defa(&["run", "fusion-ablation", "--config", cfg, "--seed", seed], dir).status.success());
    }
    for ext in ["json", "csv"] {
        let name = format!("fusion-ablation.{ext}");
        let same = defa(&["report", "diff", a.join(&name).to_str().unwrap(), b.join(&name).to_str().unwrap()], &a);
        assert_eq!(same.status.code(), Some(0));
        let differ = defa(&["report", "diff", a.join(&name).to_str().unwrap(), c.join(&name).to_str().unwrap()], &a);
        assert_eq!(differ.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&differ.stdout).contains("difference"));
    }
}

#[test]
fn mask_gen_and_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("masks");
    let o = defa(&["mask", "gen", "--config", cfg.to_str().unwrap(), "--epsilon", "0.05", "--k", "1"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let fmap = read_mask(&mut File::open(out.join("fmap-mask-block0.dfam")).unwrap()).unwrap();
    let MaskFile::Fmap(m) = fmap else { panic!("expected an fmap mask") };
    assert_eq!(m.len(), 64 + 16 + 4 + 1);
    assert!(m.kept() < m.len());

    let point = read_mask(&mut File::open(out.join("point-mask-block0.dfam")).unwrap()).unwrap();
    let MaskFile::Point { shapes, mask } = point else { panic!("expected a point mask") };
    assert_eq!(shapes.len(), 4);
    assert_eq!(mask.dims(), (85, 2, 4, 4));

    let dump = defa(&["mask", "dump", out.join("fmap-mask-block0.dfam").to_str().unwrap(), "--bits"], &out);
    let text = String::from_utf8_lossy(&dump.stdout);
    assert!(text.starts_with("kind: fmap"));
    assert!(text.contains("level 3: 1x1"));
    assert_eq!(text.lines().filter(|l| l.starts_with("  ")).count(), 8 + 4 + 2 + 1);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    let o = defa(&["simulate", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let junk = tmp.path().join("junk.dfam");
    std::fs::write(&junk, b"JUNKJUNK").unwrap();
    assert_eq!(defa(&["mask", "dump", junk.to_str().unwrap()], tmp.path()).status.code(), Some(2));

    let o = defa(&["simulate", tmp.path().join("small.toml").to_str().unwrap(), "--epsilon", "-1"], tmp.path());
    assert!(!o.status.success());
}
