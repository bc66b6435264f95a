use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridflow::grid::FrameGrid;
use gridflow::io::{read_grid, write_grid};

const CONFIG: &str = "version = 1
seed = 3
model.L = 2
model.D = 16
model.heads = 2
model.p = 4
model.H = 8
model.W = 8
model.V = 3
model.T = 4
model.freq_dim = 8
flow.base_steps = 4
flow.pseudo_steps = 2
flow.render_steps = 2
data.dynamic = 3
data.freeze = 3
data.pseudo = 2
data.render = 2
data.test = 2
sample.steps = 3
";

fn gridflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridflow")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("run_manifest.txt") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = gridflow(&["synth-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn train_4d_without_base_checkpoint_names_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridflow(&["train-4d", "--data", &s(dir.path()), "--out", &s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: missing_input:") && err.contains("--base-ckpt"), "{err}");
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "version = 1\nmodel.L = -1\n").unwrap();
    let out = gridflow(&["synth-data", "--config", &s(&cfg), "--out", &s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: config:") && err.contains("line 2"), "{err}");
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    for name in ["a", "b"] {
        let out = gridflow(&["synth-data", "--config", &s(&cfg), "--seed", "7", "--out", &s(&dir.path().join(name))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = tree(&dir.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, tree(&dir.path().join("b")));
    assert!(dir.path().join("a/run_manifest.txt").exists());
}

#[test]
fn sample_keeps_first_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("c.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg = s(&cfg);
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(gridflow(&["synth-data", "--config", &cfg, "--out", &s(&root.join("data"))]));
    ok(gridflow(&["train-base", "--config", &cfg, "--data", &s(&root.join("data")), "--out", &s(&root.join("base"))]));
    ok(gridflow(&[
        "train-4d",
        "--config",
        &cfg,
        "--data",
        &s(&root.join("data")),
        "--base-ckpt",
        &s(&root.join("base/base.ckpt")),
        "--variant",
        "hard",
        "--out",
        &s(&root.join("hard")),
    ]));
    let gt = read_grid(&root.join("data/grids/test4d_00000.4rgf")).unwrap();
    let row = gt.row_video(0).unwrap();
    let col = gt.column_video(0).unwrap();
    write_grid(&root.join("r.4rgf"), &FrameGrid::from_row(&row)).unwrap();
    write_grid(&root.join("col.4rgf"), &FrameGrid::from_column(&col)).unwrap();
    ok(gridflow(&[
        "sample",
        "--config",
        &cfg,
        "--ckpt",
        &s(&root.join("hard/4d.ckpt")),
        "--first-row",
        &s(&root.join("r.4rgf")),
        "--first-col",
        &s(&root.join("col.4rgf")),
        "--out",
        &s(&root.join("g.4rgf")),
        "--png",
        &s(&root.join("png")),
    ]));
    let g = read_grid(&root.join("g.4rgf")).unwrap();
    assert_eq!((g.v, g.t), (3, 4));
    assert_eq!(g.row_video(0).unwrap(), row);
    assert_eq!(g.column_video(0).unwrap(), col);
    assert!(root.join("png/contact_sheet.png").exists());
    assert!(root.join("png/v002_t003.png").exists());
}
