use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[scene]
n_cameras = 12
layout = "two-cluster"
width = 20
height = 20
steps = 256

[train]
iterations = 40
batch_rays = 64
warmup_iters = 2
"#;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn blockfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockfield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = blockfield(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[partition]\nkay = 3\n").unwrap();
    let out = blockfield(&["--config", s(&cfg), "config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kay"));
}

#[test]
fn missing_inputs_name_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = blockfield(&["--out", s(dir.path()), "train-coarse"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn gen_data_flags_shape_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&["--config", s(&cfg), "--out", s(dir.path()), "gen-data", "--n-cameras", "6", "--resolution", "16"]);
    let images: Vec<_> = fs::read_dir(dir.path().join("data/images")).unwrap().collect();
    assert_eq!(images.len(), 6);
    let img = blockfield::ImageBuffer::load_png(&dir.path().join("data/images/000.png")).unwrap();
    assert_eq!(img.dims(), (16, 16));
}

#[test]
fn pipeline_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "pipeline"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "pipeline"]);
    for f in ["metrics.tsv", "metrics.json", "coarse.ckpt", "blocks.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let tsv = fs::read_to_string(a.join("metrics.tsv")).unwrap();
    for label in ["coarse-only", "block-0", "block-1", "idw-fused", "global-fused"] {
        assert!(tsv.contains(label), "missing {label}");
    }

    let again = ok(&["--config", s(&cfg), "--out", s(&a), "pipeline"]);
    let log = String::from_utf8_lossy(&again.stderr);
    assert!(log.contains("train-coarse: checkpoint is current"), "{log}");
    assert!(log.contains("train-blocks: every block is current"), "{log}");
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    // A changed block setting retrains the blocks but keeps the coarse model.
    let changed = ok(&["--config", s(&cfg), "--out", s(&a), "--decoder-policy", "freeze", "pipeline"]);
    let log = String::from_utf8_lossy(&changed.stderr);
    assert!(log.contains("train-coarse: checkpoint is current"), "{log}");
    assert!(log.contains("training blocks [0, 1]"), "{log}");
}

#[test]
fn block_checkpoints_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", s(&cfg), "--out", s(out), "gen-data"]);
        ok(&["--config", s(&cfg), "--out", s(out), "train-coarse"]);
        ok(&["--config", s(&cfg), "--out", s(out), "--k", "3", "split"]);
    }
    ok(&["--config", s(&cfg), "--out", s(&a), "--k", "3", "--jobs", "1", "train-blocks"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "--k", "3", "--jobs", "4", "train-blocks"]);
    for block in 0..3 {
        let f = format!("blocks/block_{block:02}.ckpt");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f} differs");
    }
}

#[test]
fn single_unscaled_block_fuses_to_its_own_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", s(&cfg), "--out", s(&out), "--k", "1", "--s-aabb", "1"];
    ok(&[&common[..], &["pipeline"]].concat());
    ok(&[&common[..], &["--fusion", "global", "fuse", "--selection"]].concat());
    let renders = out.join("renders");
    let mut views = 0;
    for entry in fs::read_dir(&renders).unwrap() {
        let view = entry.unwrap().path();
        if !view.is_dir() {
            continue;
        }
        let name = view.file_name().unwrap().to_str().unwrap().to_string();
        let block = fs::read(view.join("block_00.rgbf")).unwrap();
        let fused = fs::read(out.join("fused").join(format!("{name}_global.rgbf"))).unwrap();
        assert_eq!(block, fused, "{name}");
        assert!(out.join("fused").join(format!("{name}_selection.png")).exists());
        views += 1;
    }
    assert!(views > 0);
}

#[test]
fn eval_prints_json_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&out), "pipeline"]);
    let printed = ok(&["--config", s(&cfg), "--out", s(&out), "eval", "--json"]);
    let reports: Vec<blockfield::eval::MetricReport> = serde_json::from_slice(&printed.stdout).unwrap();
    assert_eq!(reports.len(), 5);
    assert!(reports.iter().all(|r| r.mean_psnr.is_finite() && r.mean_ssim <= 1.0));
}
