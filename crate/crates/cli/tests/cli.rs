use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgom::gom::{init_canonical, GaussianDefaults};
use lgom::io;
use lgom::rig::Pose;
use lgom::trainkit::{mask_iou, mesh_coverage, render_gom, PSNR_SENTINEL};

fn lgom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgom")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lgom(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn gen(out: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--subjects", "2", "--views", "4", "--resolution", "24", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

const TINY_RECON: &str = r#"{"feature_width": 4, "pyramid_levels": 2, "hidden": 4, "sources": 4, "mesh_rounds": 1, "subdivision": 2}"#;

fn tiny_config(dir: &Path, iterations: usize) -> PathBuf {
    let p = dir.join("train.json");
    let text = format!(r#"{{"iterations": {iterations}, "subjects": 2, "resolution": 16, "steps": 2, "sample_every": 1, "recon": {TINY_RECON}}}"#);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_data_counts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    gen(&a, &[]);
    let all = files(&a);
    let count = |suffix: &str| all.iter().filter(|p| s(p).ends_with(suffix)).count();
    assert_eq!(count("_mask.png"), 8);
    assert_eq!(count(".png") - count("_mask.png"), 8);
    assert_eq!(count("manifest.json"), 2);
    gen(&a, &[]);
    let b = dir.path().join("b");
    gen(&b, &[]);
    let rel = |root: &Path| files(root).iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), fs::read(p).unwrap())).collect::<Vec<_>>();
    assert_eq!(rel(&a), rel(&b));
}

#[test]
fn zero_resolution_fails_before_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let r = lgom(&["gen-data", "--resolution", "0", "--out", s(&out)]);
    assert!(!r.status.success());
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: argument: ") && err.contains("resolution"), "{err}");
    assert!(!out.exists());
}

#[test]
fn errors_are_single_lines_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.lgom");
    let r = lgom(&["render", "--gom", s(&missing), "--pose", "p.json", "--camera", "c.json", "--out", "x.png"]);
    assert!(!r.status.success());
    let err = String::from_utf8(r.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: io: ") && err.contains("nope.lgom"), "{err}");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"iterations": 1, "learning_rate": 3}"#).unwrap();
    let r = lgom(&["train", "--config", s(&bad), "--out", s(&dir.path().join("t"))]);
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(err.starts_with("error: format: ") && err.contains("bad.json") && err.contains("learning_rate"), "{err}");

    let r = lgom(&["bench", "--counts", "ten", "--out", "b.csv"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(String::from_utf8(r.stderr).unwrap().lines().count(), 1);
}

#[test]
fn template_render_matches_in_memory_render() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--subjects", "1", "--views", "1", "--resolution", "64", "--out", s(dir.path())]);
    let subject = dir.path().join("subject_0000");
    let pose = dir.path().join("identity.json");
    io::write_pose(&pose, &Pose::identity(9)).unwrap();
    let camera = subject.join("view_00_camera.json");
    let (png, mask) = (dir.path().join("t.png"), dir.path().join("t_mask.png"));
    ok(&["render", "--gom", s(&subject.join("template.lgom")), "--pose", s(&pose), "--camera", s(&camera), "--out", s(&png), "--mask", s(&mask)]);
    let rig = io::read_rig(&subject.join("rig.json")).unwrap();
    let cam = io::read_camera(&camera).unwrap();
    let (_, _, soft) = io::read_png_gray(&mask).unwrap();
    // the same template rendered in memory
    let template = init_canonical(&rig, 2, &GaussianDefaults::default()).unwrap();
    let direct = render_gom(&template, &Pose::identity(9), &cam, &Default::default()).unwrap();
    let iou = mask_iou(&soft, &direct.alpha).unwrap();
    assert!(iou >= 0.95, "silhouette IoU {iou}");
    // splats only ever widen the mesh silhouette
    let truth = mesh_coverage(&rig.template.vertices, &rig.template.faces, &cam).unwrap();
    let covered = truth.iter().zip(&soft).filter(|(t, a)| **t > 0.5 && **a >= 0.5).count();
    let total = truth.iter().filter(|t| **t > 0.5).count();
    assert!(covered as f64 >= 0.95 * total as f64, "{covered} of {total}");
    // the default Gaussians are gray
    let (_, _, img) = io::read_png_rgb(&png).unwrap();
    for (p, a) in img.chunks(3).zip(&soft) {
        if *a > 0.99 {
            assert!((p[0] - p[1]).abs() < 1e-9 && (p[1] - p[2]).abs() < 1e-9 && p[0] > 0.1);
        }
    }
}

#[test]
fn untrained_single_step_reconstruction_is_the_template() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &[]);
    let cfg = tiny_config(dir.path(), 0);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let subject = dir.path().join("subject_0001");
    let out = dir.path().join("recon.lgom");
    let report = dir.path().join("report.csv");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&run.join("checkpoint.lgom")),
        "--manifest",
        s(&subject.join("manifest.json")),
        "--steps",
        "1",
        "--out",
        s(&out),
        "--report",
        s(&report),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(subject.join("template.lgom")).unwrap());
    let rep = fs::read_to_string(&report).unwrap();
    assert!(rep.starts_with("step,ms,source_psnr\n"), "{rep}");
    assert_eq!(rep.lines().count(), 2);
}

#[test]
fn train_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("checkpoint.lgom")).unwrap(), fs::read(b.join("checkpoint.lgom")).unwrap());
    let curve = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(curve.starts_with("iteration,subject,loss,l1,ssim,mask,lap,ms\n"));
    assert_eq!(curve.lines().count(), 3);
    assert_eq!(files(&a.join("samples")).len(), 2);
    let ck = io::load_checkpoint(&a.join("checkpoint.lgom")).unwrap();
    assert_eq!(ck.config.feature_width, 4);
}

#[test]
fn animate_writes_a_frame_per_pose() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--subjects", "1", "--views", "2", "--resolution", "16", "--subdivision", "0", "--out", s(dir.path())]);
    let subject = dir.path().join("subject_0000");
    let seq: Vec<io::PoseFile> = ["view_00_pose.json", "view_01_pose.json"]
        .iter()
        .map(|f| io::PoseFile::from(&io::read_pose(&subject.join(f)).unwrap()))
        .collect();
    let poses = dir.path().join("seq.json");
    io::write_json(&poses, &seq).unwrap();
    let frames = dir.path().join("frames");
    ok(&["animate", "--gom", s(&subject.join("template.lgom")), "--poses", s(&poses), "--camera", s(&subject.join("view_00_camera.json")), "--out", s(&frames)]);
    assert_eq!(files(&frames).len(), 2);
}

#[test]
fn eval_reference_rows_hit_the_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("eval.json");
    fs::write(&cfg, r#"{"subjects": 2, "resolution": 16}"#).unwrap();
    let out = dir.path().join("m.csv");
    ok(&["eval", "--reference", "--config", s(&cfg), "--out", s(&out)]);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row[4].parse::<f64>().unwrap(), PSNR_SENTINEL);
    }
}

#[test]
fn eval_grid_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&tiny_config(dir.path(), 1)), "--out", s(&run)]);
    let cfg = dir.path().join("eval.json");
    fs::write(&cfg, r#"{"subjects": 1, "resolution": 16, "subdivisions": [0, 1], "sigmas": [0.0, 0.1]}"#).unwrap();
    let (out, sum) = (dir.path().join("m.csv"), dir.path().join("s.csv"));
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint.lgom")), "--config", s(&cfg), "--out", s(&out), "--summary", s(&sum)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 3 * 2 * 2);
    assert_eq!(fs::read_to_string(&sum).unwrap().lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn bench_is_monotone_in_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    ok(&["bench", "--counts", "500,5000,50000", "--resolutions", "64", "--repeats", "2", "--out", s(&out)]);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let ms: Vec<f64> = r.records().map(|x| x.unwrap()[4].parse().unwrap()).collect();
    assert_eq!(ms.len(), 3);
    assert!(ms.windows(2).all(|w| w[0] <= w[1]), "{ms:?}");
}
