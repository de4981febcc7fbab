use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use warpgeo_cli::commands::{RunSummary, ABLATION_CSV_HEADER};
use warpgeo_cli::config::RunConfig;

fn warpgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpgeo"))
        .args(args)
        .env("WARPGEO_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 4] = ["--height", "32", "--width", "48"];

#[test]
fn gradcheck_prints_a_table_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = warpgeo(&["gradcheck", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("operation"));
    assert!(text.contains("total_objective"));
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn optimize_then_eval_writes_all_depth_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let run = dir.path().join("run");
    let ev = dir.path().join("eval");
    let mut gen = vec!["gen-scene", "--preset", "slanted", "--out", path(&scene)];
    gen.extend(SMALL);
    assert_eq!(warpgeo(&gen).status.code(), Some(0));
    for f in ["sequence.json", "scene.json", "frame_0.pfm", "frame_1.pfm", "frame_2.pfm", "depth.pfm", "normals.png"] {
        assert!(scene.join(f).exists(), "gen-scene did not write {f}");
    }

    let opt = warpgeo(&[
        "optimize",
        "--scene-dir",
        path(&scene),
        "--known-poses",
        "--steps",
        "100",
        "--lr",
        "2e-2",
        "--out",
        path(&run),
    ]);
    assert_eq!(opt.status.code(), Some(0), "{}", String::from_utf8_lossy(&opt.stderr));
    for f in ["depth.pfm", "depth.png", "normals.pfm", "normals.png", "mask_0.pfm", "trace.csv", "summary.json"] {
        assert!(run.join(f).exists(), "optimize did not write {f}");
    }
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 101);

    let ev_out = warpgeo(&[
        "eval",
        "--pred",
        path(&run.join("depth.pfm")),
        "--gt",
        path(&scene.join("depth.pfm")),
        "--pred-normals",
        path(&run.join("normals.pfm")),
        "--gt-normals",
        path(&scene.join("normals.pfm")),
        "--scale-correct",
        "--out",
        path(&ev),
    ]);
    assert_eq!(ev_out.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev_out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for field in ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta_1", "delta_2", "delta_3"] {
        assert!(metrics["depth"][field].is_f64(), "missing depth metric {field}");
    }
    assert!(metrics["normals"]["mean_deg"].is_f64());
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("abs_rel,sq_rel,rmse,rmse_log,delta_1,delta_2,delta_3"));
}

#[test]
fn ablate_emits_the_four_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--preset", "slanted", "--known-poses", "--steps", "40", "--out", path(dir.path())];
    args.extend(SMALL);
    let out = warpgeo(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(ABLATION_CSV_HEADER));
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["no d-n", "smooth no gradient", "no img grad for d-n", "no normal smooth"]);
    for sub in ["full", "no_dn", "smooth_no_gradient", "no_img_grad_for_dn", "no_normal_smooth"] {
        assert!(dir.path().join(sub).join("summary.json").exists(), "missing run {sub}");
    }
}

#[test]
fn resolved_config_replays_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let mut args = vec!["optimize", "--preset", "edge", "--steps", "60", "--seed", "3", "--alpha", "0.5"];
    args.extend(SMALL);
    args.extend(["--out", path(&first)]);
    assert_eq!(warpgeo(&args).status.code(), Some(0));

    let cfg_path = first.join("resolved_config.json");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.optim.objective.alpha_dn, 0.5);
    assert_eq!(cfg.optim.max_steps, 60);

    let replay = warpgeo(&["optimize", "--config", path(&cfg_path), "--out", path(&second)]);
    assert_eq!(replay.status.code(), Some(0));
    for f in ["trace.csv", "depth.pfm", "normals.pfm", "mask_0.pfm", "mask_1.pfm", "summary.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(second.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.steps, 60);
    assert_eq!(summary.pose_errors.map(|e| e.len()), Some(2));
}

#[test]
fn layers_round_trip_a_plane() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("layers");
    let mut gen = vec!["gen-scene", "--preset", "fronto", "--out", path(&scene)];
    gen.extend(SMALL);
    assert_eq!(warpgeo(&gen).status.code(), Some(0));
    let res = warpgeo(&[
        "layers",
        "--op",
        "refine",
        "--depth",
        path(&scene.join("depth.pfm")),
        "--image",
        path(&scene.join("frame_1.pfm")),
        "--intrinsics",
        path(&scene.join("sequence.json")),
        "--out",
        path(&out),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let input = warpgeo::io::load_scalar_pfm(scene.join("depth.pfm")).unwrap();
    let refined = warpgeo::io::load_scalar_pfm(out.join("depth_refined.pfm")).unwrap();
    for (a, b) in input.iter().zip(refined.iter()) {
        assert!((a - b).abs() <= 1e-5 * a, "refined {b} vs input {a}");
    }
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    // Configuration errors.
    assert_eq!(warpgeo(&["optimize", "--lr=-1", "--out", &out("a")]).status.code(), Some(2));
    assert_eq!(warpgeo(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(warpgeo(&["eval", "--out", &out("b")]).status.code(), Some(2));
    assert_eq!(warpgeo(&["optimize", "--scene-dir", &out("missing"), "--out", &out("c")]).status.code(), Some(2));
    // A step size this large drives the log-depth to overflow.
    let mut args = vec!["optimize", "--preset", "fronto", "--steps", "50", "--lr", "1e3"];
    args.extend(SMALL);
    let o = out("d");
    args.extend(["--out", &o]);
    assert_eq!(warpgeo(&args).status.code(), Some(3));
}
