use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn morphfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphfit"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = morphfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_track_fuse_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "--out",
        s(d),
        "--frames",
        "4",
        "--train-count",
        "12",
        "--yaw",
        "20",
    ]);
    for f in [
        "model.json",
        "mapping.txt",
        "texture.png",
        "config.json",
        "face_box.txt",
        "sequence/frame_0003.png",
        "sequence/ground_truth.json",
        "train/sample_0011.pts",
    ] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let cascade = d.join("cascade.json");
    let report = ok(&[
        "train-tracker",
        "--data",
        s(&d.join("train")),
        "--out",
        s(&cascade),
        "--stages",
        "2",
        "--perturbations",
        "3",
    ]);
    assert!(report.contains("stage 2"));

    let face_box = fs::read_to_string(d.join("face_box.txt")).unwrap();
    let config = d.join("config.json");
    ok(&[
        "track-video",
        "--config",
        s(&config),
        "--frames",
        s(&d.join("sequence")),
        "--face-box",
        face_box.trim(),
    ]);
    let run = d.join("run");
    for f in ["frames.jsonl", "timings.jsonl", "isomap.png", "mesh.obj"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(
        fs::read_to_string(run.join("timings.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let median = d.join("median.png");
    ok(&[
        "fuse",
        "--config",
        s(&config),
        "--frames",
        s(&d.join("sequence")),
        "--records",
        s(&run.join("frames.jsonl")),
        "--mode",
        "median",
        "--super-resolution",
        "1",
        "--out",
        s(&median),
    ]);
    assert!(median.exists());

    let view = d.join("view.png");
    ok(&[
        "render",
        "--model",
        s(&d.join("model.json")),
        "--fit",
        s(&run.join("frames.jsonl")),
        "--texture",
        s(&run.join("isomap.png")),
        "--yaw",
        "-40",
        "--neutral",
        "--width",
        "128",
        "--height",
        "128",
        "--out",
        s(&view),
    ]);
    assert!(view.exists());

    let json = d.join("eval.json");
    let text = ok(&[
        "eval",
        "--pred",
        s(&run.join("frames.jsonl")),
        "--gt",
        s(&d.join("sequence")),
        "--json",
        s(&json),
    ]);
    assert!(text.contains("of IED"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["frames"].as_array().unwrap().len(), 4);

    let fit_dir = d.join("fit");
    ok(&[
        "fit-image",
        "--model",
        s(&d.join("model.json")),
        "--mapping",
        s(&d.join("mapping.txt")),
        "--image",
        s(&d.join("sequence/frame_0000.png")),
        "--landmarks",
        s(&d.join("sequence/frame_0000.pts")),
        "--out",
        s(&fit_dir),
        "--resolution",
        "64",
    ]);
    for f in ["fit.json", "mesh.obj", "isomap.png"] {
        assert!(fit_dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn eval_reports_fraction_of_eye_distance() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pts");
    let pred = dir.path().join("pred.pts");
    fs::write(&gt, "37 0 0\n46 100 0\n31 50 50\n").unwrap();
    let out = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["mean_normalized"].as_f64(), Some(0.0));

    // Every landmark off by 0.05 of the 100 px eye distance.
    fs::write(&pred, "37 3 4\n46 100 5\n31 45 50\n").unwrap();
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["mean_normalized"].as_f64().unwrap() - 0.05).abs() < 1e-12);
}

#[test]
fn bad_flags_and_paths_fail_with_a_message() {
    let out = morphfit(&["eval", "--bogus"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = morphfit(&[
        "eval",
        "--pred",
        "/nonexistent/a.pts",
        "--gt",
        "/nonexistent/b.pts",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = morphfit(&[
        "track-video",
        "--config",
        "x.json",
        "--frames",
        ".",
        "--face-box",
        "1,2,3",
    ]);
    assert!(!out.status.success());
}
