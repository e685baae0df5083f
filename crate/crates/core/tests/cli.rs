//! Command-line behaviour through the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn gksnet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gksnet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"r": 3, "width": 4, "c": 6, "d": 3, "n_layers": 1, "hidden": 5},
            "train": {"epochs": 2, "batch_size": 8, "support_size": 8, "base_lr": 0.001},
            "sample_ratio": 0.05,
            "synth": {"height": 24, "width": 24, "n_regions": 5}}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let cfg = cfg.to_str().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let src = d.join(format!("{tag}_src"));
        let tgt = d.join(format!("{tag}_tgt"));
        let work = d.join(tag);
        assert!(gksnet(&["gen-synth", "--config", cfg, "--seed", "1"], &src).status.success());
        assert!(gksnet(&["gen-synth", "--config", cfg, "--seed", "2"], &tgt).status.success());
        let pre = gksnet(&["preclassify", "--config", cfg, "--target", tgt.to_str().unwrap()], &work);
        assert!(pre.status.success(), "{}", stderr(&pre));
        let t = gksnet(
            &["train", "--config", cfg, "--source", src.to_str().unwrap(), "--target", tgt.to_str().unwrap()],
            &work,
        );
        assert!(t.status.success(), "{}", stderr(&t));
        let ck = work.join("model.gks");
        let p = gksnet(
            &["predict", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--target", tgt.to_str().unwrap()],
            &work,
        );
        assert!(p.status.success(), "{}", stderr(&p));
        let e = gksnet(
            &[
                "evaluate",
                "--map",
                work.join("change_map.pgm").to_str().unwrap(),
                "--gt",
                tgt.join("gt.pgm").to_str().unwrap(),
            ],
            &work,
        );
        assert!(e.status.success(), "{}", stderr(&e));
        ["img1.pgm", "img2.pgm", "gt.pgm"]
            .iter()
            .map(|f| tgt.join(f))
            .chain(["model.gks", "history.jsonl", "change_map.pgm", "metrics.json", "di.pgm", "samples.json"]
                .iter()
                .map(|f| work.join(f)))
            .map(|p| std::fs::read(p).unwrap())
            .collect()
    };
    assert_eq!(run("a"), run("b"));
    let history = std::fs::read_to_string(d.join("a/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "loss_target", "loss_source", "acc_target_train"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn evaluate_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gksnet(&["gen-synth", "--height", "16", "--width", "16", "--regions", "4"], d).status.success());
    let gt = d.join("gt.pgm");
    let o = gksnet(&["evaluate", "--map", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()], d);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["oe"], 0);
    assert_eq!(v["pcc"], 100.0);
    assert_eq!(v["fp"], 0);
    assert_eq!(v["fn"], 0);
}

#[test]
fn error_paths_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nowhere/model.gks");
    let o = gksnet(&["predict", "--checkpoint", missing.to_str().unwrap(), "--target", d.to_str().unwrap()], d);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("nowhere/model.gks"), "{err}");

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"model": {"r": 4}}"#).unwrap();
    let o = gksnet(&["gen-synth", "--config", bad.to_str().unwrap()], d);
    assert!(!o.status.success());
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let o = gksnet(&["gen-synth", "--change-fraction", "0.7"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));

    let o = gksnet(&["train", "--no-such-flag"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));

    let o = gksnet(&["sweep", "--axis", "q"], d);
    assert!(!o.status.success());
}

#[test]
fn rgb_png_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = d.join("img1.png");
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, 2, 2);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0; 12]).unwrap();
        w.finish().unwrap();
    }
    std::fs::write(&img, bytes).unwrap();
    std::fs::copy(&img, d.join("img2.png")).unwrap();
    let o = gksnet(&["preclassify", "--target", d.to_str().unwrap()], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("grayscale required"));
}
