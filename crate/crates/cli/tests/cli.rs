use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn auxft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = auxft(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.json").to_str().unwrap().to_string()
}

fn train(manifest: &str, out: &Path) {
    ok(&[
        "train",
        "--manifest",
        manifest,
        "--out",
        s(out),
        "--variant",
        "linear-1x1",
        "--epochs",
        "4",
        "--warmup",
        "2",
        "--lr",
        "1e-2",
        "--batch-size",
        "8",
    ]);
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &["--seed", "3"]);
    let mut summaries = Vec::new();
    let mut weights = Vec::new();
    for run in ["a", "b"] {
        let ck = tmp.path().join(format!("ck_{run}"));
        train(&manifest, &ck);
        for f in [
            "checkpoint.json",
            "raw.json",
            "ema.json",
            "trace.csv",
            "epochs.csv",
        ] {
            assert!(ck.join(f).exists(), "{f}");
        }
        weights.push(fs::read(ck.join("raw.json")).unwrap());
        let res = tmp.path().join(format!("res_{run}"));
        let out = ok(&[
            "eval",
            "--manifest",
            &manifest,
            "--out",
            s(&res),
            "--checkpoint",
            s(&ck),
            "--episodes",
            "5",
        ]);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("mAP50-95"), "{stderr}");
        summaries.push(fs::read_to_string(res.join("results.csv")).unwrap());
        assert!(res.join("summary.json").exists());
        assert!(res.join("summary.txt").exists());
    }
    assert_eq!(weights[0], weights[1]);
    assert_eq!(summaries[0], summaries[1]);
    assert_eq!(summaries[0].lines().count(), 6);
}

#[test]
fn feature_mismatch_exits_with_shape_code() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &[]);
    let other = synth(&tmp.path().join("other"), &["--num-coarse", "4"]);
    let ck = tmp.path().join("ck");
    train(&manifest, &ck);
    let out = auxft(&[
        "eval",
        "--manifest",
        &other,
        "--out",
        s(&tmp.path().join("res")),
        "--checkpoint",
        s(&ck),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("level 1"), "{stderr}");
}

#[test]
fn invalid_input_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &[]);
    let res = tmp.path().join("res");
    let no_ck = auxft(&["eval", "--manifest", &manifest, "--out", s(&res)]);
    assert_eq!(no_ck.status.code(), Some(2));
    let bad_distance = auxft(&[
        "eval",
        "--manifest",
        &manifest,
        "--out",
        s(&res),
        "--features",
        "oracle",
        "--distances",
        "cos,l7",
    ]);
    assert_eq!(bad_distance.status.code(), Some(2));
    let bad_synth = auxft(&[
        "synth",
        "--out",
        s(&tmp.path().join("x")),
        "--fine-per-coarse",
        "0",
    ]);
    assert_eq!(bad_synth.status.code(), Some(2));
    assert_eq!(auxft(&["train"]).status.code(), Some(2));
    let broken = tmp.path().join("broken.json");
    fs::write(&broken, r#"{"images": [], "taxonomy": {}, "extra": 1}"#).unwrap();
    let schema = auxft(&[
        "eval",
        "--manifest",
        s(&broken),
        "--out",
        s(&res),
        "--features",
        "oracle",
    ]);
    assert_eq!(schema.status.code(), Some(2));
}

#[test]
fn baseline_sources_need_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &[]);
    for source in [["--features", "raw"], ["--features", "oracle"]] {
        let res = tmp.path().join(source[1]);
        let mut args = vec![
            "eval",
            "--manifest",
            &manifest,
            "--out",
            s(&res),
            "--episodes",
            "3",
        ];
        args.extend_from_slice(&source);
        ok(&args);
        assert!(res.join("results.csv").exists());
    }
    let five = ok(&[
        "eval",
        "--manifest",
        &manifest,
        "--out",
        s(&tmp.path().join("five")),
        "--features",
        "raw",
        "--shots",
        "5",
        "--episodes",
        "1",
    ]);
    assert!(String::from_utf8_lossy(&five.stderr).contains("warning"));
}

#[test]
fn viz_writes_images() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &[]);
    let ck = tmp.path().join("ck");
    train(&manifest, &ck);
    let out = tmp.path().join("viz");
    ok(&[
        "viz",
        "--manifest",
        &manifest,
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--iterations",
        "20",
        "--image",
        "img0002",
        "--scale",
        "2",
    ]);
    for f in [
        "r1.png",
        "r2.png",
        "r3.png",
        "oracle.png",
        "similarity.png",
        "colorize_trace.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let missing = auxft(&[
        "viz",
        "--manifest",
        &manifest,
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--image",
        "nope",
    ]);
    assert!(!missing.status.success());
}

#[test]
fn pool_fit_predict_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("data"), &[]);
    let gt = tmp.path().join("gt");
    let det = tmp.path().join("det");
    ok(&[
        "pool",
        "--manifest",
        &manifest,
        "--out",
        s(&gt),
        "--features",
        "oracle",
        "--boxes",
        "gt",
    ]);
    ok(&[
        "pool",
        "--manifest",
        &manifest,
        "--out",
        s(&det),
        "--features",
        "oracle",
    ]);
    let store = tmp.path().join("store");
    ok(&[
        "fsl-fit",
        "--manifest",
        &manifest,
        "--embeddings",
        s(&gt),
        "--out",
        s(&store),
    ]);
    assert!(store.join("store.json").exists());
    let pred = tmp.path().join("pred");
    ok(&[
        "fsl-predict",
        "--store",
        s(&store),
        "--embeddings",
        s(&det),
        "--out",
        s(&pred),
    ]);
    let csv = fs::read_to_string(pred.join("img0000.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.ends_with("fine_class,score"), "{header}");
    // Every support image also appears as a query here, so its own box
    // recovers its fine label.
    let row = csv.lines().nth(1).unwrap();
    assert!(row.contains("coarse0_fine0"), "{row}");

    let unlabeled = auxft(&[
        "fsl-fit",
        "--manifest",
        &manifest,
        "--embeddings",
        s(&det),
        "--out",
        s(&store),
    ]);
    assert_eq!(unlabeled.status.code(), Some(2));
}

#[test]
fn linear_oracle_generator_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(
        &tmp.path().join("lin"),
        &["--kind", "linear-oracle", "--images", "4"],
    );
    let text = fs::read_to_string(&manifest).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["images"].as_array().unwrap().len(), 4);
}
