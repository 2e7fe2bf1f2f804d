use std::path::{Path, PathBuf};
use std::process::Command;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/planted.toml")
}

fn crs(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_crs"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("EMBED_ENDPOINT")
        .arg("--config")
        .arg(config())
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "crs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn staged_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    crs(d, &["--seed", "4", "synth", "--out", "corpus", "--users", "48"]);
    crs(
        d,
        &[
            "ingest",
            "--items",
            "corpus/items.jsonl",
            "--interactions",
            "corpus/interactions.tsv",
            "--schema",
            "corpus/schema.json",
            "--out",
            "data.snap",
        ],
    );
    let fast = ["--seed", "2"];
    let run = |tag: &str| -> (String, String) {
        let enc = format!("enc{tag}.lcrs");
        let ints = format!("int{tag}.lcrs");
        let model = format!("model{tag}.lcrs");
        crs(d, &[&fast[..], &["pretrain-encoder", "--dataset", "data.snap", "--out", &enc]].concat());
        crs(d, &[&fast[..], &["fit-intents", "--dataset", "data.snap", "--encoder", &enc, "--out", &ints]].concat());
        crs(
            d,
            &[
                &fast[..],
                &["train-em", "--dataset", "data.snap", "--encoder", &enc, "--intents", &ints, "--out", &model, "--history", "h.jsonl"],
            ]
            .concat(),
        );
        let one = crs(d, &[&fast[..], &["eval-oneturn", "--dataset", "data.snap", "--checkpoint", &model]].concat());
        let multi = crs(
            d,
            &[&fast[..], &["eval-multiturn", "--dataset", "data.snap", "--checkpoint", &model, "--variant", "F"]].concat(),
        );
        (one, multi)
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a.0).unwrap();
    assert_eq!(report["evaluated"], 48);
    assert!(report["metrics"]["recall@5"].as_f64().unwrap() >= 0.0);
    assert!(report.get("runtime_secs").is_none());
    let history = std::fs::read_to_string(d.join("h.jsonl")).unwrap();
    assert!(history.lines().count() > 3);

    let transcript = crs(
        d,
        &[&fast[..], &["simulate", "--dataset", "data.snap", "--checkpoint", "modela.lcrs", "--user", "u07", "--variant", "F"]].concat(),
    );
    let t: serde_json::Value = serde_json::from_str(&transcript).unwrap();
    let used = t["turns_used"].as_u64().unwrap();
    assert!((1..=5).contains(&used));
    assert_eq!(t["transcript"].as_array().unwrap().len() as u64, used);

    crs(
        d,
        &[
            &fast[..],
            &["eval-oneturn", "--dataset", "data.snap", "--checkpoint", "modela.lcrs", "--out", "r.json", "--csv", "r.csv", "--timing"],
        ]
        .concat(),
    );
    let timed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(timed["runtime_secs"].as_f64().is_some());
    assert!(std::fs::read_to_string(d.join("r.csv")).unwrap().starts_with("metric,value\n"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crs"))
        .current_dir(tmp.path())
        .args(["eval-oneturn", "--dataset", "missing.snap", "--checkpoint", "missing.lcrs"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.snap"));
    let out = Command::new(env!("CARGO_BIN_EXE_crs"))
        .args(["eval-multiturn", "--dataset", "x", "--checkpoint", "y", "--variant", "Q"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
