use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bundle() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/tiny-gpt2")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .args(args)
        .output()
        .expect("spawn steerlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let bd = bundle();
    ok(&["--bundle", s(&bd), "--out", s(&a), "gen-data"]);
    ok(&["--bundle", s(&bd), "--out", s(&b), "gen-data"]);
    ok(&["--bundle", s(&bd), "--out", s(&c), "--seed", "1", "gen-data", "--task", "two-paren"]);

    for name in ["one-paren", "two-paren", "three-paren", "four-paren"] {
        let text = fs::read_to_string(a.join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 650, "{name}");
        assert_eq!(text.matches(r#""split":"train""#).count(), 350);
        assert_eq!(text.matches(r#""split":"dev""#).count(), 150);
        assert_eq!(text.matches(r#""split":"test""#).count(), 150);
        assert_eq!(text, fs::read_to_string(b.join(format!("{name}.jsonl"))).unwrap());
    }
    for name in ["add", "sub", "mul", "div"] {
        let text = fs::read_to_string(a.join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 1450, "{name}");
        assert_eq!(text.matches(r#""split":"train""#).count(), 750);
        assert_eq!(text.matches(r#""split":"test""#).count(), 350);
    }
    let other = fs::read_to_string(c.join("two-paren.jsonl")).unwrap();
    assert_ne!(other, fs::read_to_string(a.join("two-paren.jsonl")).unwrap());
    assert!(!c.join("one-paren.jsonl").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bd = bundle();
    // usage
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--out", s(&out), "trace", "--prompt", "x"])), 2);
    assert_eq!(code(&run(&["--bundle", s(&bd), "--out", s(&out), "gen-data", "--task", "five-paren"])), 2);
    assert_eq!(
        code(&run(&["--bundle", s(&bd), "--out", s(&out), "steer", "--alpha", "-1"])),
        2
    );
    assert_eq!(code(&run(&["--out", s(&out), "report", "--run", s(dir.path())])), 2);
    // I/O
    let missing = dir.path().join("missing");
    assert_eq!(code(&run(&["--bundle", s(&missing), "--out", s(&out), "trace", "--prompt", "x"])), 4);

    // validation: a bundle whose tensors no longer match its manifest
    let bad = dir.path().join("bad");
    fs::create_dir(&bad).unwrap();
    for f in fs::read_dir(&bd).unwrap() {
        let f = f.unwrap();
        fs::copy(f.path(), bad.join(f.file_name())).unwrap();
    }
    let manifest = fs::read_to_string(bad.join("manifest.json")).unwrap();
    let needle = "\"sha256\": \"";
    let at = manifest.find(needle).unwrap() + needle.len();
    let mut tampered = manifest.clone();
    tampered.replace_range(at..at + 4, "0000");
    assert_ne!(tampered, manifest);
    fs::write(bad.join("manifest.json"), tampered).unwrap();
    assert_eq!(code(&run(&["--bundle", s(&bad), "--out", s(&out), "trace", "--prompt", "x"])), 3);

    // validation: prompt longer than the context window
    let long = "a ".repeat(200);
    assert_eq!(code(&run(&["--bundle", s(&bd), "--out", s(&out), "trace", "--prompt", &long])), 3);
}

#[test]
fn attribute_rank_steer_report() {
    let dir = tempfile::tempdir().unwrap();
    let bd = bundle();
    let attr = dir.path().join("attr");
    let data = dir.path().join("data");
    ok(&["--bundle", s(&bd), "--out", s(&data), "gen-data", "--task", "paren"]);
    ok(&[
        "--bundle", s(&bd), "--out", s(&attr), "--threads", "1", "attribute", "--data", s(&data), "--inspect", "2",
    ]);
    for f in [
        "reports.json",
        "components.csv",
        "accuracy_histogram.csv",
        "promotion_scatter.csv",
        "neuron_extremes.csv",
        "model_accuracy.json",
        "run.json",
    ] {
        assert!(attr.join(f).exists(), "{f}");
    }
    let components = fs::read_to_string(attr.join("components.csv")).unwrap();
    // header plus the 8 heads, plus any neurons that survived the prefilter
    assert!(components.lines().count() > 8);

    let reports = attr.join("reports.json");
    ok(&["--out", s(&attr), "rank", "--reports", s(&reports)]);
    let heads: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(attr.join("ranking_heads.json")).unwrap()).unwrap();
    assert_eq!(heads["entries"].as_array().unwrap().len(), 8);
    assert!(attr.join("ranking_neurons.json").exists());
    assert!(attr.join("f1_distribution.json").exists());

    let steer = dir.path().join("steer");
    let args = [
        "--bundle", s(&bd), "--out", s(&steer), "steer", "--ranking", s(&attr), "--data", s(&data), "--k", "2",
        "--alpha", "1.5",
    ];
    let first = ok(&args);
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(steer.join("plan.json")).unwrap()).unwrap();
    let plan = plan.as_object().unwrap();
    assert_eq!(plan.len(), 2);
    assert!(plan.values().all(|v| v.as_f64() == Some(1.5)));
    let acc = fs::read_to_string(steer.join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 5);
    let run1 = fs::read_to_string(steer.join("run.json")).unwrap();
    // same inputs, same outputs and run id
    assert_eq!(ok(&args), first);
    let run2 = fs::read_to_string(steer.join("run.json")).unwrap();
    let id = |t: &str| serde_json::from_str::<serde_json::Value>(t).unwrap()["run_id"].clone();
    assert_eq!(id(&run1), id(&run2));
    assert_eq!(acc, fs::read_to_string(steer.join("accuracy.csv")).unwrap());

    let overlap_args = [
        "--out", s(&steer), "overlap", "--a", &format!("{}/ranking_heads.json", s(&attr)), "--b",
        &format!("{}/ranking_heads.json", s(&attr)), "--ks", "1,3",
    ];
    ok(&overlap_args);
    let text = ok(&["--out", s(&steer), "report"]);
    assert!(text.contains("four-paren"));
    assert!(text.contains("1.00"));
    assert!(steer.join("report.json").exists());
    assert_eq!(fs::read_to_string(steer.join("report.txt")).unwrap(), text);
}

#[test]
fn sweep_and_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let bd = bundle();
    let out = dir.path().join("arith");
    ok(&["--bundle", s(&bd), "--out", s(&out), "attribute", "--tasks", "arith"]);
    let reports = out.join("reports.json");
    ok(&["--out", s(&out), "rank", "--tasks", "arith", "--reports", s(&reports)]);
    let heads: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ranking_heads.json")).unwrap()).unwrap();
    assert_eq!(heads["criterion"], serde_json::json!({"kind": "recall_only"}));
    ok(&[
        "--bundle", s(&bd), "--out", s(&out), "sweep", "--tasks", "arith", "--ranking", s(&out), "--ks", "0,2",
        "--alpha", "2.0",
    ]);
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let points = sweep.as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["per_task"].as_array().unwrap().len(), 4);
}

#[test]
fn trace_and_patch() {
    let dir = tempfile::tempdir().unwrap();
    let bd = bundle();
    let out = dir.path().join("t");
    ok(&["--bundle", s(&bd), "--out", s(&out), "trace", "--prompt", "#define x ((", "--top", "4"]);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    let n = t["tokens"].as_array().unwrap().len();
    assert_eq!(t["attention"].as_array().unwrap().len(), 2);
    assert_eq!(t["attention"][1].as_array().unwrap().len(), 4);
    assert_eq!(t["attention"][1][3].as_array().unwrap().len(), n);
    assert_eq!(t["top_logits"].as_array().unwrap().len(), 4);

    // the fixture model answers no bracket prompt, so there is nothing to patch
    let o = run(&["--bundle", s(&bd), "--out", s(&out), "patch", "--task", "one-paren", "--max-pairs", "2"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to patch"));
    let o = run(&["--bundle", s(&bd), "--out", s(&out), "patch", "--task", "add"]);
    assert_eq!(code(&o), 2);
}
