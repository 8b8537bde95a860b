use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const GOLDEN_TRACE_SHA256: &str = "a212695d8649b151fcd78444160700e956bbe84f3c35a31527c942acc5e1955f";

const SECTIONS: [&str; 8] = [
    "## Detection",
    "## Density",
    "## Cutoff",
    "## Gradient geometry",
    "## Persistence",
    "## Knockout census",
    "## Predictors",
    "## Reweighting",
];

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn rocktoken(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rocktoken"))
        .args(args)
        .env_remove("ROCKTOKEN_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tree_digests(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), sha256(&p));
            }
        }
    }
    out
}

fn golden_detect(run: &Path) -> Output {
    let trace = data("golden_trace.jsonl");
    let vocab = data("golden_vocab.json");
    rocktoken(&[
        "detect",
        "--run-dir",
        run.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
    ])
}

#[test]
fn detect_on_golden_trace_writes_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = golden_detect(&run);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("detect/report.json")).unwrap()).unwrap();
    assert_eq!(report["rock_set"], serde_json::json!([18, 22, 26]));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("detect/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "detect");
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs[0]["sha256"], GOLDEN_TRACE_SHA256);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for f in outputs {
        let p = run.join(f["path"].as_str().unwrap());
        assert_eq!(f["sha256"].as_str().unwrap(), sha256(&p), "{}", p.display());
    }
    assert!(manifest["resolved_config"]["detect"]["w"].as_u64() == Some(5));
}

#[test]
fn missing_config_exits_two_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let o = rocktoken(&["detect", "--config", missing.to_str().unwrap(), "--run-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn missing_config_from_environment_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("env.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_rocktoken"))
        .args(["report", "--run-dir", tmp.path().to_str().unwrap()])
        .env("ROCKTOKEN_CONFIG", &missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env.toml"));
}

#[test]
fn conflicting_override_exits_one_naming_key() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    let o = rocktoken(&["report", "--run-dir", run, "--set", "detect.w=3", "--set", "detect.w=4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("detect.w"), "{}", stderr(&o));
}

#[test]
fn unknown_override_key_exits_one_naming_key() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    let o = rocktoken(&["report", "--run-dir", run, "--set", "knockout.epsilonn=0.02"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("knockout.epsilonn"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let trace = data("golden_trace.jsonl");
    let vocab = data("golden_vocab.json");
    let o = rocktoken(&[
        "detect",
        "--run-dir",
        run.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--set",
        "detect.gamma=1.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!run.join("detect/manifest.json").exists());
}

#[test]
fn usage_errors_exit_sixty_four() {
    assert_eq!(rocktoken(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(rocktoken(&[]).status.code(), Some(64));
    assert_eq!(rocktoken(&["mask", "--regime", "sometimes"]).status.code(), Some(64));
    assert_eq!(rocktoken(&["--help"]).status.code(), Some(0));
    assert_eq!(rocktoken(&["--version"]).status.code(), Some(0));
}

#[test]
fn report_needs_detect_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rocktoken(&["report", "--run-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("detect"), "{}", stderr(&o));
}

#[test]
fn detect_only_report_marks_other_sections_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(golden_detect(&run).status.success());
    let o = rocktoken(&["report", "--run-dir", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(run.join("report/report.md")).unwrap();
    for s in SECTIONS {
        assert!(md.contains(s), "missing {s}");
    }
    assert!(md.contains("`frac`"));
    for stage in ["sweep", "gradgeom", "knockout", "mask"] {
        assert!(md.contains(&format!("no `{stage}` stage output")), "{stage} not marked absent");
    }
    assert!(run.join("report/fig2_density.csv").is_file());

    let first = std::fs::read(run.join("report/report.md")).unwrap();
    assert!(rocktoken(&["report", "--run-dir", run.to_str().unwrap()]).status.success());
    assert_eq!(first, std::fs::read(run.join("report/report.md")).unwrap());
}

const GOLDEN_CONFIG: &str = "\
seed = 5

[simulate]
prompts = 5
rollouts_per_prompt = 2

[knockout]
prompts = 60
resamples = 1000
null_candidates = 12

[train]
optimizer_probe = true
";

fn full_pipeline(config: &Path, run: &Path, threads: &str) {
    for stage in ["simulate", "detect", "sweep", "gradgeom", "knockout", "mask", "train", "report"] {
        let o = rocktoken(&[
            stage,
            "--config",
            config.to_str().unwrap(),
            "--run-dir",
            run.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(run.join(stage).join("manifest.json").is_file());
    }
}

#[test]
fn golden_pipeline_is_reproducible_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("golden.toml");
    std::fs::write(&config, GOLDEN_CONFIG).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    full_pipeline(&config, &a, "1");
    full_pipeline(&config, &b, "4");

    assert_eq!(sha256(&a.join("simulate/trace.jsonl")), GOLDEN_TRACE_SHA256);
    let da = tree_digests(&a);
    let db = tree_digests(&b);
    assert_eq!(da, db);
    assert!(da.len() > 30, "{} files", da.len());

    let md = std::fs::read_to_string(a.join("report/report.md")).unwrap();
    for s in SECTIONS {
        assert!(md.contains(s), "missing {s}");
    }
    assert!(!md.contains("_Absent"), "{md}");
    for f in [
        "fig2_density.csv",
        "cutoff.csv",
        "fig3_gradients.csv",
        "fig3_persistence.csv",
        "fig4_knockout.csv",
        "fig5_predictors.csv",
    ] {
        assert!(a.join("report").join(f).is_file(), "{f}");
    }

    // Manifests echo the config file verbatim.
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("knockout/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_text"], GOLDEN_CONFIG);
    assert_eq!(m["resolved_config"]["knockout"]["prompts"], 60);
}

#[test]
fn stages_do_not_mutate_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let before = (sha256(&data("golden_trace.jsonl")), sha256(&data("golden_vocab.json")));
    assert!(golden_detect(&run).status.success());
    let trace = data("golden_trace.jsonl");
    let vocab = data("golden_vocab.json");
    for args in [
        vec!["mask", "--regime", "baseline"],
        vec!["mask", "--regime", "rock_freeze", "--lambda", "0.5"],
    ] {
        let mut full = args.clone();
        full.extend(["--run-dir", run.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
        full.extend(["--vocab", vocab.to_str().unwrap()]);
        let o = rocktoken(&full);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("mask/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["lambda"], 0.5);
    assert_eq!(before, (sha256(&data("golden_trace.jsonl")), sha256(&data("golden_vocab.json"))));
}
