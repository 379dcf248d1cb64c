use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ion-readout");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn ion-readout")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, preset: &str, frames: usize) -> PathBuf {
    let out = dir.join(preset);
    let n = frames.to_string();
    ok(&["synth", "--preset", preset, "--frames", &n, "--seed", "7", "--out", s(&out)]);
    out
}

#[test]
fn synth_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "h1", 100);
    let pgms = fs::read_dir(&d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 100);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 100);
    assert!(d.join("layout_truth.json").exists());
}

#[test]
fn eval_reports_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "h1", 200);
    let rep = dir.path().join("rep");
    ok(&["eval", "--dataset", s(&d), "--methods", "stats,svm,quant", "--seed", "7", "--out", s(&rep)]);
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    assert!(lines[0].starts_with("method,fidelity,f1,accuracy,tp,fp,tn,fn"), "{}", lines[0]);
    for (line, name) in lines[1..].iter().zip(["stats", "svm", "quant"]) {
        assert!(line.starts_with(name), "{line}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(rep.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["methods"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_method_is_named_in_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "h1", 20);
    let out = run(&["eval", "--dataset", s(&d), "--methods", "stats,foo", "--seed", "1"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("foo"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn failures_are_single_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = run(&["eval", "--dataset", s(&missing), "--seed", "1"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("nowhere"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let out = run(&["eval", "--dataset", "x", "--seed", "1", "--bogus"]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("--bogus"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let out = run(&["synth", "--preset", "h1", "--frames", "5", "--out", s(&missing)]);
    assert!(!out.status.success(), "seed is mandatory");
    assert!(stderr_of(&out).contains("--seed"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\npsf_sigma = -1.0\n").unwrap();
    let out = run(&["synth", "--frames", "5", "--seed", "1", "--out", s(&missing), "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("psf_sigma"), "{}", stderr_of(&out));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[synth]\nn_ions = 4\n\n[eval]\nthreshold = 150.0\n").unwrap();
    let d = dir.path().join("d");
    ok(&["synth", "--preset", "allbright", "--frames", "30", "--seed", "3", "--out", s(&d), "--config", s(&cfg)]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_ions"], 4);
    let table = ok(&["eval", "--dataset", s(&d), "--methods", "stats", "--seed", "3", "--config", s(&cfg)]);
    assert!(table.contains("stats"), "{table}");
}

#[test]
fn pipeline_locate_features_train_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "h1", 120);
    let layout = dir.path().join("layout.json");
    ok(&["locate", "--dataset", s(&d), "--seed", "7", "--out", s(&layout)]);

    let table = dir.path().join("features.csv");
    ok(&["features", "--dataset", s(&d), "--layout", s(&layout), "--out", s(&table)]);
    let csv = fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 1 + 120 * 10);

    let truth: Vec<String> = {
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
        manifest["entries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["label"].as_str().unwrap().to_string())
            .collect()
    };
    let check = |csv: &str| {
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), truth.len());
        for (row, want) in rows.iter().zip(&truth) {
            assert_eq!(row.rsplit(',').next().unwrap(), want, "{row}");
        }
    };

    for method in ["stats", "quant"] {
        check(&ok(&["classify", "--dataset", s(&d), "--layout", s(&layout), "--method", method, "--seed", "1"]));
    }
    for method in ["svm", "conv", "qsvm"] {
        let model = dir.path().join(format!("{method}.json"));
        let mut args = vec!["train", "--dataset", s(&d), "--method", method, "--seed", "5", "--out", s(&model)];
        if method == "qsvm" {
            args.extend(["--max-samples", "200"]);
        }
        ok(&args);
        let out = dir.path().join(format!("{method}.csv"));
        ok(&[
            "classify", "--dataset", s(&d), "--method", "model", "--model", s(&model), "--seed", "1", "--out",
            s(&out),
        ]);
        check(&fs::read_to_string(&out).unwrap());
    }
}

#[test]
fn qubo_solve_prints_assignment_and_value() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("q.txt");
    // maximize 2 x0 − 3 x1 + x0 x2 + x2 ... optimum x = 101 with value 2 + 1 + 0.5 = 3.5
    fs::write(&file, "3 0 max\n0 0 2\n1 1 -3\n2 2 0.5\n2 0 1\n").unwrap();
    for method in ["exhaustive", "anneal", "meanfield"] {
        let out = ok(&["qubo", "solve", "--input", s(&file), "--method", method, "--seed", "4"]);
        assert_eq!(out.trim(), "101 3.5", "{method}");
    }
    let out = run(&["qubo", "solve", "--input", s(&file), "--method", "magic", "--seed", "4"]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("magic"));
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "h1", 150);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--threads", "1", "eval", "--dataset", s(&d), "--seed", "2", "--out", s(&a)]);
    ok(&["eval", "--dataset", s(&d), "--seed", "2", "--out", s(&b), "--threads", "3"]);
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}

const SUBCOMMANDS: [&[&str]; 9] = [
    &[],
    &["synth"],
    &["locate"],
    &["features"],
    &["train"],
    &["classify"],
    &["eval"],
    &["qubo"],
    &["qubo", "solve"],
];

/// Help text is compared with `tests/golden/*.txt`; set `UPDATE_GOLDEN=1` to rewrite them.
#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in SUBCOMMANDS {
        let mut args: Vec<&str> = sub.to_vec();
        args.push("--help");
        let text = ok(&args);
        let name = if sub.is_empty() { "help".to_string() } else { format!("help_{}", sub.join("_")) };
        let path = golden.join(format!("{name}.txt"));
        if update {
            fs::create_dir_all(&golden).unwrap();
            fs::write(&path, &text).unwrap();
        } else {
            let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(text, want, "{name}");
        }
    }
}
