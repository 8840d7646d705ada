use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const LIGHT: &str = r#"{"restarts": 2, "n_train": 300, "threshold_trials": 5, "threshold_samples": 100, "copies_test": 10, "band_samples": 50}"#;

fn popform(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popform"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

fn labels(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in data_lines(text) {
        let label = l.rsplit(',').next().unwrap().to_string();
        if out.last() != Some(&label) {
            out.push(label);
        }
    }
    out
}

/// Writes the first record of a dataset CSV to its own file.
fn first_record(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let lines = data_lines(&text);
    let label = lines[0].rsplit(',').next().unwrap();
    let mut out = String::from("frequency_hz,real,imag,label\n");
    for l in lines.iter().take_while(|l| l.rsplit(',').next() == Some(label)) {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(dst, out).unwrap();
}

struct Trained {
    dir: TempDir,
}

// synth, fit and threshold once with a light configuration
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        fs::write(d.join("light.json"), LIGHT).unwrap();
        let cfg = path(d, "light.json");
        assert_eq!(code(&popform(d, &["--config", &cfg, "synth"])), 0);
        let o = popform(d, &["--config", &cfg, "fit", "--data", &path(d, "clean.csv")]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = popform(
            d,
            &["--config", &cfg, "threshold", "--form", &path(d, "form.json"), "--data", &path(d, "clean.csv")],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Trained { dir }
    })
}

#[test]
fn synth_writes_the_default_population() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&popform(d, &["synth"])), 0);
    let clean = fs::read_to_string(d.join("clean.csv")).unwrap();
    let noisy = fs::read_to_string(d.join("noisy.csv")).unwrap();
    assert!(clean.starts_with("# config_hash="));
    assert_eq!(labels(&clean).len(), 4);
    assert_eq!(data_lines(&clean).len(), 4 * 81);
    assert_eq!(data_lines(&noisy).len(), 80 * 81);
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("synth_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(code(&popform(d, &["--seed", "11", "synth"])), 0);
    }
    for f in ["clean.csv", "noisy.csv", "specs.json", "synth_manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = TempDir::new().unwrap();
    assert_eq!(code(&popform(c.path(), &["--seed", "12", "synth"])), 0);
    assert_ne!(fs::read(a.path().join("noisy.csv")).unwrap(), fs::read(c.path().join("noisy.csv")).unwrap());
}

#[test]
fn empty_specs_are_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("specs.json"), "[]").unwrap();
    assert_eq!(code(&popform(d, &["synth", "--specs", &path(d, "specs.json")])), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&popform(dir.path(), &["fit"])), 2);
    assert_eq!(code(&popform(dir.path(), &["--band", "48", "synth"])), 2);
    assert_eq!(code(&popform(dir.path(), &["--confidence", "1.5", "synth"])), 2);
}

#[test]
fn truncated_csv_is_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&popform(d, &["synth"])), 0);
    let text = fs::read_to_string(d.join("clean.csv")).unwrap();
    let cut = &text[..text.len() - 30];
    let cut = &cut[..cut.rfind(',').unwrap()];
    fs::write(d.join("cut.csv"), cut).unwrap();
    let o = popform(d, &["--restarts", "1", "fit", "--data", &path(d, "cut.csv")]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_files_exit_2() {
    let t = trained();
    let d = t.dir.path();
    let o = popform(
        d,
        &[
            "score",
            "--form",
            &path(d, "form.json"),
            "--threshold",
            &path(d, "nope.json"),
            "--record",
            &path(d, "clean.csv"),
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn oversized_training_request_exits_2() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&popform(d, &["synth"])), 0);
    let o = popform(d, &["--n-train", "100000", "--restarts", "1", "fit", "--data", &path(d, "clean.csv")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn single_member_single_component_fit() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = r#"[{"id": "solo", "modes": [{"fn_hz": 51.0, "zeta": 0.02, "residue": 0.05}]}]"#;
    fs::write(d.join("specs.json"), spec).unwrap();
    let cfg = ["--k", "1", "--restarts", "2", "--n-train", "200"];
    let mut args: Vec<&str> = cfg.to_vec();
    let specs = path(d, "specs.json");
    args.extend(["synth", "--specs", &specs]);
    assert_eq!(code(&popform(d, &args)), 0);
    let mut args: Vec<&str> = cfg.to_vec();
    let data = path(d, "clean.csv");
    args.extend(["fit", "--data", &data]);
    let o = popform(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let form: Value = serde_json::from_slice(&fs::read(d.join("form.json")).unwrap()).unwrap();
    assert_eq!(form["label_accuracy"], 1.0);
    let fn_hz = form["form"]["real"]["components"][0]["mean"]["natural_frequency_hz"].as_f64().unwrap();
    assert!((fn_hz - 51.0).abs() < 0.2, "{fn_hz}");
}

#[test]
fn threshold_multiplier_follows_confidence() {
    let t = trained();
    let d = t.dir.path();
    let th: Value = serde_json::from_slice(&fs::read(d.join("threshold.json")).unwrap()).unwrap();
    assert_eq!(th["threshold"]["multiplier"], 2.58);
    let out = TempDir::new().unwrap();
    fs::copy(d.join("light.json"), out.path().join("light.json")).unwrap();
    let o = popform(
        out.path(),
        &[
            "--config",
            &path(out.path(), "light.json"),
            "--confidence",
            "0.5",
            "threshold",
            "--form",
            &path(d, "form.json"),
            "--data",
            &path(d, "clean.csv"),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let th: Value = serde_json::from_slice(&fs::read(out.path().join("threshold.json")).unwrap()).unwrap();
    assert_eq!(th["threshold"]["multiplier"], 0.67);
}

#[test]
fn score_separates_clean_from_damaged() {
    let t = trained();
    let d = t.dir.path();
    first_record(&d.join("clean.csv"), &d.join("healthy.csv"));
    let score = |record: &str| {
        popform(
            d,
            &[
                "score",
                "--form",
                &path(d, "form.json"),
                "--threshold",
                &path(d, "threshold.json"),
                "--record",
                record,
            ],
        )
    };
    let o = score(&path(d, "healthy.csv"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let verdict: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(verdict["outlying"], false);

    // the first member with every natural frequency lowered by 3.5%
    let specs: Value = serde_json::from_slice(&fs::read(d.join("specs.json")).unwrap()).unwrap();
    let mut member = specs[0].clone();
    for mode in member["modes"].as_array_mut().unwrap() {
        let f = mode["fn_hz"].as_f64().unwrap();
        mode["fn_hz"] = Value::from(f * 0.965);
    }
    let damaged = TempDir::new().unwrap();
    let dd = damaged.path();
    fs::write(dd.join("specs.json"), serde_json::to_vec(&Value::Array(vec![member])).unwrap()).unwrap();
    assert_eq!(code(&popform(dd, &["synth", "--specs", &path(dd, "specs.json")])), 0);
    first_record(&dd.join("clean.csv"), &dd.join("damaged.csv"));
    let o = score(&path(dd, "damaged.csv"));
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let verdict: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(verdict["outlying"], true);

    // a whole dataset is not a single record
    assert_eq!(code(&score(&path(d, "clean.csv"))), 2);
}

#[test]
fn sweep_writes_plots_and_tables() {
    let t = trained();
    let d = t.dir.path();
    let out = TempDir::new().unwrap();
    let o = popform(
        out.path(),
        &[
            "--config",
            &path(d, "light.json"),
            "--sweep",
            "0,-2",
            "sweep",
            "--form",
            &path(d, "form.json"),
            "--threshold",
            &path(d, "threshold.json"),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svgs = fs::read_dir(out.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 5);
    let sweep = fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    assert_eq!(data_lines(&sweep).len(), 4 * 2 * 10);
    let band = fs::read_to_string(out.path().join("band.svg")).unwrap();
    assert!(band.contains("<!-- config_hash="));
}
