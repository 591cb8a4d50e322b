use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_normbridge"));
    cmd.env_remove("NB_CONFIG")
        .env_remove("NB_LISTEN")
        .env_remove("RUST_LOG");
    cmd
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn replay_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("study.json");
    let script = fixtures().join("user_study.script");
    for name in ["a", "b"] {
        let out = run(&[
            "replay",
            "--config",
            p(&config),
            "--script",
            p(&script),
            "--out",
            p(&dir.path().join(name)),
            "--json",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["choices"]["low_impact_count"], 25);
        assert_eq!(report["choices"]["high_impact_count"], 117);
        assert_eq!(report["choices"]["remediation_chosen_count"], 56);
    }
    for file in ["transitions.tsv", "turns.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs between runs");
    }
}

#[test]
fn replay_transcript_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "replay",
        "--config",
        p(&fixtures().join("study.json")),
        "--script",
        p(&fixtures().join("user_study.script")),
        "--out",
        p(dir.path()),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "eval",
        "--transcript",
        p(&dir.path().join("transitions.tsv")),
        "--percent",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let ratio = text
        .lines()
        .find(|l| l.starts_with("remediation_ratio"))
        .unwrap();
    assert!(ratio.ends_with("47.86"), "{ratio}");
}

#[test]
fn empty_script_gives_empty_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.script");
    std::fs::write(&script, "# nothing yet\n").unwrap();
    let out = run(&[
        "replay",
        "--config",
        p(&fixtures().join("study.json")),
        "--script",
        p(&script),
        "--out",
        p(dir.path()),
    ]);
    assert!(out.status.success());
    let log = std::fs::read_to_string(dir.path().join("transitions.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only: {log:?}");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("turns.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn replay_mismatch_names_the_turn() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.script");
    std::fs::write(
        &script,
        "SME\tHello, nice to meet you.\tchoice=remediation\n",
    )
    .unwrap();
    let out = run(&[
        "replay",
        "--config",
        p(&fixtures().join("study.json")),
        "--script",
        p(&script),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("turn 1"), "{err}");
}

#[test]
fn config_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("one.script");
    std::fs::write(&script, "SME\tThank you for coming.\n").unwrap();
    let out = bin()
        .env("NB_CONFIG", fixtures().join("study.json"))
        .args(["replay", "--script", p(&script)])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"categories": ["too", "few"]}"#).unwrap();
    let script = fixtures().join("user_study.script");
    for args in [
        vec!["replay", "--script", p(&script)],
        vec!["replay", "--config", p(&bad), "--script", p(&script)],
        vec![
            "replay",
            "--config",
            "/does/not/exist.json",
            "--script",
            p(&script),
        ],
        vec!["eval", "--predictions", "/does/not/exist.tsv"],
        vec!["eval"],
        vec!["no-such-command"],
    ] {
        let out = run(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn eval_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = dir.path().join("perfect.tsv");
    std::fs::write(
        &perfect,
        "1\tgreeting\tgreeting\n2\trequest\trequest\n3\tother\tother\n",
    )
    .unwrap();
    let out = run(&["eval", "--predictions", p(&perfect), "--json"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["classification"]["f1_micro"], 1.0);

    let half = dir.path().join("half.tsv");
    std::fs::write(&half, "1\ta\ta\n2\ta\tb\n").unwrap();
    let table = stdout(&run(&["eval", "--predictions", p(&half), "--percent"]));
    assert!(
        table
            .lines()
            .any(|l| l.starts_with("f1_micro") && l.ends_with("50.00")),
        "{table}"
    );
    let table = stdout(&run(&["eval", "--predictions", p(&half)]));
    assert!(
        table
            .lines()
            .any(|l| l.starts_with("f1_micro") && l.ends_with("0.5000")),
        "{table}"
    );

    let malformed = dir.path().join("malformed.tsv");
    std::fs::write(&malformed, "1\ta\ta\n2\tonly-two-fields\n").unwrap();
    let out = run(&["eval", "--predictions", p(&malformed)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn eval_generations_and_ratings() {
    let dir = tempfile::tempdir().unwrap();
    let gens = dir.path().join("gen.tsv");
    std::fs::write(&gens, "1\ta c\ta b c\n").unwrap();
    let out = run(&[
        "eval",
        "--generations",
        p(&gens),
        "--bleu-order",
        "1",
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["rouge_l_f1"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    // unigram precision 1, BP = exp(1 - 3/2)
    assert!((report["bleu"].as_f64().unwrap() - (-0.5f64).exp()).abs() < 1e-12);

    let ratings = dir.path().join("ratings.tsv");
    std::fs::write(&ratings, "1\t1\t1\n2\t1\t2\n3\t2\t1\n4\t2\t2\n").unwrap();
    let out = run(&["eval", "--ratings", p(&ratings), "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["kappa"], 0.0);
}

#[test]
fn train_stacker_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = (dir.path().join("f.txt"), dir.path().join("l.txt"));
    let out = run(&[
        "synth",
        "--seed",
        "4",
        "--features",
        p(&f),
        "--labels",
        p(&l),
    ]);
    assert!(out.status.success());
    let mut models = Vec::new();
    for name in ["m1", "m2"] {
        let m = dir.path().join(name);
        let out = run(&[
            "train-stacker",
            "--features",
            p(&f),
            "--labels",
            p(&l),
            "--out",
            p(&m),
            "--holdout",
            "300",
            "--seed",
            "4",
            "--json",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let stacked = summary["f1_stacked"].as_f64().unwrap();
        assert!(stacked > summary["f1_discrete"].as_f64().unwrap());
        assert!(stacked > summary["f1_probabilistic"].as_f64().unwrap());
        assert_eq!(summary["degenerate"], false);
        models.push(std::fs::read(&m).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn train_stacker_flags_single_class_data() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l, m) = (
        dir.path().join("f"),
        dir.path().join("l"),
        dir.path().join("m"),
    );
    std::fs::write(&f, "1 0 0.9 0.1\n1 0 0.8 0.2\n0 1 0.4 0.6\n").unwrap();
    std::fs::write(&l, "0\n0\n0\n").unwrap();
    let out = run(&[
        "train-stacker",
        "--features",
        p(&f),
        "--labels",
        p(&l),
        "--out",
        p(&m),
        "--json",
    ]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["degenerate"], true);

    std::fs::write(&l, "0\n0\n").unwrap();
    let out = run(&[
        "train-stacker",
        "--features",
        p(&f),
        "--labels",
        p(&l),
        "--out",
        p(&m),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

/// Starts `serve` and waits for its ready line; returns the child and bound address.
fn start_server(config: &Path) -> (std::process::Child, String) {
    let mut child = bin()
        .args(["serve", "--config", p(config)])
        .env("NB_LISTEN", "127.0.0.1:0")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let started = Instant::now();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited before ready").unwrap();
        if let Some(rest) = line.split("addr=").nth(1) {
            break rest.split_whitespace().next().unwrap().to_string();
        }
    };
    assert!(
        started.elapsed() < Duration::from_secs(1),
        "ready took {:?}",
        started.elapsed()
    );
    std::thread::spawn(move || for _ in lines {});
    (child, addr)
}

#[cfg(unix)]
#[test]
fn serve_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(fixtures().join("study.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&base).unwrap();
    config["transcript_dir"] = dir.path().join("tx").to_str().unwrap().into();
    for spec in config["backends"].as_object_mut().unwrap().values_mut() {
        for key in ["lexicon", "path"] {
            if let Some(rel) = spec["primary"][key].as_str() {
                spec["primary"][key] = fixtures().join(rel).to_str().unwrap().into();
            }
        }
    }
    let config_path = dir.path().join("serve.json");
    std::fs::write(&config_path, config.to_string()).unwrap();

    let (mut child, addr) = start_server(&config_path);

    let busy = run(&["serve", "--config", p(&config_path), "--listen", &addr]);
    assert_eq!(busy.status.code(), Some(2));

    let status = Command::new("kill")
        .args(["-TERM", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let code = child.wait().unwrap();
    assert_eq!(code.code(), Some(0));
    let log = std::fs::read_to_string(dir.path().join("tx/transitions.tsv")).unwrap();
    assert!(log.starts_with("session_id\tturn_id"));
}
