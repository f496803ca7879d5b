use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_visaug");

const WORDS: &[&str] = &[
    "red", "car", "blue", "sky", "green", "tree", "old", "house", "small", "dog", "river", "bright", "sun", "tall",
    "tower", "quiet", "street",
];

/// Deterministic toy corpus: sources of one to three sentences, targets
/// made of the source's words.
fn corpus(n: usize, salt: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|i| {
            let k = i * 7 + salt;
            let sentences = 1 + k % 3;
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            for s in 0..sentences {
                let a = WORDS[(k + s * 3) % WORDS.len()];
                let b = WORDS[(k / 3 + s * 5 + 1) % WORDS.len()];
                let c = WORDS[(k / 11 + s) % WORDS.len()];
                src.push(format!("The {a} {b} near {c} {}.", i % 97));
                tgt.push(format!("{a} {b}"));
            }
            (src.join(" "), tgt.join(" "))
        })
        .collect()
}

fn write_jsonl(path: &Path, rows: &[(String, String)]) {
    let text: String = rows
        .iter()
        .map(|(s, t)| format!("{}\n", serde_json::json!({"source": s, "target": t})))
        .collect();
    std::fs::write(path, text).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(train: usize, test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(&dir.path().join("train.jsonl"), &corpus(train, 0));
        write_jsonl(&dir.path().join("test.jsonl"), &corpus(test, 5));
        // small enough to train in seconds
        let cfg = "model-dim=8\nheads=2\nencoder-layers=1\ndecoder-layers=1\nimage-dim=4\npatch-count=2\n\
                   vocab-size=200\nmax-len=32\nepochs=2\nbatch-size=4\nbeam-size=2\ndecode-max-len=6\n\
                   pretrain-steps=5\npretrain-batch-size=2\n";
        std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let p = |n: &str| self.path(n).display().to_string();
        let mut cmd = Command::new(BIN);
        cmd.args(args)
            .args(["--config", &p("run.cfg")])
            .args(["--train", &p("train.jsonl"), "--test", &p("test.jsonl"), "--cache", &p("cache.livc")]);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn second_prepare_is_all_hits() {
    let f = Fixture::new(40, 5);
    let first = f.ok(&["prepare"]);
    assert!(first.contains(" 0 hits"), "{first}");
    let bytes = std::fs::read(f.path("cache.livc")).unwrap();
    let second = f.ok(&["prepare"]);
    assert!(second.contains(" 0 misses") && second.contains("hit rate 100.0%"), "{second}");
    assert_eq!(std::fs::read(f.path("cache.livc")).unwrap(), bytes);
}

#[test]
fn theta_sweep_extremes() {
    let f = Fixture::new(60, 5);
    f.ok(&["prepare"]);
    let out = f.ok(&["sweep-theta", "--theta-grid", "0,0.27,1"]);
    let fracs: Vec<f64> = out
        .lines()
        .map(|l| l.split("gated=").nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(fracs.len(), 3);
    assert_eq!(fracs[0], 1.0);
    assert!((0.0..=1.0).contains(&fracs[1]));
    assert_eq!(fracs[2], 0.0);
    assert!(fracs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn fewshot_runs_five_groups_of_ten() {
    let f = Fixture::new(1000, 3);
    f.ok(&["prepare"]);
    let run = f.path("fewshot");
    let out = f.ok(&[
        "fewshot",
        "--fractions",
        "0.01",
        "--epochs",
        "1",
        "--metric",
        "loss",
        "--run-dir",
        run.to_str().unwrap(),
    ]);
    let groups: Vec<&str> = out.lines().filter(|l| l.contains(" group=")).collect();
    assert_eq!(groups.len(), 5, "{out}");
    assert!(groups.iter().all(|l| l.contains(" examples=10 ")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("fraction=0.01 mean")));
    assert!(run.join("config.txt").is_file());
}

#[test]
fn plug_out_at_the_command_line() {
    let f = Fixture::new(30, 6);
    f.ok(&["prepare", "--theta", "0"]);
    let run = f.path("ft");
    f.ok(&["finetune", "--theta", "0", "--metric", "loss", "--run-dir", run.to_str().unwrap()]);
    let ckpt = run.join("best.ckpt");
    let gen = |extra: &[&str], out: &str| {
        let out_path = f.path(out);
        let mut args = vec!["generate", "--checkpoint", ckpt.to_str().unwrap(), "--output", out_path.to_str().unwrap()];
        args.extend_from_slice(extra);
        f.ok(&args);
        std::fs::read_to_string(out_path).unwrap()
    };
    let theta_one = gen(&["--theta", "1.0"], "theta1.txt");
    let plugged_out = gen(&["--fusion-strategy", "none"], "none.txt");
    assert_eq!(theta_one.lines().count(), 6);
    assert_eq!(theta_one, plugged_out);
}

#[test]
fn training_logs_are_reproducible() {
    let f = Fixture::new(20, 2);
    f.ok(&["prepare"]);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let run = f.path(name);
        f.ok(&["pretrain", "--run-dir", run.to_str().unwrap()]);
        f.ok(&[
            "finetune",
            "--checkpoint",
            run.join("pretrained.ckpt").to_str().unwrap(),
            "--metric",
            "loss",
            "--run-dir",
            run.join("ft").to_str().unwrap(),
        ]);
        logs.push((
            std::fs::read(run.join("loss.log")).unwrap(),
            std::fs::read(run.join("ft/loss.log")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
    let ft = String::from_utf8(logs[0].1.clone()).unwrap();
    assert!(ft.lines().any(|l| l.starts_with("epoch 1 loss=")), "{ft}");
    let config = std::fs::read_to_string(f.path("a/config.txt")).unwrap();
    assert!(config.lines().any(|l| l == "model-dim=8"));
}

#[test]
fn generate_then_evaluate() {
    let f = Fixture::new(20, 4);
    f.ok(&["prepare"]);
    let run = f.path("ft");
    f.ok(&["finetune", "--epochs", "1", "--run-dir", run.to_str().unwrap()]);
    let hyp = f.path("hyp.txt");
    f.ok(&["generate", "--checkpoint", run.join("best.ckpt").to_str().unwrap(), "--output", hyp.to_str().unwrap()]);
    let report = f.path("report.jsonl");
    let table = f.ok(&["evaluate", "--hypotheses", hyp.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    let names: Vec<&str> = table.lines().filter_map(|l| l.split_whitespace().next()).collect();
    assert!(names.contains(&"bleu4") && names.contains(&"distinct2"), "{table}");
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    assert_eq!(line["corpus_size"], 4);
}

#[test]
fn usage_errors_exit_one() {
    let none = Command::new(BIN).output().unwrap();
    assert_eq!(code(&none), 1);
    let f = Fixture::new(5, 2);
    for args in [
        &["prepare", "--no-such-flag", "1"][..],
        &["prepare", "--theta", "1.5"],
        &["prepare", "--heads", "two"],
        &["generate"],
        &["pretrain", "--fusion-scope", "nouns_only"],
        &["finetune", "--metric", "meteor"],
        &["generate", "--checkpoint", "/nonexistent/model.ckpt"],
    ] {
        let out = f.run(args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    let out = f.run(&["sweep-theta"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("error [usage]: --cache"), "{}", stderr(&out));
}

#[test]
fn runtime_failures_exit_two_and_name_the_stage() {
    let f = Fixture::new(5, 2);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let out = f.run(&["prepare", "--backend", "remote", "--remote-url", &url, "--remote-retries", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error [augment]") && stderr(&out).contains("unavailable"), "{}", stderr(&out));

    let bad = f.path("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    f.ok(&["prepare"]);
    let out = f.run(&["generate", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error [load checkpoint]"), "{}", stderr(&out));
}

#[test]
fn checkpoint_fixes_the_backbone_shape() {
    let f = Fixture::new(10, 2);
    f.ok(&["prepare"]);
    let run = f.path("ft");
    f.ok(&["finetune", "--epochs", "1", "--metric", "loss", "--run-dir", run.to_str().unwrap()]);
    let out = f.run(&["generate", "--checkpoint", run.join("best.ckpt").to_str().unwrap(), "--model-dim", "16"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("conflicts with checkpoint"), "{}", stderr(&out));
}
