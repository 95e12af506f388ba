use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.source = synthetic
data.synthetic.shape = 1, 8, 8
data.synthetic.train = 200
data.synthetic.test = 100
train.epochs = 2
train.batch_size = 20
train.lr_decay_epochs = 1
";

fn atlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&atlab(&["--help"])), 0);
    assert_eq!(code(&atlab(&["--version"])), 0);
    assert_eq!(code(&atlab(&[])), 1);
    assert_eq!(code(&atlab(&["frobnicate"])), 1);
    assert_eq!(code(&atlab(&["theory-sim", "--n", "lots"])), 1);
}

#[test]
fn bad_config_is_usage_and_bad_checkpoint_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "data.source = synthetic\nmodel.a.colour = red\n").unwrap();
    let o = atlab(&["--config", s(&cfg), "--out", s(dir.path()), "run"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let junk = dir.path().join("junk.atlb");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = atlab(&["--config", s(&cfg), "--out", s(dir.path()), "dist", "--f1", s(&junk), "--f2", s(&junk)]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&atlab(&["--config", s(&missing), "run"])), 2);
}

#[test]
fn theory_sim_writes_agreeing_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let o = atlab(&[
        "--out",
        s(dir.path()),
        "--seed",
        "5",
        "theory-sim",
        "--d",
        "10,100",
        "--eta",
        "0.1",
        "--n",
        "20000",
    ]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    assert!(csv.starts_with("scheme,d,eta"));
    assert!(o.stderr.is_empty(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_attack_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let base = ["--config", s(&cfg), "--out", s(out), "--threads", "1"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let o = atlab(&args);
        assert_eq!(code(&o), 0, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };

    run(&["--seed", "1", "train", "--id", "a", "--preset", "FC-2"]);
    run(&["--seed", "2", "train", "--id", "b", "--preset", "FC-2"]);
    let (a, b) = (out.join("a.atlb"), out.join("b.atlb"));
    assert!(out.join("a.json").is_file());

    let msg = run(&["attack", "--model", s(&a), "--n", "20", "--epsilon", "1.5"]);
    assert!(msg.contains("of 20"));
    assert!(out.join("adv.json").is_file());

    let csv = run(&["transfer-eval", "--source", s(&a), "--target", s(&b), "--sample-n", "50", "--save-set"]);
    assert!(csv.lines().nth(1).unwrap().starts_with("a,b,"));

    let csv = run(&["dist", "--f1", s(&a), "--f2", s(&b), "--images", "10"]);
    assert_eq!(csv.lines().count(), 2);

    run(&[
        "boundary-grid", "--source", s(&a), "--target", s(&b), "--image", "0", "--half-extent", "3", "--resolution", "7",
    ]);
    assert!(out.join("overlay_a_b_test-0.csv").is_file());

    let built = run(&["nonrobust-build", "--f1", s(&a), "--f2", s(&b), "--steps", "10", "--train-n", "30"]);
    let stem = built.lines().last().unwrap().trim().to_string();
    assert!(stem.contains("_y2_"));
    let csv = run(&["nonrobust-train", "--dir", s(out), "--stem", &stem, "--preset", "FC-2", "--epochs", "1", "--batch-size", "10"]);
    assert_eq!(csv.lines().count(), 2);

    let csv = run(&[
        "ensemble-compare", "--source", s(&a), "--extra", s(&b), "--target", s(&a), "--sample-n", "20", "--steps", "3",
    ]);
    assert!(csv.starts_with("attack,"));

    let grid = out.join("b_test-0.csv");
    let o = atlab(&["--config", s(&cfg), "--out", s(out), "boundary-grid", "--source", s(&a), "--image", "1000"]);
    assert_eq!(code(&o), 1);
    assert!(grid.is_file());
}
