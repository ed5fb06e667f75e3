use std::path::Path;
use std::process::{Command, Output};

use chainflow::scenario::{load_dataset, ScenarioConfig};

const TINY: &[&str] = &[
    "model.chain.modes=2",
    "model.chain.hidden_dim=8",
    "model.chain.query_dim=4",
    "model.flow.n_blocks=1",
    "model.flow.model_dim=8",
    "model.flow.n_heads=2",
    "model.scorer.hidden_dim=4",
    "train.batch_size=3",
    "train.epochs_stage1=2",
    "train.epochs_stage2=2",
];

fn chainflow(args: &[&str], tiny: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chainflow"));
    cmd.env_remove("CHAINFLOW_CONFIG");
    if tiny {
        for s in TINY {
            cmd.args(["--set", s]);
        }
    }
    cmd.args(args).output().expect("spawn chainflow")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("empty.jsonl");
    ok(&chainflow(&["gen-data", "--count", "0", "--out", p(&file)], false));
    assert!(load_dataset(&file, &ScenarioConfig::default()).unwrap().is_empty());
    assert!(dir.path().join("empty.jsonl.config.toml").exists());
    assert!(dir.path().join("empty.jsonl.meta.json").exists());
}

#[test]
fn gen_data_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&chainflow(&["gen-data", "--seed", "4", "--count", "12", "--out", p(&a)], false));
    ok(&chainflow(&["gen-data", "--seed", "4", "--count", "12", "--out", p(&b)], false));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_dataset(&a, &ScenarioConfig::default()).unwrap().len(), 12);
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&chainflow(&["gen-data", "--count", "2", "--out", p(&data)], false));
    let missing = dir.path().join("nowhere").join("stage2.ckpt");
    let out = chainflow(
        &["eval", "--data", p(&data), "--ckpt", p(&missing), "--out", p(&dir.path().join("ev"))],
        false,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains(p(&missing)), "{err}");
    assert!(err.starts_with("error[checkpoint]"), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!dir.path().join("ev").exists());
}

#[test]
fn help_lists_flags_and_defaults() {
    let top = String::from_utf8(chainflow(&["--help"], false).stdout).unwrap();
    for word in ["gen-data", "train-stage1", "train-stage2", "eval", "plan", "sweep-steps", "--config", "--set", "--threads"] {
        assert!(top.contains(word), "top-level help lacks {word}");
    }
    let cases: &[(&str, &[&str])] = &[
        ("gen-data", &["--seed", "--count", "[default: 500]", "--out"]),
        ("train-stage1", &["--data", "--out"]),
        ("train-stage2", &["--data", "--stage1-ckpt", "--out"]),
        (
            "eval",
            &["--data", "--ckpt", "--ckpt-semantic", "--ckpt-scene", "--arms", "[default: full,ar-only]", "--steps", "--out"],
        ),
        ("plan", &["--data", "--scenario-id", "--ckpt", "--ar-only", "--svg-out"]),
        ("sweep-steps", &["--data", "--ckpt", "--steps", "[default: 2,4,8,12,16]", "--out"]),
    ];
    for (cmd, flags) in cases {
        let out = chainflow(&[cmd, "--help"], false);
        ok(&out);
        let text = String::from_utf8(out.stdout).unwrap();
        for f in *flags {
            assert!(text.contains(f), "{cmd} help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("x.jsonl");
    for (args, kind) in [
        (vec!["--set", "train.learning_rate=1", "gen-data", "--out", p(&file)], "error[config]"),
        (vec!["--set", "model.flow.n_heads=3", "gen-data", "--out", p(&file)], "error[config]"),
        (vec!["--threads", "0", "gen-data", "--out", p(&file)], "error[invalid_argument]"),
    ] {
        let out = chainflow(&args, false);
        assert_eq!(out.status.code(), Some(1));
        assert!(stderr(&out).starts_with(kind), "{}", stderr(&out));
        assert!(!file.exists());
    }
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nbogus = 1\n").unwrap();
    let out = chainflow(&["--config", p(&cfg), "gen-data", "--out", p(&file)], false);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (train, test) = (d.join("train.jsonl"), d.join("test.jsonl"));
    ok(&chainflow(&["gen-data", "--seed", "1", "--count", "6", "--out", p(&train)], true));
    ok(&chainflow(&["gen-data", "--seed", "2", "--count", "4", "--out", p(&test)], true));

    let s1 = d.join("s1");
    let out = chainflow(&["train-stage1", "--data", p(&train), "--out", p(&s1)], true);
    ok(&out);
    assert_eq!(stderr(&out).matches("stage 1 epoch").count(), 2);
    for f in ["stage1.ckpt", "train_log.csv", "config.resolved.toml", "run_meta.json"] {
        assert!(s1.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(s1.join("train_log.csv")).unwrap();
    assert!(log.starts_with("stage,epoch,step,lr"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    // A Stage I checkpoint of a different chain is refused.
    let out = Command::new(env!("CARGO_BIN_EXE_chainflow"))
        .args(["--set", "model.chain.hidden_dim=16", "train-stage2", "--data", p(&train)])
        .args(["--stage1-ckpt", p(&s1.join("stage1.ckpt")), "--out", p(&d.join("bad"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("bad").exists());

    let s2 = d.join("s2");
    let ck1 = s1.join("stage1.ckpt");
    ok(&chainflow(&["train-stage2", "--data", p(&train), "--stage1-ckpt", p(&ck1), "--out", p(&s2)], true));
    let ckpt = s2.join("stage2.ckpt");

    let eval = |name: &str| {
        let out_dir = d.join(name);
        let out = chainflow(&["eval", "--data", p(&test), "--ckpt", p(&ckpt), "--out", p(&out_dir)], true);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("obstacle-heavy NC"));
        (std::fs::read(out_dir.join("full.csv")).unwrap(), std::fs::read(out_dir.join("ar-only.csv")).unwrap())
    };
    let (full_a, ar_a) = eval("ev_a");
    let (full_b, ar_b) = eval("ev_b");
    assert_eq!(full_a, full_b);
    assert_eq!(ar_a, ar_b);
    assert_eq!(String::from_utf8(full_a).unwrap().lines().count(), 4 + 2);

    let sweep = d.join("sweep.csv");
    ok(&chainflow(&["sweep-steps", "--data", p(&test), "--ckpt", p(&ckpt), "--steps", "2,4", "--out", p(&sweep)], true));
    let rows: Vec<String> = std::fs::read_to_string(&sweep).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "steps,pdms,nc,dac,ep,ttc,comfort");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("2,") && rows[2].starts_with("4,"));

    let first_id = load_dataset(&test, &ScenarioConfig::default()).unwrap()[0].id.clone();
    let svg = d.join("plan.svg");
    let out = chainflow(
        &["plan", "--data", p(&test), "--scenario-id", &first_id, "--ckpt", p(&ckpt), "--svg-out", p(&svg)],
        true,
    );
    ok(&out);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("class=\"selected\"") && text.contains("class=\"refined\""));

    // Without the tiny overrides the digests differ and loading fails.
    let out = chainflow(&["eval", "--data", p(&test), "--ckpt", p(&ckpt), "--out", p(&d.join("ev_c"))], false);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("different model config"));
}
