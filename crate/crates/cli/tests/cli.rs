use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--dim",
    "8",
    "--layers",
    "1",
    "--heads",
    "2",
    "--ffn-hidden",
    "16",
    "--max-len",
    "16",
    "--epochs",
    "1",
    "--batch-size",
    "16",
    "--train-size",
    "64",
    "--dev-size",
    "32",
];

fn tavat(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tavat"));
    cmd.args(args).env_remove("TAVAT_OUT_DIR");
    if let Some(root) = env_root {
        cmd.env("TAVAT_OUT_DIR", root);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    tavat(&args, None)
}

#[test]
fn train_then_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(train(&["--out-dir", run.to_str().unwrap()]))).unwrap();
    for f in [
        "model.tavm",
        "tokenizer.json",
        "config.toml",
        "metrics.jsonl",
        "ptb_vocab.tavv",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&ok(tavat(&["evaluate", run.to_str().unwrap()], None))).unwrap();
    assert_eq!(eval, summary["dev"]);
}

#[test]
fn out_dir_defaults_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--name", "from-env", "--epochs", "0"]);
    ok(tavat(&args, Some(dir.path())));
    assert!(dir.path().join("from-env").join("model.tavm").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "epochs = 9\nbatch_size = 4\n[adv]\nsteps = 5\nalpha = 0.1\n",
    )
    .unwrap();
    let text = ok(tavat(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "2",
            "--dry-run",
            "--out-dir",
            "x",
        ],
        None,
    ));
    let resolved = tavat::train::TrainConfig::from_toml(&text).unwrap();
    assert_eq!((resolved.epochs, resolved.batch_size), (9, 4));
    assert_eq!((resolved.adv.steps, resolved.adv.alpha), (2, 0.1));
}

#[test]
fn vocab_export_and_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("src");
    let vocab = dir.path().join("shared.tavv");
    ok(train(&[
        "--out-dir",
        run.to_str().unwrap(),
        "--save-ptb-vocab",
        vocab.to_str().unwrap(),
    ]));

    let tok = run.join("tokenizer.json");
    let json: serde_json::Value = serde_json::from_str(&ok(tavat(
        &[
            "export-vocab",
            vocab.to_str().unwrap(),
            "--tokenizer",
            tok.to_str().unwrap(),
        ],
        None,
    )))
    .unwrap();
    let rows = json["rows"].as_u64().unwrap() as usize;
    assert_eq!(json["table"].as_array().unwrap().len(), rows);
    assert_eq!(json["table"][0]["token"], "[PAD]");
    assert_eq!(json["dim"], 8);

    let csv_path = dir.path().join("v.csv");
    ok(tavat(
        &[
            "export-vocab",
            vocab.to_str().unwrap(),
            "--format",
            "csv",
            "-o",
            csv_path.to_str().unwrap(),
        ],
        None,
    ));
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), rows + 1);
    assert!(text.starts_with("id,token,norm,v0,"));

    let target = dir.path().join("dst");
    ok(train(&[
        "--out-dir",
        target.to_str().unwrap(),
        "--init-embedding-from-vocab",
        vocab.to_str().unwrap(),
        "--mode",
        "freelb",
    ]));

    // A tagging task has a different tokenizer, so the vocabulary must be refused.
    let bad = train(&[
        "--out-dir",
        dir.path().join("bad").to_str().unwrap(),
        "--task",
        "synthetic-tagging",
        "--init-embedding-from-vocab",
        vocab.to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn evaluate_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(train(&["--out-dir", a.to_str().unwrap(), "--epochs", "0"]));
    ok(train(&[
        "--out-dir",
        b.to_str().unwrap(),
        "--epochs",
        "0",
        "--dim",
        "16",
    ]));
    let out = tavat(
        &[
            "evaluate",
            a.to_str().unwrap(),
            "--checkpoint",
            b.join("model.tavm").to_str().unwrap(),
        ],
        None,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn ablate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&[
        "--replicates",
        "2",
        "--train-size",
        "32",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let md = ok(tavat(&args, None));
    assert_eq!(
        md.lines().filter(|l| l.starts_with("| ptb_vocab")).count(),
        4
    );
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ablation.json")).unwrap())
            .unwrap();
    assert!(table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["per_seed"].as_array().unwrap().len() == 2));
}

#[test]
fn invalid_config_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&[
        "--out-dir",
        dir.path().join("x").to_str().unwrap(),
        "--epsilon",
        "-1",
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("x").exists());
}
