use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn persona(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persona"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = persona(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_embeddings(path: &Path, rows: &[[f32; 2]], labels: &[&str]) {
    let mut bytes = b"PRSNEMB1".to_vec();
    bytes.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&2u64.to_le_bytes());
    for r in rows {
        for x in r {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).unwrap();
    fs::write(
        format!("{}.labels", path.display()),
        labels.join("\n") + "\n",
    )
    .unwrap();
}

#[test]
fn rank_reproduces_the_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (q, t, out) = (
        dir.path().join("q.bin"),
        dir.path().join("t.bin"),
        dir.path().join("report.json"),
    );
    write_embeddings(
        &t,
        &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
        &["a", "b", "c", "d"],
    );
    // Ranks of the true target: 1, 2 and 4.
    write_embeddings(&q, &[[1.0, 0.0], [0.9, 0.3], [1.0, 0.1]], &["a", "b", "c"]);
    ok(&[
        "rank",
        "--queries",
        p(&q),
        "--targets",
        p(&t),
        "--out",
        p(&out),
    ]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["ranks"], serde_json::json!([1, 2, 4]));
    assert_eq!(
        r["mrr"].as_f64().unwrap().to_bits(),
        (1.75f64 / 3.0).to_bits()
    );
    assert_eq!(r["mr"], 2);
    let recall: Vec<f64> = r["recall"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["recall"].as_f64().unwrap())
        .collect();
    assert_eq!(&recall[..3], &[1.0 / 3.0, 2.0 / 3.0, 1.0]);
    let tsv = fs::read_to_string(dir.path().join("report.ranks.tsv")).unwrap();
    assert_eq!(tsv, "query\tauthor\trank\n0\ta\t1\n1\tb\t2\n2\tc\t4\n");
    assert!(dir.path().join("report.json.run.json").exists());
}

#[test]
fn missing_checkpoint_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("no-such-ckpt");
    let out = dir.path().join("report.json");
    let res = persona(&[
        "rank",
        "--ckpt",
        p(&ckpt),
        "--queries",
        "q.jsonl",
        "--targets",
        "t.jsonl",
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "not_found");
    assert!(err["error"]["path"]
        .as_str()
        .unwrap()
        .contains("no-such-ckpt"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"d_embed": 8, "layers": 3}}"#).unwrap();
    let out = dir.path().join("corpus.jsonl");
    let res = persona(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert!(
        err["error"]["causes"].to_string().contains("layers"),
        "{err}"
    );
    assert!(!out.exists());
}

const TINY: &str = r#"{
  "corpus": {"synth": {"num_authors": 12, "actions_per_author": 120}, "novel_authors": 3},
  "tokenizer": {"vocab_size": 300, "max_tokens": 8, "max_contexts": 64},
  "model": {"d_embed": 16, "conv_widths": [2, 3], "filters_per_conv": 8, "attn_layers": 1, "attn_heads": 2,
            "d_hidden": 16, "d_out": 16},
  "train": {"total_iters": 40, "batch_size": 8, "episode_len": 4, "warmup_iters": 5, "log_every": 10},
  "eval": {"query_len": 4, "target_len": 4, "verify": {"epochs": 5}}
}"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("c.json"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn at(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn s(&self, name: &str) -> String {
        self.at(name).to_str().unwrap().to_string()
    }

    /// synth, train, make-task, rank.
    fn pipeline(&self) {
        let (cfg, corpus) = (self.s("c.json"), self.s("corpus.jsonl"));
        ok(&["synth", "--config", &cfg, "--out", &corpus]);
        ok(&[
            "train",
            "--config",
            &cfg,
            "--corpus",
            &corpus,
            "--out",
            &self.s("ckpt"),
        ]);
        ok(&[
            "make-task",
            "--config",
            &cfg,
            "--corpus",
            &corpus,
            "--out-dir",
            &self.s("task"),
        ]);
        ok(&[
            "rank",
            "--ckpt",
            &self.s("ckpt"),
            "--queries",
            &self.s("task/queries.jsonl"),
            "--targets",
            &self.s("task/targets.jsonl"),
            "--out",
            &self.s("rank.json"),
        ]);
    }
}

#[test]
fn same_config_twice_gives_identical_artifacts() {
    let (a, b) = (Run::new(), Run::new());
    a.pipeline();
    b.pipeline();
    for f in [
        "corpus.jsonl",
        "ckpt/train_log.jsonl",
        "ckpt/params.bin",
        "ckpt/vocab.json",
        "task/queries.jsonl",
        "rank.ranks.tsv",
    ] {
        assert_eq!(
            fs::read(a.at(f)).unwrap(),
            fs::read(b.at(f)).unwrap(),
            "{f}"
        );
    }
    // The reports differ only in the checkpoint path they name.
    let report = |r: &Run| {
        let mut v: Value =
            serde_json::from_str(&fs::read_to_string(r.at("rank.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("scorer");
        v
    };
    assert_eq!(report(&a), report(&b));
    let log = fs::read_to_string(a.at("ckpt/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }
    let run: Value =
        serde_json::from_str(&fs::read_to_string(a.at("ckpt/run.json")).unwrap()).unwrap();
    assert_eq!(run["version"], env!("CARGO_PKG_VERSION"));
    // Defaults are written out explicitly, including the derived schedule.
    assert_eq!(
        run["config"]["train"]["lr_drops"],
        serde_json::json!([20, 30])
    );
    assert_eq!(run["config"]["model"]["dropout_rate"], 0.1);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(a.at("rank.json")).unwrap()).unwrap();
    assert_eq!(report["num_targets"], 12);
    assert_eq!(report["num_queries"], 4);
}

#[test]
fn every_command_writes_its_outputs() {
    let r = Run::new();
    r.pipeline();
    let (cfg, corpus, ckpt) = (r.s("c.json"), r.s("corpus.jsonl"), r.s("ckpt"));

    ok(&[
        "vocab",
        "--corpus",
        &corpus,
        "--size",
        "280",
        "--config",
        &cfg,
        "--out",
        &r.s("vocab.json"),
    ]);
    let vocab: Value =
        serde_json::from_str(&fs::read_to_string(r.at("vocab.json")).unwrap()).unwrap();
    assert_eq!(vocab["merges"].as_array().unwrap().len(), 280 - 258);

    ok(&[
        "embed",
        "--ckpt",
        &ckpt,
        "--episodes",
        &r.s("task/targets.jsonl"),
        "--out",
        &r.s("t.bin"),
    ]);
    let bytes = fs::read(r.at("t.bin")).unwrap();
    assert_eq!(bytes.len(), 24 + 4 * 12 * 16);
    ok(&[
        "--threads",
        "3",
        "embed",
        "--ckpt",
        &ckpt,
        "--episodes",
        &r.s("task/queries.jsonl"),
        "--out",
        &r.s("q.bin"),
    ]);
    ok(&[
        "rank",
        "--queries",
        &r.s("q.bin"),
        "--targets",
        &r.s("t.bin"),
        "--out",
        &r.s("rank2.json"),
    ]);
    let a: Value = serde_json::from_str(&fs::read_to_string(r.at("rank.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&fs::read_to_string(r.at("rank2.json")).unwrap()).unwrap();
    assert_eq!(a["ranks"], b["ranks"]);

    ok(&[
        "cluster",
        "--ckpt",
        &ckpt,
        "--corpus",
        &corpus,
        "--episode-len",
        "4",
        "--out",
        &r.s("cluster.json"),
    ]);
    let c: Value =
        serde_json::from_str(&fs::read_to_string(r.at("cluster.json")).unwrap()).unwrap();
    assert_eq!(c["episodes"], 60);
    assert!((0.0..=1.0).contains(&c["nmi"].as_f64().unwrap()));

    ok(&[
        "make-pairs",
        "--corpus",
        &corpus,
        "--per-split",
        "20",
        "--episode-len",
        "4",
        "--out",
        &r.s("pairs.jsonl"),
    ]);
    for method in ["cosine", "mlp"] {
        let out = r.s(&format!("verify-{method}.json"));
        ok(&[
            "verify",
            "--ckpt",
            &ckpt,
            "--pairs",
            &r.s("pairs.jsonl"),
            "--method",
            method,
            "--config",
            &cfg,
            "--out",
            &out,
        ]);
        let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["sizes"], serde_json::json!([20, 20, 20]));
    }

    for method in ["tfidf-word", "tfidf-char3", "tfidf-context", "scap"] {
        let out = r.s(&format!("{method}.json"));
        ok(&[
            "baseline",
            "--method",
            method,
            "--queries",
            &r.s("task/queries.jsonl"),
            "--targets",
            &r.s("task/targets.jsonl"),
            "--out",
            &out,
        ]);
        let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["num_queries"], 4);
    }

    ok(&[
        "sweep-length",
        "--config",
        &cfg,
        "--lengths",
        "2,4",
        "--out",
        &r.s("sweep.csv"),
    ]);
    let csv = fs::read_to_string(r.at("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "episode_len,recall_at_8,mrr");
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("4,"));
    assert!(r.at("sweep.csv.run.json").exists());
}

#[test]
fn failed_training_leaves_nothing_behind() {
    let r = Run::new();
    let cfg = r.at("long.json");
    fs::write(
        &cfg,
        TINY.replace("\"episode_len\": 4", "\"episode_len\": 200"),
    )
    .unwrap();
    let out = r.at("ckpt");
    let res = persona(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert!(
        err["error"]["message"]
            .as_str()
            .unwrap()
            .contains("episode length"),
        "{err}"
    );
    assert!(!out.exists());
}
