use std::path::Path;
use std::process::{Command, Output};

fn covlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covlm")).args(args).env_remove("COVLM_SEED").output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"model": {"dim": 16, "layers": 1, "heads": 2, "ffn": 32}, "steps": 3, "batch_size": 2, "lr": 0.001}"#;

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = covlm(&["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_without_data_is_a_usage_error() {
    let o = covlm(&["train", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{not json").unwrap();
    let o = covlm(&["--config", s(&cfg), "gen-data", "--n", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&cfg)));
}

#[test]
fn missing_checkpoint_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nowhere.ckpt");
    let o = covlm(&["eval", "--task", "aro", "--data", "x.jsonl", "--ckpt", s(&ckpt), "--report", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&ckpt)), "{}", stderr(&o));
}

#[test]
fn missing_corpus_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("absent.jsonl");
    let out = dir.path().join("m.ckpt");
    let o = covlm(&["train", "--data", s(&data), "--out", s(&out), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&data)), "{}", stderr(&o));
}

#[test]
fn generate_train_decode_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("train.json");
    std::fs::write(&cfg, TINY).unwrap();
    ok(covlm(&["--seed", "4", "gen-data", "--n", "6", "--out", s(&d.join("data"))]));
    for f in ["corpus.jsonl", "scenes.jsonl", "holdout.json", "stats.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let ckpt = d.join("m.ckpt");
    let log = d.join("log.jsonl");
    ok(covlm(&[
        "--config", s(&cfg), "train", "--data", s(&d.join("data/corpus.jsonl")), "--out", s(&ckpt), "--log", s(&log),
    ]));
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for key in ["step", "lm_loss", "det_loss", "total_loss", "grad_norm", "wall_ms"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }

    let scenes = std::fs::read_to_string(d.join("data/scenes.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(scenes.lines().next().unwrap()).unwrap();
    let image = d.join("data/images").join(format!("{}.ppm", first["id"].as_str().unwrap()));
    let out = d.join("decode.json");
    let annotated = d.join("annotated.ppm");
    ok(covlm(&[
        "decode", "--ckpt", s(&ckpt), "--image", s(&image), "--prompt", "the", "--out", s(&out),
        "--annotate", s(&annotated), "--max-tokens", "6",
    ]));
    let decoded: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(decoded["comm_text"].as_str().unwrap().starts_with("the"));
    assert!(std::fs::read(&annotated).unwrap().starts_with(b"P6"));

    for task in ["aro", "cola", "hoi", "refexp", "vqa"] {
        let report = d.join(format!("{task}.json"));
        ok(covlm(&[
            "eval", "--task", task, "--data", s(&d.join("data/scenes.jsonl")), "--ckpt", s(&ckpt), "--report", s(&report),
        ]));
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["task"], task);
        for v in r["metrics"].as_object().unwrap().values() {
            let v = v.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{task}: {v}");
        }
    }

    let o = ok(covlm(&["inspect-ckpt", s(&ckpt)]));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["train_step"], 3);
    assert!(summary["num_scalars"].as_u64().unwrap() > 0);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |sub: &str, env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut c = Command::new(env!("CARGO_BIN_EXE_covlm"));
        c.args(["gen-data", "--n", "3", "--out", s(&out)]).env_remove("COVLM_SEED");
        if let Some(v) = env {
            c.env("COVLM_SEED", v);
        }
        ok(c.output().unwrap());
        std::fs::read_to_string(out.join("scenes.jsonl")).unwrap()
    };
    let by_env = gen("env", Some("9"));
    let by_flag = ok(covlm(&["--seed", "9", "gen-data", "--n", "3", "--out", s(&dir.path().join("flag"))]));
    drop(by_flag);
    assert_eq!(by_env, std::fs::read_to_string(dir.path().join("flag/scenes.jsonl")).unwrap());
    assert_ne!(by_env, gen("default", None));
}
