//! End-to-end runs of the `subflow` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_subflow");

fn subflow(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("SUBFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

const TINY: &[&str] = &[
    "--set",
    "backbone.subspaces=2",
    "--set",
    "backbone.blocks=2",
    "--set",
    "backbone.sub_channels=4",
    "--set",
    "backbone.visual_dim=8",
    "--set",
    "backbone.latent_dim=8",
    "--set",
    "backbone.speaker_dim=4",
    "--set",
    "backbone.convnext_layers=1",
    "--set",
    "backbone.convnext_hidden=8",
    "--set",
    "world.t_v_min=3",
    "--set",
    "world.t_v_max=5",
    "--set",
    "aux.pretrain_steps=5",
    "--set",
    "train.batch_size=2",
    "--set",
    "eval.n_conditions=2",
    "--set",
    "eval.n_draws=4",
    "--set",
    "eval.n_permutations=20",
];

fn train_tiny(dir: &Path, steps: u64) -> PathBuf {
    let out = dir.join("run");
    let steps = format!("train.total_steps={steps}");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", &steps];
    args.extend_from_slice(TINY);
    stdout_json(&subflow(&args));
    out
}

/// Minimal JSON-Schema check covering the keywords used by the shipped
/// schema: type, required, properties, additionalProperties, minimum, maximum.
fn validate(schema: &Value, v: &Value, path: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => return Err(format!("{path}: bad type keyword")),
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            "null" => v.is_null(),
            "string" => v.is_string(),
            "array" => v.is_array(),
            "boolean" => v.is_boolean(),
            _ => false,
        });
        if !ok {
            return Err(format!("{path}: {v} is not {types:?}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(m) = schema.get("minimum").and_then(Value::as_f64) {
            if x < m {
                return Err(format!("{path}: {x} < {m}"));
            }
        }
        if let Some(m) = schema.get("maximum").and_then(Value::as_f64) {
            if x > m {
                return Err(format!("{path}: {x} > {m}"));
            }
        }
    }
    if let Some(obj) = v.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let k = r.as_str().unwrap();
            if !obj.contains_key(k) {
                return Err(format!("{path}: missing `{k}`"));
            }
        }
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(s, child, &format!("{path}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{path}: unexpected `{k}`"))
                }
                None => {}
            }
        }
    }
    Ok(())
}

fn schema() -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/eval_report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn schema_validator_rejects_bad_reports() {
    let s = schema();
    let bad = serde_json::json!({"checkpoint_step": 1, "world_seed": 0, "nfe": 10});
    assert!(validate(&s, &bad, "$").is_err());
}

#[test]
fn dry_run_prints_parameter_count() {
    let mut args = vec!["train", "--dry-run"];
    args.extend_from_slice(TINY);
    let v = stdout_json(&subflow(&args));
    assert_eq!(v["valid"], true);
    assert!(v["parameters"].as_u64().unwrap() > 0);
}

#[test]
fn shipped_configs_validate() {
    for name in ["desk.json", "paper.json", "ablation.json"] {
        let p = configs().join(name);
        let v = stdout_json(&subflow(&["train", "--dry-run", "--config", p.to_str().unwrap()]));
        assert_eq!(v["valid"], true, "{name}");
    }
}

#[test]
fn invalid_config_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"backbone\": {\n    \"blocks\": 2,\n    \"kernel_sub\": 6\n  }\n}\n").unwrap();
    let o = subflow(&["train", "--dry-run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");

    std::fs::write(&p, "{\"train\": {\"total_steps\": 5, \"learning_rate\": 1}}").unwrap();
    let o = subflow(&["train", "--dry-run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), 3);
    for f in ["metrics.csv", "checkpoint.bin", "eval.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let ckpt = run.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    // config echo parses back to the same run
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["total_steps"], 3);

    let out = dir.path().join("s.bin");
    let v = stdout_json(&subflow(&["sample", ckpt, "--nfe", "1", "--n", "2", "--out", out.to_str().unwrap()]));
    assert_eq!(v["nfe"], 1);
    assert_eq!(v["timings"]["per_evaluation_seconds"].as_array().unwrap().len(), 1);
    let side: Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side, v);
    let a = subspace_flow::archive::Archive::load(&out).unwrap();
    assert!(a.get("sample.1.1").is_some());

    // samples archive doubles as a condition file
    let out2 = dir.path().join("s2.bin");
    let v = stdout_json(&subflow(&[
        "sample",
        ckpt,
        "--condition-file",
        out.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]));
    assert_eq!(v["nfe"], 10);
    assert_eq!(v["n_per_condition"], 4);

    let r1 = dir.path().join("e1.json");
    let r2 = dir.path().join("e2.json");
    stdout_json(&subflow(&["eval", ckpt, "--world-seed", "5", "--report", r1.to_str().unwrap()]));
    stdout_json(&subflow(&["eval", ckpt, "--world-seed", "5", "--report", r2.to_str().unwrap()]));
    let (b1, b2) = (std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    assert_eq!(b1, b2);
    let report: Value = serde_json::from_slice(&b1).unwrap();
    validate(&schema(), &report, "$").unwrap();
    assert_eq!(report["world_seed"], 5);
    let train_eval: Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    validate(&schema(), &train_eval, "$").unwrap();
}

#[test]
fn untrained_checkpoint_reports_null_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), 1);
    // one step from a zero-initialized head barely moves the velocity
    let v = stdout_json(&subflow(&["eval", run.join("checkpoint.bin").to_str().unwrap()]));
    let rel = v["metrics"]["rel_mean_error"].as_f64().unwrap();
    assert!(rel > 0.5, "{rel}");
}

#[test]
fn missing_or_mismatched_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = subflow(&["sample", dir.path().join("nope.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = subflow(&["eval", dir.path().join("nope.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let run = train_tiny(dir.path(), 1);
    let world = dir.path().join("world.json");
    std::fs::write(
        &world,
        r#"{"seed": 0, "visual_dim": 9, "latent_dim": 8, "speaker_dim": 4, "upsample_factor": 2,
            "t_v_min": 3, "t_v_max": 5, "noise_std": 0.1, "n_speakers": 4}"#,
    )
    .unwrap();
    let o = subflow(&[
        "eval",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--world",
        world.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not match"));

    let o = subflow(&["ablate", "--axis", "depth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_time_scales_linearly_with_nfe() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    stdout_json(&subflow(&[
        "train",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.total_steps=1",
        "--set",
        "aux.pretrain_steps=1",
        "--set",
        "eval.n_conditions=1",
        "--set",
        "eval.n_draws=2",
        "--set",
        "eval.n_permutations=1",
    ]));
    let ckpt = out.join("checkpoint.bin");
    let per_nfe = |nfe: usize| -> f64 {
        // best of three to shed scheduler noise
        (0..3)
            .map(|_| {
                let v = stdout_json(&subflow(&[
                    "sample",
                    ckpt.to_str().unwrap(),
                    "--nfe",
                    &nfe.to_string(),
                    "--n",
                    "2",
                    "--out",
                    dir.path().join("s.bin").to_str().unwrap(),
                ]));
                let t: f64 = v["timings"]["per_evaluation_seconds"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_f64().unwrap())
                    .sum();
                t / nfe as f64
            })
            .fold(f64::INFINITY, f64::min)
    };
    let rates: Vec<f64> = [5, 10, 20, 40].iter().map(|&n| per_nfe(n)).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    for (n, r) in [5, 10, 20, 40].iter().zip(&rates) {
        assert!((r / mean - 1.0).abs() < 0.2, "nfe {n}: {r} s/eval vs mean {mean}");
    }
}

#[test]
fn gradcheck_reports_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("gc.json");
    let mut args = vec!["gradcheck", "--report", rep.to_str().unwrap(), "--max-entries", "4"];
    args.extend_from_slice(TINY);
    let v = stdout_json(&subflow(&args));
    assert_eq!(v["passed"], true);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(on_disk, v);
    for w in v["primitives"].as_array().unwrap() {
        assert!(w["max_rel_err"].as_f64().unwrap() < 1e-4, "{w}");
    }
    assert!(v["modules"].as_array().unwrap().iter().any(|m| m["name"] == "sola"));

    let mut args = vec!["gradcheck", "--tolerance", "1e-300", "--max-entries", "2"];
    args.extend_from_slice(TINY);
    let o = subflow(&args);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('`'), "offending tensor not named: {err}");
}

#[test]
fn exported_corpus_trains_and_conditions_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus.bin");
    let mut args = vec!["export-dataset", "--n", "4", "--out", data.to_str().unwrap()];
    args.extend_from_slice(TINY);
    stdout_json(&subflow(&args));
    let set = format!("train.dataset={}", data.display());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", "train.total_steps=2", "--set", &set];
    args.extend_from_slice(TINY);
    stdout_json(&subflow(&args));
    let v = stdout_json(&subflow(&[
        "sample",
        out.join("checkpoint.bin").to_str().unwrap(),
        "--condition-file",
        data.to_str().unwrap(),
        "--n",
        "1",
        "--nfe",
        "2",
    ]));
    assert_eq!(v["n_conditions"], 4);
}
