use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "schema_version": 1,
  "name": "tiny",
  "seed": 5,
  "dataset": {"source": "blobs", "blobs": {"classes": 2, "shape": [1, 3, 3], "spread": 0.6},
              "train_per_class": 12, "test_per_class": 12},
  "net": {"arch": {"kind": "mlp", "hidden": [4]}, "norm": "batch", "num_classes": 2, "input_shape": [1, 3, 3]},
  "scores": {"method": "forgetting", "train": {"epochs": 4, "batch_size": 8, "lr": 0.05, "momentum": 0.9,
             "weight_decay": 0.0, "schedule": "constant", "aug": {"mode": "simple"}}},
  "experts": {"count": 2, "train": {"epochs": 4, "batch_size": 8, "lr": 0.05, "momentum": 0.9,
              "weight_decay": 0.0, "schedule": "constant", "aug": {"mode": "simple"}}},
  "distill": {"baseline": "selmatch", "iterations": 5, "syn_steps": 2, "expert_epochs": 1,
              "max_start_epoch": 2, "batch_syn": 4, "pixel_lr": 1.0, "eta_init": 0.01,
              "alpha": 0.5, "beta": 0.0, "ipc": 2, "checkpoint_every": 2},
  "eval": {"seeds": 2}
}"#;

fn distillkit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distillkit"))
        .args(args)
        .env("DISTILLKIT_RUNS", root.join("runs"))
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(root: &Path, name: &str, text: &str) -> String {
    let p = root.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pipeline_runs_and_reopens_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", CONFIG);
    for cmd in [&["gen-data"][..], &["score"], &["expert"], &["select"], &["distill"], &["eval"], &["coverage"]] {
        let out = distillkit(dir.path(), &[&["--config", &cfg][..], cmd].concat());
        assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = distillkit(dir.path(), &["--name", "tiny", "eval", "--input", "full"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/tiny");
    for f in ["config.json", "scores.csv", "metrics.csv", "synthetic.smsy", "eval_synthetic.csv", "eval_full.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash="));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(dir.path(), "a.json", &CONFIG.replace("\"ipc\": 2", "\"ipc\": 2, \"ipcc\": 3"));
    let out = distillkit(dir.path(), &["--config", &bad_key, "gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ipcc"));

    let seeded = write_config(dir.path(), "b.json", &CONFIG.replace("\"ipc\": 2", "\"ipc\": 2, \"seed\": 99"));
    assert_eq!(code(&distillkit(dir.path(), &["--config", &seeded, "gen-data"])), 1);

    assert_eq!(code(&distillkit(dir.path(), &["gen-data"])), 1);

    // The same name with a different config is refused.
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, "gen-data"])), 0);
    let out = distillkit(dir.path(), &["--config", &cfg, "--seed", "6", "gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("another name"));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&distillkit(dir.path(), &["--config", "/no/such/config.json", "gen-data"])), 2);
    assert_eq!(code(&distillkit(dir.path(), &["--name", "nobody", "eval"])), 2);
    let cfg = write_config(dir.path(), "run.json", CONFIG);
    let out = distillkit(dir.path(), &["--config", &cfg, "eval"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, "gen-data"])), 0);
    assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, "distill"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &CONFIG.replace("\"eta_init\": 0.01", "\"eta_init\": 1e300").replace("\"iterations\": 5", "\"iterations\": 40"),
    );
    for cmd in ["gen-data", "score", "expert"] {
        assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, cmd])), 0);
    }
    let out = distillkit(dir.path(), &["--config", &cfg, "distill"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "# config_hash=aaaa\nseed,test_acc,easy_acc,hard_acc,epochs\n1,0.5,,,10\n").unwrap();
    fs::write(&b, "# config_hash=bbbb\nseed,test_acc,easy_acc,hard_acc,epochs\n1,0.6,,,10\n").unwrap();
    let cfg = write_config(dir.path(), "run.json", CONFIG);
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, "report", "--inputs", a, b])), 1);
    assert_eq!(code(&distillkit(dir.path(), &["--config", &cfg, "report", "--force", "--inputs", a, b])), 0);
    assert!(dir.path().join("runs/tiny/report/eval.csv").exists());
}
