use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn planner(args: &[&str]) -> Output {
    planner_with(args, &[])
}

fn planner_with(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_planner"));
    cmd.args(args)
        .env_remove("PLANNER_PARAMS")
        .env_remove("PLANNER_CATALOG_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("planner runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn feasible_search_exits_zero() {
    let out = planner(&[
        "search",
        "--model",
        "pythia-1b",
        "--gpu",
        "a100",
        "--n",
        "4",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("best:"));
}

#[test]
fn infeasible_search_exits_two() {
    let out = planner(&[
        "search",
        "--model",
        "pythia-6.9b",
        "--gpu",
        "rtx3090",
        "--n",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("infeasible"));
}

#[test]
fn analytic_days() {
    let out = planner(&[
        "analytic",
        "--model",
        "pythia-1b",
        "--gpu",
        "h100",
        "--n",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("28.9 days"), "{}", stdout(&out));
}

#[test]
fn json_output_parses() {
    let out = planner(&[
        "--json",
        "analytic",
        "--model",
        "pythia-1b",
        "--gpu",
        "a100",
        "--n",
        "4",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let days = v["days"].as_f64().unwrap();
    assert!((days - 17.7).abs() < 0.1);
}

#[test]
fn invalid_input_exits_three() {
    for args in [
        &["analytic", "--model", "nope", "--gpu", "h100", "--n", "1"][..],
        &[
            "search",
            "--model",
            "pythia-1b",
            "--gpu",
            "a100",
            "--n",
            "3",
        ],
        &[
            "cost",
            "experiment",
            "--gpu",
            "a100",
            "--n",
            "8",
            "--days",
            "-1",
        ],
        &["no-such-command"],
    ] {
        assert_eq!(planner(args).status.code(), Some(3), "{args:?}");
    }
}

#[test]
fn degenerate_calibration_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let line = |config: &str, ts: u32| {
        format!(
            r#"{{"model_id":"pythia-160m","gpu_id":"a100","n_gpus":2,"config":{config},"pass_seconds":0.5,"update_seconds":0.05,"oom":false,"timestamp":"2024-01-01T00:00:0{ts}Z"}}"#
        )
    };
    let a = line(
        r#"{"compile":false,"custom_kernels":false,"tf32":false,"act_checkpointing":false,"sharding":"zero3","offload":false,"micro_batch":8,"grad_accum_steps":64}"#,
        0,
    );
    let b = line(
        r#"{"compile":false,"custom_kernels":true,"tf32":false,"act_checkpointing":true,"sharding":"zero3","offload":true,"micro_batch":16,"grad_accum_steps":32}"#,
        1,
    );
    fs::write(&records, format!("{a}\n{b}\n")).unwrap();
    let out = planner(&["calibrate", "--records", records.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("mfu"));
}

#[test]
fn out_dir_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let target = dir.path().join(name);
        let out = planner(&[
            "--out",
            target.to_str().unwrap(),
            "search",
            "--model",
            "pythia-410m",
            "--gpu",
            "a6000",
            "--n",
            "2",
        ]);
        assert_eq!(out.status.code(), Some(0));
        target
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["catalog_version"], 1);
    assert_eq!(manifest["params_sha256"].as_str().unwrap().len(), 64);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for path in outputs {
        let path = Path::new(path.as_str().unwrap());
        let name = path.file_name().unwrap();
        assert_eq!(
            fs::read(path).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn catalog_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        planner(&["fixtures", "export", "--dir", dir.path().to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let catalog = dir.path().join("catalog");
    let prices = catalog.join("prices.toml");
    let text = fs::read_to_string(&prices).unwrap();
    let line = text.lines().find(|l| l.starts_with("a100 ")).unwrap();
    fs::write(&prices, text.replace(line, "a100 = 100000.00")).unwrap();

    let args = [
        "cost",
        "experiment",
        "--gpu",
        "a100",
        "--n",
        "8",
        "--days",
        "9",
    ];
    let bundled = stdout(&planner(&args));
    let custom = planner_with(&args, &[("PLANNER_CATALOG_DIR", &catalog)]);
    assert_eq!(custom.status.code(), Some(0));
    assert!(bundled.contains("$802.22"));
    assert_ne!(stdout(&custom), bundled);
}
