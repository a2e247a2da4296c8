use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const MICRO: &str = r#"
image_size = 16
patch_size = 8
base_dim = 8
base_hidden = 16
enc_width = 8
enc_depth = 1
dec_width = 8
dec_depth = 1
t_max = 4
budget_grid = [2, 4]
codebook_size = 8
code_dim = 2
halt_hidden = 4
train_per_family = 4
val_per_family = 2
base_epochs = 2
stage1_iters = 8
stage2_iters = 4
warmup_iters = 2
"#;

fn karl(args: &[&str]) -> Output {
    karl_env(args, &[])
}

fn karl_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_karl"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("karl runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{MICRO}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_commands(run: &Path) -> Vec<String> {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    m["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["command"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn missing_and_invalid_configs_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = karl(&["train", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(4));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "not_a_key = 3\n").unwrap();
    let invalid = karl(&["train", "--config", s(&bad)]);
    assert_eq!(invalid.status.code(), Some(3));
    let usage = karl(&["eval", "--mode", "sideways"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn train_eval_and_kc_share_one_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.toml", "");
    let run = dir.path().join("run");
    assert_ok(&karl(&["train", "--config", s(&cfg), "--out", s(&run)]));
    for f in [
        "config.toml",
        "base.json",
        "model.json",
        "metrics.jsonl",
        "training.json",
        "manifest.json",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    assert_ok(&karl(&["eval", "--checkpoint", s(&run), "--mode", "fixed"]));
    let csv = fs::read_to_string(run.join("eval_fixed.csv")).unwrap();
    assert!(csv.starts_with("# config_digest="));
    assert_eq!(csv.lines().count(), 2 + 2);
    assert!(run.join("eval_fixed.svg").is_file());

    let var = karl(&[
        "eval",
        "--checkpoint",
        s(&run),
        "--mode",
        "variable",
        "--eps",
        "0.03,0.05,0.09",
    ]);
    assert_ok(&var);
    assert!(stdout(&var).contains("1 encoder + 1 decoder"));
    assert!(run.join("eval_variable.svg").is_file());

    let thr = karl(&[
        "eval",
        "--checkpoint",
        s(&run),
        "--mode",
        "threshold",
        "--eps",
        "0.05,0.1",
    ]);
    assert_ok(&thr);
    let table = fs::read_to_string(run.join("threshold.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("margin,eps_0.05,eps_0.1"));

    let kc = karl(&["kc", "--checkpoint", s(&run), "--oracle"]);
    assert_ok(&kc);
    let out = stdout(&kc);
    // five families, two validation images each
    assert_eq!(
        out.lines()
            .filter(|l| l.contains(" t_hat=") && l.contains(" oracle="))
            .count(),
        10
    );
    assert!(out.contains("oracle agreement"));
    assert!(out.contains("family ordering"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("kc_summary.json")).unwrap()).unwrap();
    let digest = summary["config_digest"].as_str().unwrap().to_string();
    assert!(summary["data"]["oracle"]["spearman"].is_number());

    assert_eq!(
        manifest_commands(&run),
        ["train", "eval fixed", "eval variable", "eval threshold", "kc"]
    );
    let training: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("training.json")).unwrap()).unwrap();
    assert_eq!(training["config_digest"].as_str().unwrap(), digest);
}

#[test]
fn checkpoint_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.toml", "");
    let run = dir.path().join("run");
    assert_ok(&karl(&["train", "--config", s(&cfg), "--out", s(&run)]));

    let other = write_config(dir.path(), "other.toml", "mlp_ratio = 3\n");
    let mismatch = karl(&["eval", "--config", s(&other), "--checkpoint", s(&run)]);
    assert_eq!(mismatch.status.code(), Some(6));
    let absent = karl(&["eval", "--checkpoint", s(&dir.path().join("nowhere"))]);
    assert_eq!(absent.status.code(), Some(6));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let data = karl(&["eval", "--checkpoint", s(&run), "--dataset", s(&empty)]);
    assert_eq!(data.status.code(), Some(5));
}

#[test]
fn deterministic_mode_is_reproducible_and_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.toml", "seed = 5\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_ok(&karl(&["train", "--config", s(&cfg), "--out", s(&a)]));
    assert_ok(&karl_env(
        &["train", "--config", s(&cfg), "--out", s(&b)],
        &[("KARL_DETERMINISTIC", "1")],
    ));
    assert_eq!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(b.join("model.json")).unwrap()
    );

    assert_ok(&karl_env(
        &["train", "--config", s(&cfg), "--out", s(&c)],
        &[("KARL_DETERMINISTIC", "0")],
    ));
    let recorded = fs::read_to_string(c.join("config.toml")).unwrap();
    let seed_line = recorded.lines().find(|l| l.starts_with("seed =")).unwrap();
    assert_ne!(seed_line, "seed = 5");
    // the recorded config reproduces the run
    let again = dir.path().join("d");
    assert_ok(&karl(&[
        "train",
        "--config",
        s(&c.join("config.toml")),
        "--out",
        s(&again),
    ]));
    assert_eq!(
        fs::read(c.join("model.json")).unwrap(),
        fs::read(again.join("model.json")).unwrap()
    );
}

#[test]
fn sweep_writes_cells_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "micro.toml", "");
    let run = dir.path().join("sweep_run");
    let args = [
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--small",
        "8x1",
        "--large",
        "12x1",
    ];
    let first = karl(&args);
    assert_ok(&first);
    for cell in ["small-small", "small-large", "large-small", "large-large"] {
        assert!(run.join("sweep").join(cell).join("model.json").is_file(), "{cell}");
        assert!(run.join("sweep").join(cell).join("result.json").is_file(), "{cell}");
    }
    let curves = fs::read_to_string(run.join("sweep/curves.csv")).unwrap();
    assert!(curves.contains(",fixed,") && curves.contains(",variable,"));
    assert!(stdout(&first).contains("matched tokens"));
    assert!(run.join("sweep_curves.svg").is_file());

    let stamp = fs::metadata(run.join("sweep/small-large/model.json"))
        .unwrap()
        .modified()
        .unwrap();
    assert_ok(&karl(&args));
    let after = fs::metadata(run.join("sweep/small-large/model.json"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, after, "a finished cell was retrained");
    assert_eq!(manifest_commands(&run), ["sweep", "sweep"]);
}

#[test]
fn smoke_config_trains_within_five_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let start = Instant::now();
    let out = karl(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("smoke"))]);
    assert_ok(&out);
    assert!(start.elapsed() < Duration::from_secs(300), "took {:?}", start.elapsed());
    assert!(stdout(&out).contains("trained 200 iterations"));
    assert!(stdout(&out).contains("curriculum violations 0"));
}
