use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "batch_size=4",
    "conv1_channels=8",
    "conv2_channels=8",
    "features=16",
    "embed_dim=8",
    "bank_size=128",
    "iterations=4",
    "probe_iterations=40",
    "probe_train_strips=20",
    "probe_eval_strips=10",
    "probe_batch=8",
];

fn rclstr(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rclstr"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("RCLSTR_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn tiny<'c>(cmd: &'c mut Command, out: &Path) -> &'c mut Command {
    cmd.arg("--out").arg(out);
    for pair in TINY {
        cmd.args(["--set", pair]);
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = rclstr(&["pretrain", "--set", "nope=1"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("\"key\":\"nope\""), "{stderr}");

    let file = dir.path().join("partial.txt");
    std::fs::write(&file, "lr = 0.1\n").unwrap();
    let out = rclstr(&["pretrain", "--config"]).arg(&file).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing config key"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(rclstr(&["gradcheck", "--out"]).arg(dir.path()));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(!table.contains("FAIL"));
    assert!(table.contains("PASS"));
    assert!(dir.path().join("gradcheck.txt").exists());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    run(tiny(&mut rclstr(&["gen-data", "--count", "16"]), &data_dir));
    let dataset = data_dir.join("dataset.rcld");
    let shown = run(rclstr(&["inspect"]).arg(&dataset));
    assert!(String::from_utf8_lossy(&shown.stdout).contains("strips 16"));

    let train_dir = dir.path().join("train");
    run(tiny(rclstr(&["pretrain", "--data"]).arg(&dataset), &train_dir));
    let ckpt = train_dir.join("final.rcl");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(train_dir.join("metrics.jsonl")).unwrap().lines().count(), 4);

    // every parameter array is listed exactly once
    let listing = String::from_utf8_lossy(&run(rclstr(&["inspect"]).arg(&ckpt)).stdout).into_owned();
    for name in rclstr::encoder::PARAM_NAMES {
        let key = format!("online.{name} ");
        assert_eq!(listing.matches(&key).count(), 1, "{key}");
    }

    let probe_dir = dir.path().join("probe");
    run(tiny(rclstr(&["probe", "--export", "--checkpoint"]).arg(&ckpt), &probe_dir));
    for file in ["probe.rcl", "report.json", "embeddings.csv", "config.txt"] {
        assert!(probe_dir.join(file).exists(), "{file}");
    }

    let eval_dir = dir.path().join("eval");
    run(tiny(rclstr(&["eval", "--checkpoint"]).arg(&ckpt).arg("--probe").arg(probe_dir.join("probe.rcl")), &eval_dir));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(probe_dir.join("report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(a, b);

    // a probe under a different pre-training config is refused
    let out = tiny(rclstr(&["probe", "--set", "tau_info=0.5", "--checkpoint"]).arg(&ckpt), &dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run(tiny(&mut rclstr(&["pretrain", "--seed", "7"]), &first));
    let snapshot = first.join("config.txt");
    let text = std::fs::read_to_string(&snapshot).unwrap();
    assert!(text.contains("seed = 7"));

    let second = dir.path().join("second");
    run(rclstr(&["pretrain", "--config"]).arg(&snapshot).arg("--out").arg(&second));
    assert_eq!(
        std::fs::read(first.join("final.rcl")).unwrap(),
        std::fs::read(second.join("final.rcl")).unwrap()
    );
}

#[test]
fn precedence_file_env_set_seed() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("base.txt");
    let text = rclstr::config::Config::default().to_file_text().replace("lr = 0.01", "lr = 0.5");
    std::fs::write(&file, text).unwrap();
    let read = |out: &Path| rclstr::config::Config::from_file_text(&std::fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();

    let a = dir.path().join("a");
    let mut cmd = rclstr(&["gradcheck", "--config"]);
    cmd.arg(&file).arg("--out").arg(&a).env("RCLSTR_LR", "0.25").env("RCLSTR_SEED", "3");
    run(&mut cmd);
    assert_eq!((read(&a).lr, read(&a).seed), (0.25, 3));

    let b = dir.path().join("b");
    let mut cmd = rclstr(&["gradcheck", "--set", "lr=0.125", "--set", "seed=4", "--seed", "5", "--config"]);
    cmd.arg(&file).arg("--out").arg(&b).env("RCLSTR_LR", "0.25");
    run(&mut cmd);
    assert_eq!((read(&b).lr, read(&b).seed), (0.125, 5));
}

#[test]
fn small_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(tiny(&mut rclstr(&["ablate", "--rows", "none", "--seeds", "0", "--random"]), dir.path()));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| random | 0 |") && table.contains("| none | 0 |"), "{table}");
    assert!(dir.path().join("none/seed_0/report.json").exists());

    let bad = rclstr(&["ablate", "--rows", "bogus"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn defaults_print_a_complete_config() {
    let out = run(&mut rclstr(&["inspect", "--defaults"]));
    let cfg = rclstr::config::Config::from_file_text(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(cfg, rclstr::config::Config::default());
}
