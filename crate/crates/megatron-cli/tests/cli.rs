//! Behavioural tests of the `megatron` binary: exit codes, dry runs,
//! overwrite safety, artifact integrity, and stage chaining.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_megatron"))
}

fn micro_toml() -> String {
    r#"
seed = 7
target_label = 1

[dataset]
classes = [0, 1]
train_per_class = 16
test_per_class = 6

[surrogate_model]
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
mlp_ratio = 2

[victim_model]
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
mlp_ratio = 2

[surrogate_train]
epochs = 1
learning_rate = 0.1
batch_size = 8

[victim_train]
epochs = 1
learning_rate = 0.1
batch_size = 8

[trigger]
width = 4
height = 4
top = 4
left = 4
max_iters = 2
lr = 0.01

[poison]
steps = 2
lr = 0.1
poison_count = 4
k = 2

[poison.mode]
kind = "one-to-one"
source_label = 0

[evaluation]
sub_trigger_index = 0
shifts = [0]
"#
    .to_string()
}

struct Env {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    root: PathBuf,
}

fn setup() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, micro_toml()).unwrap();
    let root = tmp.path().to_path_buf();
    Env {
        _tmp: tmp,
        config,
        root,
    }
}

fn run_cmd(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let out = run_cmd(&[
        "run",
        "--config",
        "/no/such/config.toml",
        "--out",
        "/tmp/never",
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/config.toml"), "{err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let env = setup();
    std::fs::write(&env.config, "not_a_real_key = 1\n").unwrap();
    let out = run_cmd(&[
        "run",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        env.root.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_real_key"));
}

#[test]
fn dry_run_prints_config_and_writes_nothing() {
    let env = setup();
    let out_dir = env.root.join("dry");
    let out = run_cmd(&[
        "run",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dry-run",
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("schema_version = 1"));
    assert!(stdout.contains("[trigger]"));
    assert!(!out_dir.exists(), "dry run must not create the out dir");
}

#[test]
fn evaluate_without_artifacts_exits_3_and_names_artifact() {
    let env = setup();
    let out_dir = env.root.join("empty");
    let out = run_cmd(&[
        "evaluate",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("victim"), "{err}");
}

fn full_chain(env: &Env, out_dir: &Path) {
    for cmd in [
        "train-surrogate",
        "gen-trigger",
        "poison",
        "train-victim",
        "evaluate",
    ] {
        let out = run_cmd(&[
            cmd,
            "--config",
            env.config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            code(&out),
            0,
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn staged_chain_produces_report_matching_one_shot() {
    let env = setup();
    let staged = env.root.join("staged");
    full_chain(&env, &staged);
    assert!(staged.join("report.json").exists());

    let oneshot = env.root.join("oneshot");
    let out = run_cmd(&[
        "run",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        oneshot.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let a = std::fs::read_to_string(staged.join("report.json")).unwrap();
    let b = std::fs::read_to_string(oneshot.join("report.json")).unwrap();
    assert_eq!(a, b, "staged and one-shot reports differ");

    // The summary table reaches stdout on evaluate/run.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cda"));
    assert!(stdout.contains("sasr"));
}

#[test]
fn rerun_into_nonempty_dir_without_force_exits_4() {
    let env = setup();
    let out_dir = env.root.join("busy");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join("leftover.txt"), "x").unwrap();
    let out = run_cmd(&[
        "run",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn stage_refuses_to_overwrite_own_output_without_force() {
    let env = setup();
    let out_dir = env.root.join("twice");
    let args = [
        "train-surrogate",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    assert_eq!(code(&run_cmd(&args)), 0);
    assert_eq!(code(&run_cmd(&args)), 4);
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&run_cmd(&forced)), 0);
}

#[test]
fn corrupted_upstream_artifact_exits_3() {
    let env = setup();
    let out_dir = env.root.join("corrupt");
    let surrogate_args = [
        "train-surrogate",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    assert_eq!(code(&run_cmd(&surrogate_args)), 0);
    // Tamper with the checkpoint.
    let ckpt = out_dir.join("surrogate.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = run_cmd(&[
        "gen-trigger",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn changed_config_in_same_run_dir_is_rejected() {
    let env = setup();
    let out_dir = env.root.join("mismatch");
    assert_eq!(
        code(&run_cmd(&[
            "train-surrogate",
            "--config",
            env.config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])),
        0
    );
    // Different seed -> different resolved config -> refuse to continue.
    let out = run_cmd(&[
        "gen-trigger",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "999",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn seed_override_changes_artifacts() {
    let env = setup();
    let a = env.root.join("seed_a");
    let b = env.root.join("seed_b");
    for (dir, seed) in [(&a, "7"), (&b, "8")] {
        let out = run_cmd(&[
            "train-surrogate",
            "--config",
            env.config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&out), 0);
    }
    let ha = std::fs::read(a.join("surrogate.ckpt")).unwrap();
    let hb = std::fs::read(b.join("surrogate.ckpt")).unwrap();
    assert_ne!(ha, hb);

    // Same seed twice gives identical checkpoint bytes.
    let c = env.root.join("seed_c");
    let out = run_cmd(&[
        "train-surrogate",
        "--config",
        env.config.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0);
    let hc = std::fs::read(c.join("surrogate.ckpt")).unwrap();
    assert_eq!(ha, hc);
}

#[test]
fn gen_trigger_zero_iters_reproduces_seeded_init() {
    let env = setup();
    // E = 0: the trigger file equals the seeded initialization.
    let toml = micro_toml().replace("max_iters = 2", "max_iters = 0");
    std::fs::write(&env.config, toml).unwrap();
    let d1 = env.root.join("t1");
    let d2 = env.root.join("t2");
    for d in [&d1, &d2] {
        for cmd in ["train-surrogate", "gen-trigger"] {
            let out = run_cmd(&[
                cmd,
                "--config",
                env.config.to_str().unwrap(),
                "--out",
                d.to_str().unwrap(),
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    let p1 = std::fs::read(d1.join("trigger/pattern.png")).unwrap();
    let p2 = std::fs::read(d2.join("trigger/pattern.png")).unwrap();
    assert_eq!(p1, p2);
}
