use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bwarea(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_bwarea"))
        .args(args)
        .current_dir(dir)
        .env("BWAREA_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
[paths]
corpus = "grammar.bin"
corpus_format = "binary"

[model]
d_model = 16
d_code = 8
n_codes = 8
n_heads = 2
ffn_hidden = 32
max_context = 32

[train]
seq_len = 32
batch_size = 4
bc_steps = 5
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    ok(&bwarea(dir.path(), &["toy", "grammar", "grammar.bin", "--size", "20000"], ""));
    dir
}

#[test]
fn pretrain1_smoke_writes_a_loadable_checkpoint() {
    let dir = setup();
    let out = ok(&bwarea(dir.path(), &["pretrain1", "--config", "run.toml", "--steps", "200"], ""));
    assert!(out.contains("checkpoint"));
    let ckpt = dir.path().join("checkpoints/pretrain1.bwa");
    let c = bwarea_core::checkpoint::Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.header.provenance.last().unwrap().steps, 200);
    assert!(dir.path().join("checkpoints/pretrain1.ndjson").exists());
    assert!(!dir.path().join("checkpoints/.lock").exists());

    let eval = ok(&bwarea(
        dir.path(),
        &["eval", "--config", "run.toml", "--checkpoint-in", "checkpoints/pretrain1.bwa"],
        "",
    ));
    assert!(eval.contains("cross"), "{eval}");
}

#[test]
fn stage_order_is_enforced_with_nonzero_exit() {
    let dir = setup();
    ok(&bwarea(dir.path(), &["pretrain1", "--config", "run.toml", "--steps", "2"], ""));
    let rl = bwarea(
        dir.path(),
        &["rl", "--config", "run.toml", "--checkpoint-in", "checkpoints/pretrain1.bwa", "--steps", "1"],
        "",
    );
    assert!(!rl.status.success());
    assert!(String::from_utf8_lossy(&rl.stderr).contains("--force"));
}

#[test]
fn bad_config_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbatch_size = 4\nlearning_speed = 2\n").unwrap();
    let o = bwarea(dir.path(), &["pretrain1", "--config", "bad.toml"], "");
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:3:"), "{err}");
}

#[test]
fn generate_and_probe_read_a_checkpoint() {
    let dir = setup();
    ok(&bwarea(dir.path(), &["pretrain1", "--config", "run.toml", "--steps", "3"], ""));
    ok(&bwarea(
        dir.path(),
        &["pretrain2", "--config", "run.toml", "--checkpoint-in", "checkpoints/pretrain1.bwa"],
        "",
    ));
    let args = ["--config", "run.toml", "--checkpoint-in", "checkpoints/pretrain2.bwa", "--steps", "4"];
    ok(&bwarea(dir.path(), &[&["generate"], &args[..]].concat(), ""));

    let out = ok(&bwarea(dir.path(), &[&["probe"], &args[..]].concat(), "the \n\n3\n99\nzz\nq\n"));
    assert_eq!(out.matches("action (enter").count(), 5, "{out}");
    assert!(out.contains("action 3 ->"), "{out}");
    assert!(out.contains("outside codebook"), "{out}");
    assert!(out.contains("not an action index: zz"), "{out}");
    assert!(out.lines().last().unwrap().starts_with("the "), "{out}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        bwarea_core::run::RunConfig::load(&entry.unwrap().path()).unwrap();
        n += 1;
    }
    assert!(n >= 2);
}
