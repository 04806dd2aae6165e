use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data_root=data
run_dir=run
resolution=32
train_live=4
train_spoof=4
dev_live=2
dev_spoof=2
test_live=2
test_spoof=2
devices=2
seed=7
";

fn dfas(config: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dfas"));
    cmd.arg("-c").arg(config).args(args).env_remove("LD_SEED");
    if let Some(s) = seed {
        cmd.env("LD_SEED", s);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_config_file_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfas(&dir.path().join("nope.cfg"), &["gen-data"], None);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_key_and_bad_value_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfas(&write_config(dir.path(), &format!("{TINY}colour=blue\n")), &["gen-data"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = dfas(&write_config(dir.path(), "batch_size=three\n"), &["train"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_seeded_and_echoes_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dfas(&cfg, &["gen-data"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("# resolved config"));
    assert!(stdout.lines().any(|l| l == "seed=7"));
    let manifest = dir.path().join("data/train/manifest.csv");
    let first = std::fs::read(&manifest).unwrap();

    let again = dfas(&cfg, &["gen-data"], None);
    assert!(again.status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), first);

    let reseeded = dfas(&cfg, &["gen-data"], Some("8"));
    assert!(String::from_utf8_lossy(&reseeded.stdout).lines().any(|l| l == "seed=8"));
}

#[test]
fn eval_without_a_checkpoint_and_with_a_corrupt_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(dfas(&cfg, &["gen-data"], None).status.success());
    assert_eq!(dfas(&cfg, &["eval"], None).status.code(), Some(4));

    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("final.safetensors"), b"not a checkpoint").unwrap();
    assert_eq!(dfas(&cfg, &["eval"], None).status.code(), Some(3));
}
