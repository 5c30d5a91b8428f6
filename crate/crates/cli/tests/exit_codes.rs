use std::process::{Command, Output};

fn hdt(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdt"))
        .args(args)
        .current_dir(dir)
        .env_remove("HDT_THREADS")
        .output()
        .expect("binary runs")
}

#[test]
fn help_and_version_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hdt(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(hdt(&["--version"], tmp.path()).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[acquisition]\nacceleration = 4.0\n").unwrap();
    for args in [
        &[][..],
        &["frobnicate"],
        &["simulate", "--config", "missing.toml"],
        &["simulate", "--config", "bad.toml"],
        &["simulate", "--af", "0.5"],
        &["recon", "--variant", "spice"],
        &["report"],
    ] {
        let out = hdt(args, tmp.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_thread_cap_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hdt"))
        .args(["simulate"])
        .current_dir(tmp.path())
        .env("HDT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_prints_its_directory_and_records_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hdt(&["simulate", "--out", "r", "--seed", "5", "--af", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = String::from_utf8(out.stdout).unwrap();
    assert_eq!(dir.trim(), "r/data/af2");
    let cfg = hdt_cli::config::RunConfig::load(&tmp.path().join("r/data/af2/config.toml")).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.acquisition.af, 2.0);
}

#[test]
fn numerical_failure_exits_with_two() {
    use hdt::generator::{save_checkpoint, Generator, GeneratorConfig, OutputKind};
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), "[phantom]\nsize = 16\n[acquisition]\naf = 2.0\n[generator]\nd_lat = 8\nbase = 4\n").unwrap();
    let base = ["--config", "small.toml", "--out", "r"];
    assert_eq!(hdt(&[&["simulate"][..], &base].concat(), tmp.path()).status.code(), Some(0));
    let mut g = Generator::new(GeneratorConfig::new(16, 8, 4, OutputKind::Magnitude), 1).unwrap();
    let poisoned = vec![f64::NAN; g.params().len()];
    g.set_params(&poisoned).unwrap();
    std::fs::create_dir_all(tmp.path().join("r/train")).unwrap();
    save_checkpoint(&g, &tmp.path().join("r/train/generator.hdc")).unwrap();
    let out = hdt(&[&["adapt"][..], &base].concat(), tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
