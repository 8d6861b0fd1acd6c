use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recycle-tn"))
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn polarized_2d_run_prints_exact_values() {
    let dir = std::env::temp_dir().join(format!("recycle_tn_cli_{}", std::process::id()));
    let out = bin()
        .args(["run", "--model", "ising2d", "--h", "0", "--bond-d", "2", "--steps", "10"])
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    assert!((field(&line, "energy") + 1.0).abs() < 1e-6, "{line}");
    assert!((field(&line, "mz") - 1.0).abs() < 1e-6, "{line}");
    let log = std::fs::read_to_string(dir.join("log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "step,i_re,n_re,energy,mz,truncation_weight,wall_seconds,ctm_sweeps,cost_final"
    );
    assert!(dir.join("summary.json").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_errors_exit_with_code_two() {
    let out = bin()
        .args(["run", "--model", "ising1d", "--h", "1.0", "--chi", "0", "--steps", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`chi`"));

    let out = bin().args(["run", "--model", "heisenberg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_sweep_succeeds_with_header_only() {
    let out = bin()
        .args(["sweep", "--model", "ising1d", "--h", "", "--steps", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn flags_override_config_file() {
    let dir = std::env::temp_dir().join(format!("recycle_tn_cfg_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "model = ising1d\nh = 1.0\nchi = 0\ntime = 1.0\ndelta = 0.05\n").unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(["--chi", "4", "--steps", "20"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(&dir).unwrap();
}
