use std::process::Command;

fn rankroute() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rankroute"))
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 1\nnot_a_key = true\n").unwrap();
    let status = rankroute().args(["eval", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_flag_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rankroute().args(["compress", "--ratio", "1.5", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = rankroute().args(["observe", "--figure", "fig9", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_stage_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = rankroute().args(["build-cache", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("compress"));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = rankroute().args(["show-config", "--seed", "42", "--psi", "0.5", "--gqa"]).output().unwrap();
    assert!(out.status.success());
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let again = rankroute().args(["show-config", "--config"]).arg(&path).output().unwrap();
    assert!(again.status.success());
    let text = String::from_utf8(again.stdout).unwrap();
    assert!(text.contains("seed = 42"));
    assert!(text.contains("psi = 0.5"));
}
