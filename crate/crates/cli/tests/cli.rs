use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 5
[data]
n_traj = 20
nx = 32
ny = 32
cutoff = 4.0
[pod]
ks = [8]
max_modes = 16
[diffusion]
t_total = 200
hidden = 32
blocks = 2
embed = 16
batch = 32
epochs = 5
steps = 20
members = 8
[metrics]
cases = 4
sweep_sizes = [4, 8]
"#;

fn podsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_podsr"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("smoke.toml");
    std::fs::write(&cfg, SMOKE).unwrap();
    (
        cfg.to_string_lossy().into_owned(),
        dir.join("run").to_string_lossy().into_owned(),
    )
}

#[test]
fn show_config_echoes_effective_values() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let o = podsr(&["show-config", "--config", &cfg, "--seed", "11"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 11"));
    assert!(text.contains("n_traj = 20"));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[diffusion]\nlearning_rate = 1.0\n").unwrap();
    let o = podsr(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&bad, "[pod]\neta = 1.5\n").unwrap();
    assert_eq!(
        code(&podsr(&["show-config", "--config", bad.to_str().unwrap()])),
        2
    );
}

#[test]
fn missing_prerequisite_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let o = podsr(&["fit-pod", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn truncated_artifact_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    assert_eq!(
        code(&podsr(&["gen-data", "--config", &cfg, "--out", &out])),
        0
    );
    let path = Path::new(&out).join("data/train_hr.fst");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let o = podsr(&["fit-pod", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_commands_match_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let full = dir.path().join("full").to_string_lossy().into_owned();
    assert_eq!(code(&podsr(&["run", "--config", &cfg, "--out", &full])), 0);
    for args in [
        vec!["gen-data"],
        vec!["fit-pod"],
        vec!["train", "--method", "podiff", "--k", "8"],
        vec!["sample", "--method", "podiff", "--k", "8"],
        vec!["evaluate", "--method", "podiff", "--k", "8"],
    ] {
        let mut a = args.clone();
        a.extend(["--config", &cfg, "--out", &out]);
        let o = podsr(&a);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for rel in [
        "train/podiff_k8.ckpt",
        "sample/podiff_k8/latent.fst",
        "eval/podiff_k8/metrics.csv",
    ] {
        let a = std::fs::read(Path::new(&full).join(rel)).unwrap();
        let b = std::fs::read(Path::new(&out).join(rel)).unwrap();
        assert!(a == b, "{rel} differs");
    }
}
