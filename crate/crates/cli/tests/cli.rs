use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gammanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gammanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
name = "small_wave"
steps = 2000
probes = [1.0, 10.0, 100.0]

[environment]
kind = "square_wave"

[timescales]
n_gamma = 2
n_tau = 2
tau_integer = false

[learner]
family = "linear"
tilings = [[8, 1.0], [8, 0.5]]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_every_seed_and_an_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = gammanet(&["run", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = listing(&out);
    assert_eq!(files.len(), 6 * 4 + 2, "{files:?}");
    for seed in 0..6 {
        for ext in ["metrics.csv", "predictions.csv", "curve.csv", "summary.json"] {
            let suffix = format!("-seed{seed}.{ext}");
            assert!(files.iter().any(|f| f.ends_with(&suffix)), "missing {suffix}");
        }
    }
    assert!(files.iter().any(|f| f.ends_with(".aggregate.csv")));
    let metrics = files.iter().find(|f| f.ends_with("seed0.metrics.csv")).unwrap();
    let text = fs::read_to_string(out.join(metrics)).unwrap();
    assert!(text.starts_with("series,tau,mse_mean,mse_var,norm_mse,norm_var,corr"), "{text}");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn seeds_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = gammanet(&["run", &cfg, "--seeds", "3,5", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = listing(&out);
    assert_eq!(files.len(), 2 * 4 + 2, "{files:?}");
    assert!(files.iter().any(|f| f.contains("-seed5.")));
}

#[test]
fn dry_run_validates_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = gammanet(&["run", &cfg, "--dry-run", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("config ok"));
    assert!(!out.exists());
}

#[test]
fn unknown_field_is_reported_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("steps = 2000", "steps = 2000\nstep_count = 4"));
    let o = gammanet(&["run", &cfg, "--dry-run"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("invalid config") && err.contains("step_count"), "{err}");
}

#[test]
fn missing_config_fails_cleanly() {
    let o = gammanet(&["run", "/nonexistent/exp.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn compare_joins_metrics_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut metrics = Vec::new();
    for (i, mode) in ["both", "gamma_only"].iter().enumerate() {
        let text = format!("{SMALL}\n[input]\nmode = \"{mode}\"\n").replace("small_wave", &format!("wave_{mode}"));
        let path = tmp.path().join(format!("c{i}.toml"));
        fs::write(&path, text).unwrap();
        let o = gammanet(&["run", path.to_str().unwrap(), "--seeds", "0", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        metrics.push(
            stdout(&o)
                .lines()
                .find(|l| l.ends_with(".metrics.csv"))
                .unwrap()
                .to_string(),
        );
    }
    let table = tmp.path().join("compare.csv");
    let o = gammanet(&["compare", &metrics[0], &metrics[1], "-o", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let rows = fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    assert!(table.with_extension("bars.csv").exists());
}

#[test]
fn oracle_prints_values_per_probe() {
    let cfg = configs().join("mdp_oracle.toml");
    let o = gammanet(&["oracle", "mdp", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tau,gamma,s0,s1,s2,s3,s4");
    assert_eq!(lines.len(), 4);
    // tau = 1 values are the expected immediate cumulants
    let first: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(first[1], 0.0);
    assert!((first[2] - (0.5 - 0.3)).abs() < 1e-12);
}

#[test]
fn oracle_rejects_non_mdp_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = gammanet(&["oracle", "mdp", &cfg]);
    assert!(!o.status.success());
}

#[test]
fn probes_and_interp_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("interpolation_baseline.toml");
    for cmd in ["probes", "interp"] {
        let o = gammanet(&[cmd, cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let path = stdout(&o).lines().next().unwrap().to_string();
        assert!(path.ends_with(&format!(".{cmd}.csv")), "{path}");
        assert!(fs::read_to_string(path).unwrap().lines().count() > 1);
    }
}
