use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn orwdro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orwdro")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn rwp_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let mu = write(dir.path(), "mu.csv", "0\n1\n");
    let nu = write(dir.path(), "nu.csv", "0\n3\n");
    assert_eq!(stdout(&orwdro(&["rwp", "--mu", &mu, "--nu", &nu])).trim(), "1.000000000");
    let v: f64 = stdout(&orwdro(&["rwp", "--mu", &mu, "--nu", &nu, "--eps", "0.5"]))
        .trim()
        .parse()
        .unwrap();
    assert!(v.abs() < 1e-9);

    let six = write(dir.path(), "six.csv", "1\n2\n3\n4\n5\n6\n");
    assert_eq!(stdout(&orwdro(&["mean", "--data", &six])).trim(), "3.500000000");
}

#[test]
fn eval_fit_and_worst_case() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "line.csv", "# transported: 1,1\n1,1\n2,2\n-1,-1\n");
    let common = ["--data", &data, "--loss", "mad", "--rho", "0.1"];

    let dump = dir.path().join("dual.txt");
    let mut args = vec!["eval"];
    args.extend(common);
    args.extend(["--theta", "1", "--dump", dump.to_str().unwrap()]);
    let v: f64 = stdout(&orwdro(&args)).trim().parse().unwrap();
    assert!((v - 0.1 * 2f64.sqrt()).abs() < 1e-6, "{v}");
    assert!(fs::read_to_string(&dump).unwrap().starts_with("conic-program\n"));

    let mut args = vec!["fit"];
    args.extend(common);
    let text = stdout(&orwdro(&args));
    let theta: f64 = text.lines().next().unwrap().trim_start_matches("theta = ").parse().unwrap();
    assert!((theta - 1.0).abs() < 1e-3, "{text}");

    let out = dir.path().join("nu.csv");
    let mut args = vec!["worst-case"];
    args.extend(common);
    args.extend(["--eps", "0.2", "--sigma", "5", "--theta", "1", "--out", out.to_str().unwrap()]);
    stdout(&orwdro(&args));
    let text = fs::read_to_string(&out).unwrap();
    let total: f64 = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| l.rsplit(',').next()?.trim().parse::<f64>().ok())
        .sum();
    assert!((total - 1.0).abs() < 1e-6, "{text}");
}

#[test]
fn simulate_then_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    stdout(&orwdro(&[
        "simulate",
        "--task",
        "regression",
        "--n",
        "12",
        "--d",
        "3",
        "--seed",
        "2",
        "--out-dir",
        sim.to_str().unwrap(),
    ]));
    for f in ["clean.csv", "corrupted.csv", "meta.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 2);

    let cfg = write(
        dir.path(),
        "cfg.txt",
        "grid_values = 8\nd = 3\ntrials = 2\nbootstrap = 10\nmethods = wdro; orwdro-g2\n",
    );
    let out = dir.path().join("out");
    stdout(&orwdro(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.starts_with("grid,method,mean,q10,q90,bound,status,walltime_ms\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("results.dat").exists() && out.join("meta.json").exists());
}

#[test]
fn errors_exit_nonzero() {
    let o = orwdro(&["mean", "--data", "/nonexistent/data.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.txt", "grid_values = 8\ntrials = 1\n");
    let o = orwdro(&["experiment", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
