use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use crfl_core::pipeline::SweepAxis;
use crfl_core::report;
use serde_json::{json, Value};
use tempfile::TempDir;

fn synthetic_config(seed: u64, out: &Path) -> Value {
    json!({
        "master_seed": seed,
        "dataset": {"kind": "synthetic", "n_train": 1000, "n_test": 150, "dim": 10, "classes": 3, "separation": 1.0},
        "federation": {"clients": 5, "rounds": 10, "eta": 0.05, "tau": 3, "batch_size": 20,
                       "rho": {"slope": 0.1, "intercept": 2.0}, "sigma": {"slope": 0.0, "intercept": 0.01}},
        "attack": {"attackers": 1, "t_adv": 3, "gamma": 5.0, "q_b": 2,
                   "pattern": {"indices": [0, 1], "values": [1.0, 1.0], "target_label": 0, "magnitude": 0.1}},
        "certify": {"m": 100, "sigma_t": 0.01, "r_grid": [0.0, 0.5, 1.0]},
        "output": {"dir": out, "emit_svg": true}
    })
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_config(&self, name: &str, cfg: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, cfg.to_string()).unwrap();
        p
    }

    fn write_raw(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }
}

fn crfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn crfl_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crfl"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn config_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn train_smoke_run_prints_accuracy() {
    let run = Run::new();
    let out = run.path("out");
    let cfg = run.write_config("c.json", &synthetic_config(1, &out));
    let start = Instant::now();
    let o = crfl(&["train", "--config", &config_arg(&cfg)]);
    assert_ok(&o);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let text = stdout(&o);
    assert!(text.contains("clean test accuracy"), "{text}");
    assert!(text.contains("attack success rate"), "{text}");
    assert!(out.join("model.bin").exists());
    let (kind, rows) = report::validate_csv(&out.join("trace.csv")).unwrap();
    assert_eq!((kind, rows), (report::CsvKind::Trace, 10));
}

#[test]
fn checkpoints_are_byte_identical_across_runs_and_thread_counts() {
    let run = Run::new();
    let mut models = Vec::new();
    for (i, threads) in ["1", "4", "1"].iter().enumerate() {
        let out = run.path(&format!("out{i}"));
        let cfg = run.write_config(&format!("c{i}.json"), &synthetic_config(2, &out));
        assert_ok(&crfl_env(
            &["train", "--config", &config_arg(&cfg)],
            "CRFL_THREADS",
            threads,
        ));
        models.push(fs::read(out.join("model.bin")).unwrap());
    }
    assert_eq!(models[0], models[1]);
    assert_eq!(models[0], models[2]);
}

#[test]
fn input_errors_exit_with_code_2() {
    let run = Run::new();
    let missing = run.write_raw(
        "missing.json",
        r#"{"dataset": {"kind": "mnist", "dir": "/nonexistent/mnist"}}"#,
    );
    assert_eq!(
        crfl(&["train", "--config", &config_arg(&missing)])
            .status
            .code(),
        Some(2)
    );
    let unknown = run.write_raw("unknown.json", r#"{"federation": {"clientz": 3}}"#);
    assert_eq!(
        crfl(&["train", "--config", &config_arg(&unknown)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        crfl(&["train", "--config", "/nonexistent/config.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(crfl(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        crfl_env(
            &["train", "--config", &config_arg(&unknown)],
            "CRFL_THREADS",
            "zero"
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn divergence_exits_with_code_3() {
    let run = Run::new();
    let mut text = synthetic_config(3, &run.path("out"));
    // noise of this size overflows the logits in the second round
    text["federation"]["sigma"] = json!({"slope": 0.0, "intercept": 1e308});
    text["federation"]["rho"] = json!({"slope": 0.0, "intercept": 1e308});
    let cfg = run.write_config("c.json", &text);
    let o = crfl(&["train", "--config", &config_arg(&cfg)]);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "stderr: {stderr}");
    assert!(stderr.contains("round"), "{stderr}");
}

fn train_then_certify(run: &Run, text: &Value, name: &str) -> Output {
    let cfg = run.write_config(name, text);
    assert_ok(&crfl(&["train", "--config", &config_arg(&cfg)]));
    crfl(&["certify", "--config", &config_arg(&cfg)])
}

#[test]
fn certify_writes_one_row_per_sample_and_a_curve() {
    let run = Run::new();
    let out = run.path("out");
    let mut text = synthetic_config(4, &out);
    text["certify"]["test_cap"] = json!(100);
    let o = train_then_certify(&run, &text, "c.json");
    assert_ok(&o);
    assert_eq!(
        report::read_samples_csv(&out.join("certify_samples.csv"))
            .unwrap()
            .len(),
        100
    );
    assert_eq!(
        report::read_curve_csv(&out.join("certify_curve.csv"))
            .unwrap()
            .len(),
        3
    );
    assert!(out.join("certify_curve.svg").exists());
    assert!(out.join("certify_curve.dat").exists());
}

#[test]
fn certified_rate_is_zero_beyond_the_critical_radius() {
    let run = Run::new();
    let out = run.path("out");
    let text = synthetic_config(5, &out);
    assert_ok(&train_then_certify(&run, &text, "c.json"));
    let samples = report::read_samples_csv(&out.join("certify_samples.csv")).unwrap();
    let r_max = samples.iter().map(|s| s.rad).fold(0.0, f64::max);
    assert!(r_max > 0.0 && r_max.is_finite());

    let mut again = text.clone();
    again["certify"]["r_grid"] = json!([0.0, 2.0 * r_max]);
    let cfg = run.write_config("c2.json", &again);
    assert_ok(&crfl(&["certify", "--config", &config_arg(&cfg)]));
    let curve = report::read_curve_csv(&out.join("certify_curve.csv")).unwrap();
    assert!(curve[0].certified_rate > 0.0);
    assert_eq!(curve[1].certified_rate, 0.0);
}

#[test]
fn zero_smoothing_noise_gives_unanimous_votes() {
    let run = Run::new();
    let out = run.path("out");
    let mut text = synthetic_config(6, &out);
    text["certify"]["sigma_t"] = json!(0.0);
    // the radius needs sigma at t_adv > 0, which the training noise provides
    assert_ok(&train_then_certify(&run, &text, "c.json"));
    let samples = report::read_samples_csv(&out.join("certify_samples.csv")).unwrap();
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|s| s.p_hat_a == 1.0 && s.p_hat_b == 0.0));
}

#[test]
fn certify_rejects_a_checkpoint_of_the_wrong_shape() {
    let run = Run::new();
    let out = run.path("out");
    let text = synthetic_config(7, &out);
    let cfg = run.write_config("c.json", &text);
    assert_ok(&crfl(&["train", "--config", &config_arg(&cfg)]));
    let mut wider = text.clone();
    wider["dataset"]["dim"] = json!(12);
    let cfg2 = run.write_config("c2.json", &wider);
    let ckpt = out.join("model.bin");
    let o = crfl(&[
        "certify",
        "--config",
        &config_arg(&cfg2),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_value_sweep_matches_train_then_certify() {
    let run = Run::new();
    let out = run.path("sweep");
    let text = synthetic_config(8, &out);
    let cfg = run.write_config("c.json", &text);
    assert_ok(&crfl(&[
        "sweep",
        "--config",
        &config_arg(&cfg),
        "--axis",
        "gamma",
        "--values",
        "5",
    ]));
    let sweep = fs::read_to_string(out.join("sweep_gamma.csv")).unwrap();
    assert!(out.join("sweep_gamma_summary.csv").exists());
    assert!(out.join("sweep_gamma.svg").exists());

    let seed = SweepAxis::Gamma.seed(8, 5.0);
    let single = run.path("single");
    let mut direct = synthetic_config(seed, &single);
    direct["attack"]["gamma"] = json!(5.0);
    assert_ok(&train_then_certify(&run, &direct, "d.json"));
    let curve = fs::read_to_string(single.join("certify_curve.csv")).unwrap();
    let sweep_rows: Vec<String> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1.to_string())
        .collect();
    let curve_rows: Vec<String> = curve.lines().skip(1).map(str::to_string).collect();
    assert_eq!(sweep_rows, curve_rows);
}

#[test]
fn gamma_sweep_orders_critical_radius() {
    let run = Run::new();
    let out = run.path("sweep");
    let cfg = run.write_config("c.json", &synthetic_config(9, &out));
    assert_ok(&crfl(&[
        "sweep",
        "--config",
        &config_arg(&cfg),
        "--axis",
        "gamma",
        "--values",
        "1,10",
    ]));
    let text = fs::read_to_string(out.join("sweep_gamma_summary.csv")).unwrap();
    let crit: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| report::parse_num(l.split(',').nth(1).unwrap()).unwrap())
        .collect();
    assert_eq!(crit.len(), 2);
    assert!(crit[1] > 0.0 && crit[1] < crit[0], "{crit:?}");
    assert_eq!(
        crfl(&[
            "sweep",
            "--config",
            &config_arg(&cfg),
            "--axis",
            "bogus",
            "--values",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );
}

fn closeness_distances(out: &Path) -> Vec<f64> {
    let text = fs::read_to_string(out.join("closeness.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| report::parse_num(l.split(',').nth(1).unwrap()).unwrap())
        .collect()
}

#[test]
fn closeness_trend_and_null_attack() {
    let run = Run::new();
    let out = run.path("out");
    let mut text = synthetic_config(10, &out);
    text["federation"]["rounds"] = json!(30);
    let cfg = run.write_config("c.json", &text);
    let o = crfl(&["closeness", "--config", &config_arg(&cfg)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("non-increasing true"), "{}", stdout(&o));
    assert_eq!(closeness_distances(&out).len(), 30);
    assert!(out.join("closeness.svg").exists());

    let null = run.path("null");
    let mut zero = synthetic_config(10, &null);
    zero["attack"]["gamma"] = json!(0.0);
    zero["attack"]["virtual_benign_scaling"] = json!(true);
    let cfg = run.write_config("z.json", &zero);
    assert_ok(&crfl(&["closeness", "--config", &config_arg(&cfg)]));
    assert!(closeness_distances(&null).iter().all(|d| *d == 0.0));

    let mut late = synthetic_config(10, &run.path("late"));
    late["attack"]["t_adv"] = json!(10);
    let cfg = run.write_config("l.json", &late);
    assert_eq!(
        crfl(&["closeness", "--config", &config_arg(&cfg)])
            .status
            .code(),
        Some(2)
    );
}

fn radius(args: &[&str]) -> (f64, bool) {
    let mut all = vec!["radius-calc"];
    all.extend_from_slice(args);
    let o = crfl(&all);
    assert_ok(&o);
    let text = stdout(&o);
    let parts: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(parts[0], "RAD");
    assert_eq!(parts[2], "saturated");
    (parts[1].parse().unwrap(), parts[3] == "true")
}

#[test]
fn radius_calc_matches_the_pinned_mnist_value() {
    let (rad, saturated) = radius(&["--p-a", "0.7", "--p-b", "0.1"]);
    assert!(
        ((rad - 1.285_160_038_777_745_4) / rad).abs() < 1e-9,
        "{rad}"
    );
    assert!(saturated);
}

#[test]
fn radius_calc_halves_when_gamma_doubles() {
    let base = [
        "--p-a",
        "0.8",
        "--p-b",
        "0.1",
        "--rho-slope",
        "0",
        "--rho-intercept",
        "0.02",
    ];
    let (r10, _) = radius(&[&base[..], &["--gamma", "10"]].concat());
    let (r20, _) = radius(&[&base[..], &["--gamma", "20"]].concat());
    assert_eq!(r10, 2.0 * r20);
}

#[test]
fn radius_calc_refuses_without_a_gap() {
    let o = crfl(&["radius-calc", "--p-a", "0.5", "--p-b", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = crfl(&[
        "radius-calc",
        "--p-a",
        "0.7",
        "--p-b",
        "0.1",
        "--t-adv",
        "200",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
