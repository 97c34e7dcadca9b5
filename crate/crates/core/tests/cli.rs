use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::NaiveDate;
use green_contract::calibration::{business_days, synthetic_affine_series, synthetic_ou, AffineFit, OuParams};
use green_contract::config::RunConfig;
use green_contract::contract::replication_positions;
use green_contract::linalg::SymMatrix;
use green_contract::model::presets::reference_market;
use green_contract::model::AffineCoeff;
use green_contract::principal::AveragedContract;
use green_contract::rng::normal_block;
use nalgebra::DVector;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_green-contract"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn optimize(cfg: &str, out: &Path, extra: &[&str]) -> serde_json::Value {
    let c = config(cfg);
    let mut args = vec!["optimize", "--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    json(&out.join("summary.json"))
}

fn green_holding(summary: &serde_json::Value) -> f64 {
    summary["nodes"][0]["pi"][0].as_f64().unwrap()
}

#[test]
fn optimize_reference_has_positive_portfolio_incentive() {
    let dir = TempDir::new().unwrap();
    let s = optimize("reference.toml", dir.path(), &[]);
    assert_eq!(s["y0"].as_f64(), Some(0.0));
    for node in s["nodes"].as_array().unwrap() {
        assert!(node["z"][0].as_f64().unwrap() > 0.0);
        assert!(node["script_h"].as_f64().is_some());
    }
    let csv = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.contains(&format!("config_hash={}", s["config_hash"].as_str().unwrap())));
    assert!(first.contains("seed=42"));
}

#[test]
fn green_target_raises_green_holding() {
    let dir = TempDir::new().unwrap();
    let reference = optimize("reference.toml", &dir.path().join("a"), &[]);
    let target = optimize("green_target.toml", &dir.path().join("b"), &[]);
    assert!(green_holding(&target) > green_holding(&reference));
}

#[test]
fn overrides_reach_the_solver() {
    let dir = TempDir::new().unwrap();
    let reference = optimize("reference.toml", &dir.path().join("a"), &[]);
    let over = optimize("reference.toml", &dir.path().join("b"), &["--set", "government.targets=[3.0]", "--set", "government.kappa=0.8"]);
    let target = optimize("green_target.toml", &dir.path().join("c"), &[]);
    assert_eq!(green_holding(&over), green_holding(&target));
    assert_ne!(over["config_hash"], reference["config_hash"]);
}

#[test]
fn negative_kappa_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let c = config("reference.toml");
    let o = run(&["optimize", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--set", "government.kappa=-0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kappa"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    optimize("reference.toml", &a, &[]);
    optimize("reference.toml", &b, &[]);
    for f in ["schedule.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = config("reference.toml");
    for out in [&a, &b] {
        let o = run(&[
            "compare-tax",
            "--config",
            c.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--schedule",
            out.join("schedule.csv").to_str().unwrap(),
            "--set",
            "run.n_paths=200",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(a.join("compare_tax.csv")).unwrap(), std::fs::read(b.join("compare_tax.csv")).unwrap());
}

#[test]
fn compare_tax_difference_grows_over_time() {
    let dir = TempDir::new().unwrap();
    let c = config("reference.toml");
    let o = run(&["compare-tax", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--set", "run.n_paths=2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("compare_tax.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "t,mean_diff,rel_diff_pct,std_err");
    let diffs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(diffs.len(), 101);
    let tenths: Vec<f64> = diffs.iter().step_by(10).copied().collect();
    assert!(tenths.windows(2).all(|w| w[1] > w[0]), "{tenths:?}");
}

#[test]
fn downstream_commands_reject_a_foreign_schedule() {
    let dir = TempDir::new().unwrap();
    optimize("green_target.toml", dir.path(), &[]);
    let c = config("reference.toml");
    let sched = dir.path().join("schedule.csv");
    for cmd in ["simulate", "compare-tax", "replicate"] {
        let o = run(&[cmd, "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--schedule", sched.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("design hash"), "{}", stderr(&o));
    }
}

#[test]
fn simulate_accepts_a_schedule_under_new_sampling_settings() {
    let dir = TempDir::new().unwrap();
    optimize("reference.toml", dir.path(), &[]);
    let c = config("reference.toml");
    let sched = dir.path().join("schedule.csv");
    let o = run(&[
        "simulate",
        "--config",
        c.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--schedule",
        sched.to_str().unwrap(),
        "--set",
        "run.n_paths=400",
        "--set",
        "run.seed=5",
        "--write-bundle",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = json(&dir.path().join("simulate.json"));
    assert_eq!(s["seed"].as_u64(), Some(5));
    assert_eq!(s["n_paths"].as_u64(), Some(400));
    assert!(s["agent_value"]["z_score"].as_f64().unwrap() < 4.0);
    let bundle = green_contract::mc::read_bundle(std::fs::File::open(dir.path().join("bundle.bin")).unwrap()).unwrap();
    assert_eq!((bundle.n_paths, bundle.n_steps, bundle.seed), (400, 100, 5));
}

#[test]
fn replicate_writes_hash_and_positions() {
    let dir = TempDir::new().unwrap();
    let c = config("reference.toml");
    let o = run(&["replicate", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&dir.path().join("replication.json"));
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["seed"].as_u64(), Some(42));
    assert!(r["coupon"].as_f64().is_some());
    assert!(!r["positions"].as_array().unwrap().is_empty());
}

#[test]
fn zero_averaged_contract_is_coupon_only() {
    let model = reference_market();
    let avg = AveragedContract {
        z_bar: DVector::zeros(3),
        g_bar: SymMatrix::zeros(3),
        coupon_integral: 0.25,
        y0: 0.0,
        responses: vec![(0.0, DVector::from_element(4, 0.2), 0.0), (1.0, DVector::from_element(4, 0.2), 0.0)],
    };
    let report = replication_positions(&model, &avg, &DVector::from_element(4, 0.2), 1.0);
    let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(v["positions"].as_array().unwrap().len(), 0);
    assert_eq!(v["coupon"].as_f64(), Some(-0.25));
}

#[test]
fn hjb_degenerate_config_prints_policy_match() {
    let dir = TempDir::new().unwrap();
    let c = config("hjb_degenerate.toml");
    let o = run(&[
        "hjb",
        "--config",
        c.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "hjb.steps={ time = 4, x = 12, w_g = 6, r = 0, w_i = 6 }",
        "--set",
        "hjb.n_paths=20",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("policy match"), "{text}");
    assert!(text.contains("PASS"), "{text}");
    let s = json(&dir.path().join("hjb.json"));
    assert_eq!(s["policy_match"]["pass"].as_bool(), Some(true));
    let sol = green_contract::hjb::read_solution(std::fs::File::open(dir.path().join("hjb.bin")).unwrap()).unwrap();
    assert_eq!(sol.grid.shape(), [13, 7, 1, 7]);
    let slice = std::fs::read_to_string(dir.path().join("hjb_slice.csv")).unwrap();
    assert!(slice.lines().next().unwrap().contains("command=hjb"));
}

#[test]
fn hjb_without_section_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let c = config("reference.toml");
    let o = run(&["hjb", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[hjb]"));
}

#[test]
fn exit_codes_distinguish_io_and_usage() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = run(&["optimize", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&["optimize"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[market]\nhorizon = \"soon\"\n").unwrap();
    let o = run(&["optimize", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let c = config("reference.toml");
    let args = ["optimize", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--set", "run.grid_m=2"];
    let o = bin().env("GREEN_CONTRACT_THREADS", "1").args(args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bin().env("GREEN_CONTRACT_THREADS", "zero").args(args).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GREEN_CONTRACT_THREADS"));
}

struct Synthetic {
    ticker: &'static str,
    maturity: f64,
    amount: f64,
    fit: AffineFit,
}

fn synthetic_bonds() -> Vec<Synthetic> {
    let fit = |r: f64, v: f64, vb: f64| AffineFit {
        rate: AffineCoeff::new(r, 0.001),
        premium: AffineCoeff::ZERO,
        vol: AffineCoeff::new(v, vb),
    };
    vec![
        Synthetic { ticker: "GRN", maturity: 15.0, amount: 7.0, fit: fit(0.01, 0.04, 0.003) },
        Synthetic { ticker: "CV1", maturity: 5.0, amount: 20.0, fit: fit(0.02, 0.02, 0.002) },
        Synthetic { ticker: "CV2", maturity: 30.0, amount: 10.0, fit: fit(0.015, 0.06, 0.002) },
    ]
}

fn write_synthetic_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let dates = business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), 253);
    let mut prices = String::from("date,ticker,price\n");
    let mut meta = String::from("ticker,maturity_years,amount_issued\n");
    let mut common = vec![0.0; 252];
    normal_block(11, 99, 0, &mut common);
    for (k, b) in synthetic_bonds().iter().enumerate() {
        let mut own = vec![0.0; 252];
        normal_block(11, k as u64, 0, &mut own);
        let eps: Vec<f64> = own.iter().zip(&common).map(|(a, c)| 0.6 * a + 0.8 * c).collect();
        let s = synthetic_affine_series(b.ticker, &b.fit, b.maturity, dates.clone(), &eps, 100.0).unwrap();
        for (d, p) in s.dates.iter().zip(&s.prices) {
            writeln!(prices, "{d},{},{p}", b.ticker).unwrap();
        }
        writeln!(meta, "{},{},{}", b.ticker, b.maturity, b.amount).unwrap();
    }
    let (pp, mp) = (dir.join("prices.csv"), dir.join("meta.csv"));
    std::fs::write(&pp, prices).unwrap();
    std::fs::write(&mp, meta).unwrap();
    (pp, mp)
}

#[test]
fn calibrated_config_reloads() {
    let dir = TempDir::new().unwrap();
    let (p, m) = write_synthetic_inputs(dir.path());
    let out = dir.path().join("calibrated.toml");
    let o = run(&[
        "calibrate",
        "--prices",
        p.to_str().unwrap(),
        "--metadata",
        m.to_str().unwrap(),
        "--green",
        "GRN",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("GRN"));
    let loaded = RunConfig::load(&out, &[]).unwrap();
    let model = loaded.config.model().unwrap();
    assert_eq!((model.d_g(), model.d_c()), (1, 2));
    assert_eq!(model.green[0].name, "GRN");
    for i in 0..4 {
        assert_eq!(model.correlation[(i, i)], 1.0);
    }
    // Common shocks carry weight 0.8, so every pair is strongly correlated.
    assert!(model.correlation[(0, 1)] > 0.4);
    let v = model.coefficients_at(0.0).sigma_g[0];
    assert!((v - 0.04 - 0.003 * 15.0).abs() < 0.25 * 0.085, "{v}");

    let opt = dir.path().join("opt");
    let o = run(&["optimize", "--config", out.to_str().unwrap(), "--out", opt.to_str().unwrap(), "--set", "run.grid_m=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn calibrate_with_short_rate_adds_hjb_section() {
    let dir = TempDir::new().unwrap();
    let (p, m) = write_synthetic_inputs(dir.path());
    let days = business_days(NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(), 1261);
    let dt = (days[1260] - days[0]).num_days() as f64 / 365.25 / 1260.0;
    let r = synthetic_ou(OuParams { theta: 2.0, m: 0.03, sigma: 0.02 }, 0.03, dt, 1261, 5);
    let mut csv = String::from("date,rate\n");
    for (d, v) in days.iter().zip(&r) {
        writeln!(csv, "{d},{v}").unwrap();
    }
    let rp = dir.path().join("rate.csv");
    std::fs::write(&rp, csv).unwrap();
    let out = dir.path().join("calibrated.toml");
    let o = run(&[
        "calibrate",
        "--prices",
        p.to_str().unwrap(),
        "--metadata",
        m.to_str().unwrap(),
        "--green",
        "GRN",
        "--short-rate",
        rp.to_str().unwrap(),
        "--template",
        config("reference.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loaded = RunConfig::load(&out, &[]).unwrap();
    let h = loaded.config.hjb.as_ref().unwrap();
    assert!(h.sigma_r > 0.0 && h.theta > 0.0);
    assert_eq!(loaded.config.run.output_dir, "out/reference");
}

#[test]
fn calibrate_reports_input_errors() {
    let dir = TempDir::new().unwrap();
    let (p, m) = write_synthetic_inputs(dir.path());
    let out = dir.path().join("c.toml");
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let args = |prices: &Path, meta: &Path, green: &str| {
        run(&[
            "calibrate",
            "--prices",
            prices.to_str().unwrap(),
            "--metadata",
            meta.to_str().unwrap(),
            "--green",
            green,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let o = args(&empty, &m, "GRN");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("parse error at line 1"), "{}", stderr(&o));

    let o = args(&p, &m, "NOPE");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NOPE"));

    let meta2 = dir.path().join("meta2.csv");
    let mut text = std::fs::read_to_string(&m).unwrap();
    text.push_str("GHOST,3,1\n");
    std::fs::write(&meta2, text).unwrap();
    let o = args(&p, &meta2, "GRN");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GHOST"));
    assert!(!out.exists());
}
