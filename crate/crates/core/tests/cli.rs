//! Exercises the installed binary end to end: artifact layout, config
//! precedence, determinism, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demandcast"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Two aggregates, two children each, seasonal-ish counts.
fn toy_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let mut sales = String::from("series_id,date,quantity\n");
    let mut hier = String::from("lower_id,aggregate_id\n");
    let mut state = 9u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as u32
    };
    for (agg, rates) in [("g1", [3u32, 5]), ("g2", [2, 4])] {
        for (c, &rate) in rates.iter().enumerate() {
            let id = format!("{agg}_c{c}");
            hier.push_str(&format!("{id},{agg}\n"));
            for t in 0..130u32 {
                let day = chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap()
                    + chrono::Days::new(t as u64);
                let q = (next() % (2 * rate + 1)).saturating_sub(if t % 7 == 0 { 1 } else { 0 });
                sales.push_str(&format!("{id},{day},{q}\n"));
            }
        }
    }
    let sales_path = dir.join("sales.csv");
    let hier_path = dir.join("hier.csv");
    std::fs::write(&sales_path, sales).unwrap();
    std::fs::write(&hier_path, hier).unwrap();
    (sales_path, hier_path)
}

#[test]
fn topdown_run_writes_artifacts_and_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (sales, hier) = toy_dataset(dir.path());
    let base = [
        "topdown",
        "--sales",
        sales.to_str().unwrap(),
        "--hierarchy",
        hier.to_str().unwrap(),
        "--seed",
        "7",
        "--profile",
        "generic",
        "--dist",
        "negbin",
        "--class",
        "all",
        "--horizon",
        "7",
        "--n-lags",
        "5",
    ];
    let out1 = dir.path().join("out1");
    let mut args = base.to_vec();
    args.extend(["--out", out1.to_str().unwrap()]);
    let res = run(&args);
    assert_eq!(code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));
    for name in ["manifest.txt", "demand_classes.csv", "metrics.csv"] {
        assert!(out1.join(name).exists(), "missing {name}");
    }
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("wspl"), "summary missing: {stdout}");

    let out2 = dir.path().join("out2");
    let mut args = base.to_vec();
    args.extend(["--out", out2.to_str().unwrap()]);
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(
        std::fs::read(out1.join("metrics.csv")).unwrap(),
        std::fs::read(out2.join("metrics.csv")).unwrap(),
        "same seed must reproduce metrics byte for byte"
    );
}

#[test]
fn flags_override_set_pairs_which_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (sales, hier) = toy_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "sales={}\nhierarchy={}\nseed=1\nhorizon=7\nn_lags=5\n",
            sales.display(),
            hier.display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = run(&[
        "classify",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "seed=2",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed 3"), "named flag should win: {manifest}");

    let classes = std::fs::read_to_string(out.join("demand_classes.csv")).unwrap();
    assert!(classes.starts_with("series_id,level,adi,cv2,class\n"));
    // 2 aggregates + 4 children
    assert_eq!(classes.lines().count(), 7);
}

#[test]
fn exit_codes_distinguish_config_data_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (sales, hier) = toy_dataset(dir.path());

    // unknown config key
    let res = run(&[
        "topdown",
        "--set",
        "no_such_key=1",
        "--sales",
        sales.to_str().unwrap(),
        "--hierarchy",
        hier.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 1);

    // unknown flag
    assert_eq!(code(&run(&["topdown", "--frobnicate"])), 1);

    // missing input file
    let res = run(&[
        "topdown",
        "--sales",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--hierarchy",
        hier.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "stderr: {}", String::from_utf8_lossy(&res.stderr));

    // a constant series never moves, so the scaled score has no valid
    // denominator anywhere in its class
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("series_id,date,quantity\n");
    for t in 0..60u64 {
        let day = chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Days::new(t);
        text.push_str(&format!("flat,{day},5\n"));
    }
    std::fs::write(&flat, text).unwrap();
    let res = run(&[
        "eval",
        "--sales",
        flat.to_str().unwrap(),
        "--out",
        dir.path().join("outf").to_str().unwrap(),
        "--horizon",
        "5",
        "--n-lags",
        "3",
    ]);
    assert_eq!(code(&res), 3, "stderr: {}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let res = run(&["--help"]);
    assert_eq!(code(&res), 0);
    let text = String::from_utf8_lossy(&res.stdout);
    for sub in ["classify", "topdown", "direct", "sample-study", "ensemble", "eval", "emit-plots"]
    {
        assert!(text.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn sampling_study_then_plot_emission() {
    let dir = tempfile::tempdir().unwrap();
    let (sales, _) = toy_dataset(dir.path());
    let out = dir.path().join("out");
    let res = run(&[
        "sample-study",
        "--sales",
        sales.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
        "--horizon",
        "7",
        "--n-lags",
        "4",
        "--sizes",
        "2,4",
        "--repeats",
        "3",
    ]);
    assert_eq!(code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let curve = std::fs::read_to_string(out.join("sampling_curve.csv")).unwrap();
    assert!(curve.starts_with("size,repeat,mse,baseline_mean_mse,baseline_zero_mse\n"));
    assert_eq!(curve.lines().count(), 1 + 2 * 3);

    // plot emission over a directory with only a curve is a no-op success
    assert_eq!(code(&run(&["emit-plots", "--out", out.to_str().unwrap()])), 0);
    // and over an empty directory it is a data error
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["emit-plots", "--out", empty.to_str().unwrap()])), 2);
}
