use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tpp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_FIT: &str =
    "[fit]\ndepth_grid = [3]\nmax_epochs = 2\nbatch_size = 64\n[fit.arch]\nrnn_units = 4\nhidden_units = 4\nbins = 8\n";

fn small_dataset(dir: &Path) {
    ok(&tpp(
        &[
            "simulate",
            "--process",
            "s_poisson",
            "--n",
            "400",
            "--seed",
            "3",
            "--out",
            "data",
        ],
        dir,
    ));
    fs::write(dir.join("small.toml"), SMALL_FIT).unwrap();
}

#[test]
fn simulate_writes_data_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = tpp(
        &[
            "simulate",
            "--process",
            "hawkes1",
            "--n",
            "2000",
            "--seed",
            "7",
            "--out",
            "data",
        ],
        dir.path(),
    );
    ok(&out);
    let text = fs::read_to_string(dir.path().join("data/hawkes1.txt")).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.lines().next().unwrap().ends_with("seed=7"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2000);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/hawkes1_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["mu"], 0.2);
    assert_eq!(manifest["spec"]["alpha"], serde_json::json!([0.8]));
    assert_eq!(manifest["spec"]["beta"], serde_json::json!([1.0]));
    assert_eq!(manifest["n"], 2000);
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn simulate_zero_events() {
    let dir = TempDir::new().unwrap();
    ok(&tpp(
        &["simulate", "--process", "s_renewal", "--n", "0", "--out", "."],
        dir.path(),
    ));
    let text = fs::read_to_string(dir.path().join("s_renewal.txt")).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s_renewal_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 0);
}

#[test]
fn simulate_jsonl_sequences() {
    let dir = TempDir::new().unwrap();
    ok(&tpp(
        &[
            "simulate",
            "--process",
            "self_correcting",
            "--n",
            "50",
            "--sequences",
            "3",
            "--format",
            "jsonl",
        ],
        dir.path(),
    ));
    let seqs = tpp_core::events::load_sequences(
        &dir.path().join("self_correcting.jsonl"),
        tpp_core::events::SequenceFormat::Jsonl,
    )
    .unwrap();
    assert_eq!(seqs.len(), 3);
    assert!(seqs.iter().all(|s| s.len() == 50));
    assert_ne!(seqs[0], seqs[1]);
}

#[test]
fn unstable_hawkes_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let out = tpp(&["simulate", "--process", "hawkes", "--alpha", "1.2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("branching ratio"));
}

#[test]
fn custom_hawkes_parameters() {
    let dir = TempDir::new().unwrap();
    ok(&tpp(
        &[
            "simulate",
            "--process",
            "hawkes",
            "--mu",
            "0.5",
            "--alpha",
            "0.3,0.2",
            "--beta",
            "2,5",
            "--n",
            "100",
        ],
        dir.path(),
    ));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("hawkes_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["alpha"], serde_json::json!([0.3, 0.2]));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let out = tpp(&["fit", "--data", "data/s_poisson.txt", "--model", "lstm"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(tpp(&["fit", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(
        tpp(&["simulate", "--process", "nope"], dir.path()).status.code(),
        Some(2)
    );
    fs::write(dir.path().join("bad.toml"), "[fit]\nlearning_rat = 0.1\n").unwrap();
    let out = tpp(
        &[
            "fit",
            "--config",
            "bad.toml",
            "--data",
            "data/s_poisson.txt",
            "--model",
            "constant",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let out = tpp(&["fit", "--data", "absent.txt", "--model", "constant"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_is_reproducible_and_flags_override_config() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    let args = |out: &'static str| {
        vec![
            "fit",
            "--config",
            "small.toml",
            "--data",
            "data/s_poisson.txt",
            "--model",
            "piecewise",
            "--seed",
            "5",
            "--out",
            out,
        ]
    };
    ok(&tpp(&args("a"), dir.path()));
    ok(&tpp(&args("b"), dir.path()));
    let a = fs::read(dir.path().join("a/piecewise.ckpt")).unwrap();
    let b = fs::read(dir.path().join("b/piecewise.ckpt")).unwrap();
    assert_eq!(a, b);
    let log = fs::read_to_string(dir.path().join("a/piecewise_train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("3,")).count(), 2);

    let mut over = args("c");
    over.extend(["--max-epochs", "1"]);
    ok(&tpp(&over, dir.path()));
    let log = fs::read_to_string(dir.path().join("c/piecewise_train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("3,")).count(), 1);
    let ck = tpp_core::train::Checkpoint::load(&dir.path().join("c/piecewise.ckpt")).unwrap();
    assert_eq!(ck.model.params.get(0).shape.rows, 4);
    assert!(log.starts_with(&format!("# config_hash={} seed=5", ck.meta.config_hash)));
}

#[test]
fn evaluate_with_and_without_true_spec() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    for m in ["constant", "exponential", "piecewise", "chfn"] {
        ok(&tpp(
            &[
                "fit",
                "--config",
                "small.toml",
                "--data",
                "data/s_poisson.txt",
                "--model",
                m,
                "--out",
                "fit",
            ],
            dir.path(),
        ));
    }
    let ckpts = [
        "fit/constant.ckpt",
        "fit/exponential.ckpt",
        "fit/piecewise.ckpt",
        "fit/chfn.ckpt",
    ];
    let mut args = vec![
        "evaluate",
        "--data",
        "data/s_poisson.txt",
        "--out",
        "with",
        "--true-spec",
        "data/s_poisson_manifest.json",
        "--checkpoint",
    ];
    args.extend(ckpts);
    let out = tpp(&args, dir.path());
    ok(&out);
    let table = fs::read_to_string(dir.path().join("with/comparison.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains("standardized"));
    assert_eq!(table.lines().count(), 6);
    for m in ["constant", "exponential", "piecewise", "chfn"] {
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("with/{m}_report.json"))).unwrap())
                .unwrap();
        assert!(report["standardized_mean_nll"].is_f64());
        assert_eq!(report["n_events"], 80);
        let events = fs::read_to_string(dir.path().join(format!("with/{m}_events.csv"))).unwrap();
        assert_eq!(
            events.lines().nth(1).unwrap(),
            "index,tau,nll,predicted,abs_error,converged"
        );
        assert!(dir.path().join(format!("with/{m}_blocks.csv")).exists());
    }

    let mut args = vec![
        "evaluate",
        "--data",
        "data/s_poisson.txt",
        "--out",
        "without",
        "--checkpoint",
    ];
    args.extend(ckpts);
    ok(&tpp(&args, dir.path()));
    let table = fs::read_to_string(dir.path().join("without/comparison.csv")).unwrap();
    assert!(!table.contains("standardized"));
    let report = fs::read_to_string(dir.path().join("without/chfn_report.json")).unwrap();
    assert!(!report.contains("standardized_mean_nll"));

    let out = tpp(
        &[
            "report",
            "--reports",
            "with/constant_report.json",
            "with/chfn_report.json",
            "--out",
            "rep",
        ],
        dir.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| chfn |"));
    assert_eq!(
        fs::read_to_string(dir.path().join("rep/comparison.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn predict_streams_rows() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    ok(&tpp(
        &[
            "fit",
            "--config",
            "small.toml",
            "--data",
            "data/s_poisson.txt",
            "--model",
            "constant",
            "--out",
            "fit",
        ],
        dir.path(),
    ));
    ok(&tpp(
        &[
            "predict",
            "--data",
            "data/s_poisson.txt",
            "--checkpoint",
            "fit/constant.ckpt",
            "--out",
            "p",
            "--threads",
            "1",
        ],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("p/constant_predictions.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 80);
    assert!(rows
        .iter()
        .all(|r| r.ends_with(&format!(",{}", r.rsplit(',').next().unwrap()))));
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first[1], "320");
    assert!(first[3].parse::<f64>().unwrap() > first[2].parse::<f64>().unwrap());
}

#[test]
fn predict_on_empty_data_writes_header_only() {
    let dir = TempDir::new().unwrap();
    small_dataset(dir.path());
    ok(&tpp(
        &[
            "fit",
            "--config",
            "small.toml",
            "--data",
            "data/s_poisson.txt",
            "--model",
            "chfn",
            "--out",
            "fit",
        ],
        dir.path(),
    ));
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    ok(&tpp(
        &[
            "predict",
            "--data",
            "empty.txt",
            "--checkpoint",
            "fit/chfn.ckpt",
            "--out",
            "p",
        ],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("p/chfn_predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "sequence,index,t_last,predicted,converged,iterations"
    );
}

#[test]
fn run_config_file_supplies_settings() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "seed = 11\nout = \"cfgout\"\n[simulate]\nprocess = \"hawkes2\"\nn = 30\n",
    )
    .unwrap();
    ok(&tpp(&["simulate", "--config", "run.toml"], dir.path()));
    let text = fs::read_to_string(dir.path().join("cfgout/hawkes2.txt")).unwrap();
    assert!(text.lines().next().unwrap().ends_with("seed=11"));
    ok(&tpp(
        &["simulate", "--config", "run.toml", "--seed", "12", "--n", "5"],
        dir.path(),
    ));
    let text = fs::read_to_string(dir.path().join("cfgout/hawkes2.txt")).unwrap();
    assert!(text.lines().next().unwrap().ends_with("seed=12"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
}
