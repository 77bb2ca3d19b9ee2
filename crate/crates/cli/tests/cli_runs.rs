use std::fs;
use std::path::Path;
use std::process::Command;

use biapnn_cli::output::{load_checkpoint, save_checkpoint};
use biapnn_cli::{emit_results, run_experiment, ExperimentConfig, Mode, Summary};
use biapnn_core::net::{DenseNet, OutputTransform};

fn tiny(method: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "problem=problem1 method={method} eps=1e-3\n\
         layers=1 neurons=4 nt=3 nx=5 epochs=6 pretrain_epochs=4 log_every=2 lr=1e-3 t_final=0.02\n"
    ))
    .unwrap()
}

fn quiet() -> impl FnMut(&str, &biapnn_core::train::EpochRecord) {
    |_, _| {}
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_biapnn"))
}

fn sorted_listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn reference_run_writes_density_on_the_hundredth_grid() {
    let cfg = ExperimentConfig::parse("problem=problem1 method=reference eps=1 t_final=0.1").unwrap();
    let bundle = run_experiment(&cfg, Mode::Reference, &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_results(&bundle, dir.path()).unwrap();
    assert_eq!(manifest, ["rho_final.csv", "trajectory.csv", "micro.csv", "summary.json"]);
    let text = fs::read_to_string(dir.path().join("rho_final.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,rho"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (x, r) = l.split_once(',').unwrap();
            (x.parse().unwrap(), r.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 101);
    for (i, (x, rho)) in rows.iter().enumerate() {
        assert!((x - i as f64 * 0.01).abs() < 1e-12);
        assert!(rho.is_finite() && *rho > 0.0);
    }
    assert!((bundle.t_final - 0.1).abs() < 1e-12);
}

#[test]
fn forward_manifest_is_exactly_three_files() {
    let bundle = run_experiment(&tiny("bi_explicit"), Mode::Forward, &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = emit_results(&bundle, dir.path()).unwrap();
    manifest.sort();
    assert_eq!(manifest, ["loss_history.csv", "rho_final.csv", "summary.json"]);
    assert_eq!(sorted_listing(dir.path()), manifest);
    assert!(bundle.rel_error_rho.unwrap().is_finite());
    let history = fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
    assert!(history.lines().next().unwrap().contains("rel_error"));
    assert!(history.lines().any(|l| l.starts_with("pretrain,")));
    assert!(history.lines().any(|l| l.starts_with("main,")));
}

#[test]
fn identical_runs_give_byte_identical_csvs() {
    let cfg = tiny("apnn");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let bundle = run_experiment(&cfg, Mode::Forward, &mut quiet()).unwrap();
        emit_results(&bundle, d.path()).unwrap();
    }
    for f in ["rho_final.csv", "loss_history.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let sa = Summary::load(&a.path().join("summary.json")).unwrap();
    let sb = Summary::load(&b.path().join("summary.json")).unwrap();
    assert_eq!(sa.config_hash, sb.config_hash);
    assert_eq!(sa.rel_error_rho, sb.rel_error_rho);
}

#[test]
fn summary_round_trips_through_a_strict_parser() {
    let cfg = tiny("bi_implicit");
    let bundle = run_experiment(&cfg, Mode::Forward, &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&bundle, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let s: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(s, Summary::from_bundle(&bundle));
    assert_eq!(s.config_hash, cfg.hash());
    assert_eq!(ExperimentConfig::parse(&s.config).unwrap().hash(), cfg.hash());
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["surprise"] = serde_json::json!(1);
    assert!(serde_json::from_value::<Summary>(value).is_err());
}

#[test]
fn reported_error_is_recomputable_from_the_density_csv() {
    let bundle = run_experiment(&tiny("pinn"), Mode::Forward, &mut quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&bundle, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("rho_final.csv")).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for l in text.lines().skip(1) {
        let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
        num += (v[1] - v[2]).powi(2);
        den += v[2] * v[2];
    }
    let err = (num / den).sqrt();
    let reported = Summary::load(&dir.path().join("summary.json")).unwrap().rel_error_rho.unwrap();
    assert!((err - reported).abs() <= 1e-12 * reported.max(1.0), "{err} vs {reported}");
}

#[test]
fn inverse_run_records_one_trajectory_per_guess() {
    let mut cfg = tiny("bi_implicit");
    cfg.set("sigma0", "1.5,1.9").unwrap();
    cfg.set("n_obs_rho", "10").unwrap();
    let bundle = run_experiment(&cfg, Mode::Inverse, &mut quiet()).unwrap();
    assert_eq!(bundle.sigma_runs.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_results(&bundle, dir.path()).unwrap();
    assert!(manifest.contains(&"sigma_trajectory.csv".to_string()));
    let text = fs::read_to_string(dir.path().join("sigma_trajectory.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("run,sigma0,epoch,sigma"));
    let runs: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(runs.len(), 2);
    let s = Summary::load(&dir.path().join("summary.json")).unwrap();
    let mean = s.sigma_hats.iter().sum::<f64>() / 2.0;
    assert_eq!(s.sigma_hat, Some(mean));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let net = DenseNet::xavier(&[2, 5, 5, 1], OutputTransform::NegExp, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("rho");
    save_checkpoint(&net, &base).unwrap();
    let back = load_checkpoint(&base).unwrap();
    assert_eq!(back.params(), net.params());
    let x = [0.03, 0.4, 0.07, 0.9];
    assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());

    fs::write(base.with_extension("params"), "1.0\n").unwrap();
    assert!(load_checkpoint(&base).is_err());
}

#[test]
fn cli_overrides_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "# desk run\nproblem=problem1\nmethod=drift_diffusion\nt_final=0.02\n").unwrap();
    let out = dir.path().join("dd");
    let status = bin()
        .args(["reference", "--quiet", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(["--eps", "0.5", "--set", "dx=0.02 dt=0.01"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let s = Summary::load(&out.join("summary.json")).unwrap();
    assert_eq!(s.eps, 0.5);
    assert_eq!(s.method, "drift_diffusion");
    assert_eq!(fs::read_to_string(out.join("rho_final.csv")).unwrap().lines().count(), 52);

    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["reference", "-q", "--eps", "0"]), Some(2));
    assert_eq!(code(&["reference", "-q", "--set", "fo=bar"]), Some(2));
    assert_eq!(code(&["forward", "-q", "--method", "reference"]), Some(2));
    let div = dir.path().join("div");
    let diverging = [
        "forward",
        "-q",
        "--out",
        div.to_str().unwrap(),
        "--set",
        "method=apnn eps=1e-3 layers=1 neurons=4 nt=3 nx=5 epochs=5 divergence_threshold=1e-12 t_final=0.02",
    ];
    assert_eq!(code(&diverging), Some(3));
}

#[test]
fn compare_tabulates_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for m in ["reference", "drift_diffusion"] {
        let d = dir.path().join(m);
        let st = bin()
            .args(["reference", "-q", "--method", m, "--set", "t_final=0.01 eps=1e-6", "--out"])
            .arg(&d)
            .output()
            .unwrap();
        assert!(st.status.success());
        dirs.push(d);
    }
    let out = bin().arg("compare").args(&dirs).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(table, fs::read_to_string(dir.path().join("compare.csv")).unwrap());
}
