use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "problem": {"case": "linear_g", "params": {"c": 0.2}},
    "scheme": {"N": 2, "I": 2, "M": 2000, "L": 2, "seed": 7},
    "evaluation": {"holdout_paths": 2000}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdsde-rmc"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn solve_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("report.csv");
    let summary = dir.path().join("summary.json");
    let o = run(bin()
        .args(["solve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--summary")
        .arg(&summary));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(&out).unwrap();
    assert!(report.starts_with("k,t,|alpha|,|beta|,norm_V,norm_P,event_ok,picard_last_ratio\n"));
    assert_eq!(report.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert!(json["y0_mean"].as_f64().unwrap().is_finite());
    assert!(json["runtime_ms"]["total"].as_f64().is_some());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("\"N\": 2", "\"N\": 0"));
    let o = run(bin().args(["solve", "--config"]).arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/scheme/N"));

    let o = run(bin().args(["solve", "--config"]).arg(dir.path().join("missing.json")));
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), CONFIG);
    let o = run(bin()
        .args(["oracle-check", "--case", "nope", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o.csv")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_lipschitz_constant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &CONFIG.replace("\"case\": \"linear_g\", \"params\": {\"c\": 0.2}", "\"case\": \"linear_f\", \"params\": {\"a\": 1e400}"),
    );
    let o = run(bin().args(["solve", "--config"]).arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn convergence_and_basis_info() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("conv.csv");
    let o = run(bin()
        .args(["convergence", "--config"])
        .arg(&cfg)
        .args(["--axis", "M", "--levels", "500,1000", "--replicates", "2", "--out"])
        .arg(&out)
        .env("BDSDE_RMC_THREADS", "2"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,axis,level,replicate,seed,N,h,L,M,I,errY,errZ,p_event_ok,runtime_ms"
    );
    assert_eq!(lines.count(), 4);

    let o = run(bin().args(["basis-info", "--config"]).arg(&cfg));
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("k,D_k,blocks,nnz_per_sample\n0,4,1 1 2,3\n1,4,2 2,2\n2,2,2,1\n"), "{text}");

    let o = run(bin()
        .args(["convergence", "--config"])
        .arg(&cfg)
        .args(["--axis", "Q", "--levels", "1", "--out"])
        .arg(&out));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_check_reports_all_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("oracle.csv");
    let o = run(bin()
        .args(["oracle-check", "--case", "constant_g", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("case,N,L,M,metric,value,reference,abs_err,rel_err\n"));
    for metric in ["y0_mean", "errY", "quadrature_max_abs_dY", "theta0_distance_to_ideal"] {
        assert!(text.contains(metric), "missing {metric}");
    }
    assert!(text.lines().skip(1).all(|l| l.starts_with("constant_g,2,2,2000,")));
}
