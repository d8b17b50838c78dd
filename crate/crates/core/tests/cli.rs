//! Exit-code contract of every subcommand, run through the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparse_dominator::domination::DominationCertificate;

fn run(cmd: &str, dir: &Path, config: &str) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sparse-dominator"))
        .args([cmd, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_row(path: &Path, row: usize) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().nth(row).unwrap().split(',').map(str::to_string).collect()
}

const HILBERT_10: &str = "[experiment]\nkernel = \"hilbert\"\nlevel = 10\n";

#[test]
fn dominate_zero_kernel_reports_zero_constant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("dominate", dir.path(), "[experiment]\nkernel = \"zero\"\nlevel = 6\n");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header = csv_row(&dir.path().join("out/summary.csv"), 0);
    assert_eq!(header, ["cells", "C_emp", "C_T", "ratio", "depth", "family_size"]);
    let row = csv_row(&dir.path().join("out/summary.csv"), 1);
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn dominate_then_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("dominate", dir.path(), HILBERT_10);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    for name in ["family.txt", "certificate.ron", "function.txt", "summary.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let verify = "[experiment]\nkernel = \"hilbert\"\nlevel = 10\n[verify]\ncertificate = \"out/certificate.ron\"\nfunction = \"out/function.txt\"\n";
    let o = run("verify-certificate", dir.path(), verify);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let path = out.join("certificate.ron");
    let mut cert = DominationCertificate::from_ron(&fs::read_to_string(&path).unwrap()).unwrap();
    cert.node_at_mut("0").unwrap().c_star *= 0.5;
    fs::write(&path, cert.to_ron().unwrap()).unwrap();
    let o = run("verify-certificate", dir.path(), verify);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("violation at node 0:"));

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let o = run("verify-certificate", dir.path(), verify);
    assert_eq!(code(&o), 2);
}

#[test]
fn dominate_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = "[experiment]\nkernel = \"hilbert\"\nlevel = 8\nseed = 4\n[function]\nkind = \"random-step\"\n";
    assert_eq!(code(&run("dominate", a.path(), cfg)), 0);
    assert_eq!(code(&run("dominate", b.path(), cfg)), 0);
    for name in ["family.txt", "certificate.ron", "function.txt", "summary.csv"] {
        assert_eq!(fs::read(a.path().join("out").join(name)).unwrap(), fs::read(b.path().join("out").join(name)).unwrap());
    }
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("dominate", dir.path(), "[experiment]\nkernel = \"hilbert\"\nlevel = 8\nr = 0.0\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("experiment.r"), "{}", stderr(&o));
    let o = run("dominate", dir.path(), "[experiment]\nkernel = \"hilbert\"\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("level"), "{}", stderr(&o));
}

#[test]
fn maximal_compare_zero_kernel_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("maximal-compare", dir.path(), "[experiment]\nkernel = \"zero\"\nlevel = 6\n");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/maximal.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[2], 0.0);
        assert_eq!(cols[5], 0.0);
    }
    assert_eq!(csv_row(&dir.path().join("out/maximal_summary.csv"), 1)[2], "0.0");
}

#[test]
fn maximal_compare_spike_has_no_division_by_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("maximal-compare", dir.path(), "[experiment]\nkernel = \"hilbert\"\nlevel = 8\n[function]\nkind = \"spike\"\n");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/maximal.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[5].is_finite());
        if cols[2] > 0.0 {
            assert!(cols[3] > 0.0);
        }
    }
    let kappa: f64 = csv_row(&dir.path().join("out/maximal_summary.csv"), 1)[2].parse().unwrap();
    assert!(kappa.is_finite());
}

#[test]
fn weights_sweep_contract() {
    let dir = tempfile::tempdir().unwrap();
    let single = "[experiment]\nkernel = \"hilbert\"\nlevel = 7\n[sweep]\nalphas = [0.0]\n";
    let o = run("weights-sweep", dir.path(), single);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = csv_row(&dir.path().join("out/sweep.csv"), 2);
    assert_eq!(fit[0], "fit");
    assert_eq!(fit[5], "n/a");

    let o = run("weights-sweep", dir.path(), "[experiment]\nkernel = \"hilbert\"\nlevel = 8\n[sweep]\np = 3.0\nr = 2.0\nalphas = [-0.6, 0.0, 0.6, 1.2]\n");
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = run("weights-sweep", dir.path(), "[experiment]\nkernel = \"hilbert\"\nlevel = 7\n[sweep]\nalphas = [1.0]\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sweep.alphas"));
}

#[test]
fn grid_decompose_and_selftest_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[experiment]\nkernel = \"hilbert\"\nlevel = 8\nrings = 1\n[function]\nkind = \"bump\"\n";
    let o = run("grid-decompose", dir.path(), cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("out/decompose.csv").is_file());
    let o = run("selftest", dir.path(), cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/selftest.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}
