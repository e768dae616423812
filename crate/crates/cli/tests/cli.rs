use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn semilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semilab")).args(args).output().expect("binary runs")
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_in(dir: &Path, sub: &str, config: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    semilab(&args)
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

const MINIMAL: &str = r#"
schema_version = 1
h_list = [0.03125]

[potential]
dimension = 1

[energy]
e0 = 1.0
e1 = [0.0, 0.2]

[source]
kind = "point"
center = [0.0]

[grid]
half_extent = 8.0
layer_width = 1.5
layer_strength = 120.0
"#;

#[test]
fn empty_observable_list_gives_header_only_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("minimal.toml");
    std::fs::write(&cfg, MINIMAL).unwrap();
    let o = run_in(dir.path(), "converge", &cfg, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let conv = dir.path().join("converge.csv");
    assert_eq!(header(&conv), ["stage", "observable_id", "h", "pairing", "mu", "abs_error", "rel_error"]);
    assert!(rows(&conv).is_empty());
}

#[test]
fn free_line_converges_at_the_finest_h() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "converge", &shipped("free_1d.toml"), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&dir.path().join("converge.csv"));
    let finest = table.iter().map(|r| r[2].parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
    let last: Vec<_> = table.iter().filter(|r| r[2].parse::<f64>().unwrap() == finest).collect();
    assert_eq!(last.len(), 4);
    for r in last {
        assert_eq!(&r[0], "converge");
        let rel: f64 = r[6].parse().unwrap();
        assert!(rel <= 0.05, "observable {} rel {rel}", &r[1]);
    }
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = shipped("free_1d.toml");
    for dir in [&a, &b] {
        assert!(run_in(dir.path(), "flow", &cfg, &["--seed", "11"]).status.success());
        assert!(run_in(dir.path(), "measure", &cfg, &[]).status.success());
    }
    for file in ["flow.csv", "flow_summary.csv", "sigma.csv", "measure.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn free_line_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "check", &shipped("free_1d.toml"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&dir.path().join("checks.csv"));
    assert!(!table.is_empty());
    assert!(table.iter().all(|r| &r[4] == "true"), "{table:?}");
}

#[test]
fn trapping_well_fails_with_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "check", &shipped("trapping_well.toml"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absorption"));
    let table = rows(&dir.path().join("checks.csv"));
    let abs = table.iter().find(|r| &r[1] == "absorption").unwrap();
    assert_eq!(&abs[4], "false");
    assert!(abs[5].starts_with("witness x="), "{:?}", &abs[5]);
}

#[test]
fn malformed_config_exits_3_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, MINIMAL.replace("[grid]", "[grid]\nhalf_extnt = 2.0")).unwrap();
    let o = run_in(dir.path(), "flow", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("half_extnt") && err.contains("line"), "{err}");

    std::fs::write(&cfg, MINIMAL.replace("[0.03125]", "[0.01, 0.02]")).unwrap();
    let o = run_in(dir.path(), "flow", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h_list"));

    assert_eq!(semilab(&["nonsense"]).status.code(), Some(3));
    assert_eq!(semilab(&["--help"]).status.code(), Some(0));
}

#[test]
fn unresolved_layer_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("thin.toml");
    std::fs::write(&cfg, MINIMAL.replace("layer_width = 1.5", "layer_width = 0.1")).unwrap();
    let o = run_in(dir.path(), "solve", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_thread_matches_the_default() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("minimal.toml");
    std::fs::write(&cfg, MINIMAL).unwrap();
    assert!(run_in(a.path(), "solve", &cfg, &["--threads", "1"]).status.success());
    assert!(run_in(b.path(), "solve", &cfg, &[]).status.success());
    let x = rows(&a.path().join("solve.csv"));
    let y = rows(&b.path().join("solve.csv"));
    assert_eq!(x.len(), 1);
    let bin = std::fs::File::open(a.path().join("solve_h0.bin")).unwrap();
    let u = semilab_core::helmholtz::DiscreteField::read_binary(std::io::BufReader::new(bin)).unwrap();
    let n: f64 = x[0][4].parse().unwrap();
    assert!((u.norm() - n).abs() <= 1e-15 * n);
    for (p, q) in x.iter().zip(&y) {
        let (n1, n2): (f64, f64) = (p[4].parse().unwrap(), q[4].parse().unwrap());
        assert!((n1 - n2).abs() <= 1e-12 * n2, "{n1} vs {n2}");
    }
    assert_eq!(semilab(&["solve", "--config", cfg.to_str().unwrap(), "--threads", "0"]).status.code(), Some(3));
}
