use std::path::{Path, PathBuf};

use tubeplate::cli::{main_with_args, EXIT_CONFIG, EXIT_OK};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tubeplate-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("tubeplate").chain(args.iter().copied()))
}

const SMALL: &str = r#"
seed = 3

[regime]
kind = "lplus"
ell = 1.0
p = 4.0
radii = [0.5, 0.25, 0.125]

[density]
kind = "quadratic-convex"

[forces.fa]
kind = "constant"
value = [0.0, 0.0, 0.4]

[mesh]
na = 2
nz = 4
nb = 4
nh = 2
interval = 4
tri = 4
tri_grading = 1.0
"#;

#[test]
fn capacity_writes_manifest_and_report() {
    let dir = scratch("capacity");
    let out = dir.join("out");
    assert_eq!(run(&["capacity", "--out", out.to_str().unwrap()]), EXIT_OK);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("capacity.json").exists());
}

#[test]
fn rejected_configs_exit_with_config_code() {
    let dir = scratch("reject");
    let cfg = write_config(&dir, &SMALL.replace("kind = \"lplus\"\nell = 1.0\np = 4.0", "kind = \"linf\"\np = 2.0\nh_coeff = 1.0\nh_exponent = 0.2"));
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "solve-eps"]), EXIT_CONFIG);
    let cfg = write_config(&dir, &format!("{SMALL}\nunknown_key = 1\n"));
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "solve-eps"]), EXIT_CONFIG);
    assert_eq!(run(&["--config", dir.join("missing.toml").to_str().unwrap(), "capacity"]), EXIT_CONFIG);
    assert_eq!(run(&["--eps-index"]), EXIT_CONFIG);
}

#[test]
fn solve_eps_is_reproducible_and_writes_node_files() {
    let dir = scratch("eps");
    let cfg = write_config(&dir, SMALL);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        let code = run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "11", "solve-eps", "--eps-index", "1"]);
        assert_eq!(code, EXIT_OK);
    }
    for file in ["tube_nodes.csv", "plate_nodes.csv"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file} differs between identical runs");
        assert!(String::from_utf8(x).unwrap().starts_with("x,y,z,v1,v2,v3"));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn gamma_study_writes_the_report() {
    let dir = scratch("gamma");
    let cfg = write_config(&dir, SMALL);
    let out = dir.join("out");
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "gamma-study"]), EXIT_OK);
    let mut rdr = csv::Reader::from_path(out.join("gamma_report.csv")).unwrap();
    assert!(rdr.headers().unwrap().iter().any(|h| h == "gap"));
    assert_eq!(rdr.records().count(), 3);
}
