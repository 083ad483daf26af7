use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lqshift::instances::{random_instance, zero_instance, RandomFamily};
use lqshift::io::instance_to_json;
use lqshift::{ControlDomain, HalfSpace};
use serde_json::Value;
use tempfile::TempDir;

fn example() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example5.json")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

fn lqshift(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_lqshift"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn ex() -> String {
    example().display().to_string()
}

#[test]
fn validate_bundled_and_broken_files() {
    let ok = lqshift(&["validate", &ex()]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert_eq!(ok.json()["results"]["valid"], true);

    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(example()).unwrap();
    let zero_depth = write(&dir, "d0.json", &text.replace("\"depth\": 2", "\"depth\": 0"));
    let r = lqshift(&["validate", &zero_depth]);
    assert_eq!(r.code, 2);
    assert_eq!(r.json()["results"]["violations"][0]["path"], "/depth");

    let asym = write(
        &dir,
        "asym.json",
        r#"{ "n": 2, "k": 1, "T": 1, "depth": 2, "coefficients": { "G": [[1, 0.5], [0, 1]] } }"#,
    );
    let r = lqshift(&["validate", &asym]);
    assert_eq!(r.code, 2);
    assert_eq!(r.json()["results"]["violations"][0]["path"], "/coefficients/G");
    // other commands refuse it as well
    assert_eq!(lqshift(&["spectrum", &asym]).code, 2);
}

#[test]
fn spectrum_examples() {
    let r = lqshift(&["spectrum", &ex(), "--no-timings"]).json();
    assert_eq!(r["results"]["lambdaMax"], 2.0);
    assert_eq!(r["results"]["mu"], -2.0);
    assert_eq!(r["results"]["method"], "dense");

    let r = lqshift(&["spectrum", &ex(), "--depth", "10", "--mode", "power"]).json();
    let l = r["results"]["lambdaMax"].as_f64().unwrap();
    assert!((l - 2.8).abs() <= 1e-7, "{l}");
    assert_eq!(r["parameters"]["depth"], 10);

    let dir = TempDir::new().unwrap();
    let (z, d) = zero_instance(2, 1, 1).unwrap();
    let zpath = write(&dir, "zero.json", &instance_to_json(&z, &d).to_string());
    let csv = dir.path().join("spec.csv");
    let r = lqshift(&["spectrum", &zpath, "--csv", csv.to_str().unwrap()]).json();
    assert_eq!(r["results"]["lambdaMax"], 0.0);
    assert_eq!(r["results"]["mu"], 0.0);
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 4);

    let r = lqshift(&["spectrum", &ex(), "--depth", "6", "--mode", "power", "--max-iter", "1"]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("residual"));
}

#[test]
fn solve_examples() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("solve.json");
    let r = lqshift(&["solve", &ex(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep["results"]["bestCost"], 0.0);
    assert_eq!(rep["results"]["method"], "brute-force");
    assert_eq!(rep["results"]["stationarity"]["verdict"], "pass");
    assert!(rep["timings"].is_object());
    let csv = fs::read_to_string(dir.path().join("solve.control.csv")).unwrap();
    assert_eq!(csv, "level,index,u1\n0,0,0\n1,0,0\n1,1,0\n");

    let r = lqshift(&["solve", &ex(), "--depth", "8", "--msa", "50", "--starts", "10"]).json();
    assert_eq!(r["results"]["method"], "msa");
    for run in r["results"]["runs"].as_array().unwrap() {
        assert_eq!(run["cost"], 0.0);
        assert_eq!(run["status"], "fixed-point");
    }
    assert!(r["results"]["bestControl"]
        .as_array()
        .unwrap()
        .iter()
        .all(|n| n["u"][0] == 0.0));

    let (z, d) = zero_instance(2, 1, 1).unwrap();
    let zpath = write(&dir, "zero.json", &instance_to_json(&z, &d).to_string());
    let r = lqshift(&["solve", &zpath]).json();
    assert_eq!(r["results"]["bestCost"], 0.0);
    assert_eq!(r["results"]["tieCount"], "8");

    let r = lqshift(&["solve", &ex(), "--depth", "5"]);
    assert_eq!(r.code, 4);
    assert!(r.stderr.contains("2147483648"), "{}", r.stderr);
}

#[test]
fn verify_examples() {
    let dir = TempDir::new().unwrap();
    let zero = write(&dir, "zero.csv", "level,index,u1\n0,0,0\n1,0,0\n1,1,0\n");
    let out = dir.path().join("v.json");
    let r = lqshift(&["verify", &ex(), "--control", &zero, "--second-order", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["stationarity", "signs", "generalSmp"] {
        assert_eq!(rep["results"][key]["verdict"], "pass", "{key}");
    }
    let p = fs::read_to_string(dir.path().join("v.P.csv")).unwrap();
    for line in p.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[3] - (2.0 * f[2] - 4.0)).abs() <= 1e-12, "{line}");
    }

    let ones = write(&dir, "ones.csv", "level,index,u1\n1,1,1\n0,0,1\n1,0,1\n");
    let r = lqshift(&["verify", &ex(), "--control", &ones, "--depth", "2"]).json();
    assert_eq!(r["results"]["stationarity"]["verdict"], "fail");
    let worst = r["results"]["stationarity"]["worstViolation"].as_f64().unwrap();
    assert!((worst - 1.0).abs() <= 1e-12); // 3/2 − dt

    let r = lqshift(&["verify", &ex(), "--control", &ones, "--mu", "-3"]).json();
    assert_eq!(r["results"]["mu"], -3.0);

    let missing = write(&dir, "missing.csv", "level,index,u1\n0,0,0\n1,0,0\n");
    assert_eq!(lqshift(&["verify", &ex(), "--control", &missing]).code, 5);
    let half = write(&dir, "half.csv", "level,index,u1\n0,0,0.5\n1,0,0\n1,1,0\n");
    assert_eq!(lqshift(&["verify", &ex(), "--control", &half]).code, 5);
    assert_eq!(lqshift(&["verify", &ex(), "--control", "/nonexistent.csv"]).code, 5);
}

#[test]
fn equivalence_examples() {
    let r = lqshift(&["equivalence", &ex(), "--depth", "3", "--samples", "2000"]).json();
    assert_eq!(r["results"]["passed"], true);
    assert_eq!(r["results"]["nonbinaryVertices"], false);

    let dir = TempDir::new().unwrap();
    let tree = lqshift::ScenarioTree::new(1, 1.0).unwrap();
    let inst = lqshift::LqInstance::zeros(tree, 1, 2);
    let domain = ControlDomain::new(2, vec![HalfSpace::new(vec![1.0, 1.0], 1.5)]).unwrap();
    let cut = write(&dir, "cut.json", &instance_to_json(&inst, &domain).to_string());
    let r = lqshift(&["equivalence", &cut, "--samples", "100"]).json();
    assert_eq!(r["results"]["nonbinaryVertices"], true);
    assert_eq!(r["results"]["warnings"].as_array().unwrap().len(), 1);

    assert_eq!(lqshift(&["equivalence", &ex(), "--depth", "5"]).code, 4);
}

#[test]
fn seeded_batch_of_certificates() {
    let dir = TempDir::new().unwrap();
    for seed in 0..20u64 {
        let (inst, domain) = random_instance(seed, &RandomFamily::default()).unwrap();
        let p = write(&dir, &format!("r{seed}.json"), &instance_to_json(&inst, &domain).to_string());
        let s = seed.to_string();
        let r = lqshift(&["equivalence", &p, "--seed", &s, "--samples", "2000"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        assert_eq!(r.json()["results"]["passed"], true, "seed {seed}");
    }
}

#[test]
fn example5_pipeline() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("ex5");
    let r = lqshift(&["example5", "--depths", "2,4,8", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = rep["results"]["depths"].as_array().unwrap();
    let close = |v: &Value, x: f64| (v.as_f64().unwrap() - x).abs() <= 1e-12;
    assert!(close(&rows[0]["costAllOnes"], 0.75));
    assert!(close(&rows[0]["lambdaMax"], 2.0));
    assert!(close(&rows[0]["rootGradient"], -1.0));
    assert!(close(&rows[1]["costAllOnes"], 0.875));
    assert!(close(&rows[1]["lambdaMax"], 2.5));
    for row in rows {
        assert_eq!(row["optimum"]["cost"], 0.0);
        assert_eq!(row["stationarity"], "pass");
        assert_eq!(row["generalSmp"], "pass");
        assert_eq!(row["adjointMaxAbs"]["p"], 0.0);
        assert!(row["secondAdjoint"]["maxDeviationFrom2tMinus4"].as_f64().unwrap() <= 1e-12);
    }
    let ex = &rep["results"]["extrapolation"];
    assert!((ex["costAllOnes"].as_f64().unwrap() - 1.0).abs() <= 1e-9);
    assert!((ex["lambdaMax"].as_f64().unwrap() - 3.0).abs() <= 1e-9);
    assert!((ex["rootGradient"].as_f64().unwrap() + 1.5).abs() <= 1e-9);
    for f in ["costs_by_depth.csv", "P_depth8.csv", "weights_depth4.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn reports_are_deterministic_without_timings() {
    let args = ["equivalence", &ex(), "--seed", "7", "--samples", "500", "--no-timings"];
    let a = lqshift(&args);
    let b = lqshift(&args);
    assert_eq!(a.code, 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(a.json().get("timings").is_none());
    assert_eq!(a.json()["instanceDigest"].as_str().unwrap().len(), 64);
}
