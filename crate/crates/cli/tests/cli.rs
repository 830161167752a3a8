//! End-to-end runs of the `marglik` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn marglik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marglik"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn probs(report: &Value) -> Vec<f64> {
    report["probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

#[test]
fn enumerate_counts_and_lists() {
    let out = marglik(&["enumerate", "8,20,12/12,7,21", "--count-only"]);
    assert_eq!(stdout(&out).trim(), "2160");

    let listing = stdout(&marglik(&["enumerate", "1,1/1,1"]));
    let mut lines = listing.lines();
    assert_eq!(lines.next(), Some("table,row,c1,c2"));
    let tables: std::collections::BTreeSet<&str> =
        lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tables.len(), 2);

    let listing = stdout(&marglik(&["enumerate", "2,2/2,2"]));
    assert_eq!(listing.lines().count(), 1 + 3 * 2);
}

#[test]
fn enumerate_failures_map_to_exit_codes() {
    let out = marglik(&["enumerate", "8,20,12/12,7,21", "--limit", "100"]);
    assert_eq!(out.status.code(), Some(3));
    let out = marglik(&["enumerate", "8,20,12/12,7,22"]);
    assert_eq!(out.status.code(), Some(2));
    let out = marglik(&["enumerate", "1,x/1,1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extreme_prints_the_requested_corner() {
    let text = stdout(&marglik(&[
        "extreme",
        "8,20,12/12,7,21",
        "--perms",
        "1,2,3/1,2,3",
    ]));
    assert!(text.starts_with("# perms"));
    // Row-major north-west fill of the unpermuted margins.
    let nw = [[8, 0, 0], [4, 7, 9], [0, 0, 12]];
    let body: Vec<Vec<u32>> = text
        .lines()
        .skip(1)
        .take(3)
        .map(|l| {
            l.split_whitespace()
                .take(3)
                .map(|x| x.parse().unwrap())
                .collect()
        })
        .collect();
    for (got, want) in body.iter().zip(nw) {
        assert_eq!(got.as_slice(), want.as_slice());
    }

    let all = stdout(&marglik(&["extreme", "1,1/1,1", "--all"]));
    assert_eq!(all.matches("# perms").count(), 2);

    let out = marglik(&["extreme", "1,1/1,1", "--perms", "1,2,3/1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scan_layout_and_determinism() {
    let args = ["scan", "2,2/2,2", "--random-mixtures", "5", "--seed", "9"];
    let a = stdout(&marglik(&args));
    let b = stdout(&marglik(&args));
    assert_eq!(a, b);
    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 + 1 + 5);
    assert_eq!(rows[3][2], "independence");
    assert!(rows[4..].iter().all(|r| r[2] == "random_mixture"));
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() <= 0.0));
}

#[test]
fn simulate_is_reproducible_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        stdout(&marglik(&[
            "simulate",
            "--seed",
            "4",
            "--out",
            p.to_str().unwrap(),
        ]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let truth = json(&dir.path().join("a.truth.json"));
    let pi: Vec<Vec<f64>> = serde_json::from_value(truth["pi"].clone()).unwrap();
    assert_eq!(
        pi,
        vec![
            vec![0.49, 0.28, 0.23],
            vec![0.30, 0.48, 0.22],
            vec![0.21, 0.32, 0.47]
        ]
    );
    assert_eq!(truth["units"], 60);
    assert_eq!(truth["unit_size"], 40);
}

#[test]
fn simulated_column_shares_follow_the_truth() {
    let text = stdout(&marglik(&[
        "simulate", "--s", "600", "--n", "400", "--seed", "2",
    ]));
    let mut cols = [0.0f64; 3];
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line
            .split(',')
            .skip(4)
            .map(|x| x.parse().unwrap())
            .collect();
        for (c, x) in cols.iter_mut().zip(f) {
            *c += x;
        }
    }
    let total: f64 = cols.iter().sum();
    // Uniform rows: column shares are the column means of the truth.
    for (c, want) in cols.iter().zip([1.0 / 3.0, 0.36, 0.92 / 3.0]) {
        assert!((c / total - want).abs() < 0.01, "{} vs {want}", c / total);
    }
}

#[test]
fn estimate_methods_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    let units = dir.path().join("units.csv");
    stdout(&marglik(&[
        "simulate",
        "--seed",
        "1",
        "--out",
        units.to_str().unwrap(),
    ]));
    let units = units.to_str().unwrap();

    let ml = dir.path().join("ml.json");
    stdout(&marglik(&[
        "estimate",
        units,
        "--method",
        "ml",
        "--out",
        ml.to_str().unwrap(),
    ]));
    let ml = json(&ml);
    assert_eq!(ml["converged"], true);
    assert!(ml["m_e"].as_f64().unwrap() < 0.15, "m_e {}", ml["m_e"]);
    assert!(!ml["trace"].as_array().unwrap().is_empty());
    for row in probs(&ml).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let ind = dir.path().join("ind.json");
    stdout(&marglik(&[
        "estimate",
        units,
        "--method",
        "independence",
        "--out",
        ind.to_str().unwrap(),
    ]));
    let ind = probs(&json(&ind));
    let file = std::fs::read_to_string(units).unwrap();
    let mut cols = [0.0f64; 3];
    for line in file.lines().skip(1) {
        let f: Vec<f64> = line
            .split(',')
            .skip(4)
            .map(|x| x.parse().unwrap())
            .collect();
        for (c, x) in cols.iter_mut().zip(f) {
            *c += x;
        }
    }
    let total: f64 = cols.iter().sum();
    for row in ind.chunks(3) {
        for (p, c) in row.iter().zip(cols) {
            assert!((p - c / total).abs() < 1e-9);
        }
    }

    let g = marglik(&["estimate", units, "--method", "goodman"]);
    let report: Value = serde_json::from_str(&stdout(&g)).unwrap();
    assert_eq!(report["method"], "goodman");
    assert!(report["raw"].as_array().unwrap().len() == 9);
}

#[test]
fn goodman_recovers_noiseless_fixture() {
    // Every unit's table is exactly rows x pi, so regression is exact.
    let pi = [[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]];
    let rows = [[10, 20, 30], [30, 10, 20], [20, 30, 10], [10, 10, 40]];
    let mut text = String::from("unit,r1,r2,r3,c1,c2,c3\n");
    for (h, r) in rows.iter().enumerate() {
        let cols: Vec<u32> = (0..3)
            .map(|j| {
                (0..3)
                    .map(|i| (r[i] as f64 * pi[i][j]).round() as u32)
                    .sum()
            })
            .collect();
        text += &format!(
            "u{h},{},{},{},{},{},{}\n",
            r[0], r[1], r[2], cols[0], cols[1], cols[2]
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exact.csv");
    std::fs::write(&path, text).unwrap();
    let out = marglik(&["estimate", path.to_str().unwrap(), "--method", "goodman"]);
    check_exact(&out, &pi);
}

fn check_exact(out: &Output, pi: &[[f64; 3]; 3]) {
    let report: Value = serde_json::from_str(&stdout(out)).unwrap();
    let got = probs(&report);
    for (g, w) in got.iter().zip(pi.iter().flatten()) {
        assert!((g - w).abs() < 1e-8, "{got:?}");
    }
    assert_eq!(report["clipped_cells"], 0);
}

#[test]
fn too_few_units_is_an_identification_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("few.csv");
    std::fs::write(
        &path,
        "unit,r1,r2,r3,c1,c2,c3\na,3,3,4,4,3,3\nb,2,5,3,3,3,4\n",
    )
    .unwrap();
    let out = marglik(&["estimate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let out = marglik(&["estimate", path.to_str().unwrap(), "--method", "goodman"]);
    assert_eq!(out.status.code(), Some(4));
}
