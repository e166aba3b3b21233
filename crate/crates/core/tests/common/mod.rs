//! Independent oracles and fixture helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[derive(Deserialize)]
pub struct Chi2Table {
    pub table: Vec<[u64; 2]>,
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

#[derive(Deserialize)]
pub struct SfPoint {
    pub x: f64,
    pub df: u32,
    pub sf: f64,
}

#[derive(Deserialize)]
pub struct Chi2Reference {
    pub tables: Vec<Chi2Table>,
    pub sf: Vec<SfPoint>,
}

#[derive(Deserialize)]
pub struct Labeling {
    pub pred: Vec<i64>,
    pub gold: Vec<i64>,
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

#[derive(Deserialize)]
pub struct HcvReference {
    pub labelings: Vec<Labeling>,
    pub fixed: Labeling,
}

pub fn chi2_reference() -> Chi2Reference {
    serde_json::from_str(&std::fs::read_to_string(fixture("chi2_reference.json")).unwrap()).unwrap()
}

pub fn hcv_reference() -> HcvReference {
    serde_json::from_str(&std::fs::read_to_string(fixture("hcv_reference.json")).unwrap()).unwrap()
}

/// Pearson statistic written out cell by cell from the marginals.
pub fn brute_force_chi2(table: &[[u64; 2]]) -> f64 {
    let rows: Vec<f64> = table.iter().map(|r| (r[0] + r[1]) as f64).collect();
    let cols = [
        table.iter().map(|r| r[0]).sum::<u64>() as f64,
        table.iter().map(|r| r[1]).sum::<u64>() as f64,
    ];
    let n: f64 = rows.iter().sum();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (r[j] as f64 - e).powi(2) / e;
        }
    }
    stat
}

/// Γ(k/2) from factorials and √π, no log-gamma involved.
pub fn gamma_half(k: u32) -> f64 {
    if k.is_multiple_of(2) {
        (1..k / 2).map(f64::from).product()
    } else {
        // Γ(n + 1/2) = (2n)! / (4^n n!) √π with n = (k - 1) / 2
        let n = (k - 1) / 2;
        let mut g = std::f64::consts::PI.sqrt();
        for i in 0..n {
            g *= f64::from(i) + 0.5;
        }
        g
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (f(a) + 4.0 * fm + f(b)), fm)
    }
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, whole: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (left, _) = simpson(f, a, m);
        let (right, _) = simpson(f, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, eps / 2.0, left, depth - 1) + rec(f, m, b, eps / 2.0, right, depth - 1)
    }
    let (whole, _) = simpson(f, a, b);
    rec(f, a, b, eps, whole, depth)
}

/// Upper tail of the χ²(k) density, integrated numerically.
///
/// With t = u² the density becomes 2 u^(k-1) e^(-u²/2) / (2^(k/2) Γ(k/2)),
/// which is smooth at the origin even for k = 1.
pub fn numeric_chi2_sf(x: f64, k: u32) -> f64 {
    let norm = 2f64.powf(f64::from(k) / 2.0) * gamma_half(k);
    let g = move |u: f64| 2.0 * u.powi(k as i32 - 1) * (-u * u / 2.0).exp() / norm;
    let lo = x.sqrt();
    let hi = lo.max(1.0) + 40.0;
    // Split the range so the adaptive rule sees the peak.
    let mut total = 0.0;
    let steps = 64;
    for i in 0..steps {
        let a = lo + (hi - lo) * f64::from(i) / f64::from(steps);
        let b = lo + (hi - lo) * f64::from(i + 1) / f64::from(steps);
        total += adaptive_simpson(&g, a, b, 1e-14, 40);
    }
    total
}

/// Connected components by breadth-first search over an explicit adjacency matrix.
pub fn bfs_components(vectors: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut i = 0;
        while i < comp.len() {
            let v = comp[i];
            for w in 0..n {
                if !seen[w] && dot(&vectors[v], &vectors[w]) >= threshold {
                    seen[w] = true;
                    comp.push(w);
                }
            }
            i += 1;
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Reads a run-dir file into lines, for golden comparison.
pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub const GOLDEN_FILES: [&str; 7] = [
    "bias_associations.jsonl",
    "excluded.jsonl",
    "significant.jsonl",
    "unify_map.jsonl",
    "report_counts.csv",
    "per_location.csv",
    "selection_summary.json",
];

/// Compares run outputs with committed golden files, or rewrites them when
/// `UPDATE_GOLDEN=1` is set.
pub fn check_golden(run_dir: &Path, golden_dir: &Path) -> Result<(), String> {
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let mut diffs = Vec::new();
    for name in GOLDEN_FILES {
        let got = read(&run_dir.join(name));
        let want_path = golden_dir.join(name);
        if update {
            std::fs::create_dir_all(golden_dir).unwrap();
            std::fs::write(&want_path, &got).unwrap();
            continue;
        }
        match std::fs::read_to_string(&want_path) {
            Ok(want) if want == got => {}
            Ok(_) => diffs.push(format!("{name} differs from golden")),
            Err(e) => diffs.push(format!("{name}: {e}")),
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(diffs.join("; "))
    }
}

/// Snapshot of every file in a directory tree except the cache.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().to_string();
        if entry.path().is_file() {
            out.insert(name, std::fs::read(entry.path()).unwrap());
        }
    }
    out
}
