//! Homogeneity, completeness and V-measure of a clustering against gold classes.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label sequences differ in length ({pred} vs {gold})")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("label sequences are empty")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvalResult {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn dense<T: Hash + Eq>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let n = ids.len();
            *ids.entry(l).or_insert(n)
        })
        .collect();
    (out, ids.len())
}

fn entropy(labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0f64; k];
    for &l in labels {
        counts[l] += 1.0;
    }
    let n = labels.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| (c / n) * (c.ln() - n.ln()))
        .sum::<f64>()
}

fn mutual_information(a: &[usize], ka: usize, b: &[usize], kb: usize) -> f64 {
    if ka == 1 || kb == 1 {
        return 0.0;
    }
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa = vec![0f64; ka];
    let mut pb = vec![0f64; kb];
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let n = a.len() as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &nxy)| {
            let p = nxy / n;
            p * (nxy.ln() - n.ln()) + p * (-(pa[x] * pb[y]).ln() + n.ln() + n.ln())
        })
        .sum();
    mi.max(0.0)
}

/// All three scores at once; `gold` plays the role of the true classes.
pub fn homogeneity_completeness_v<P: Hash + Eq, G: Hash + Eq>(
    pred: &[P],
    gold: &[G],
) -> Result<ClusterEvalResult, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (p, kp) = dense(pred);
    let (g, kg) = dense(gold);
    let h_gold = entropy(&g, kg);
    let h_pred = entropy(&p, kp);
    let mi = mutual_information(&g, kg, &p, kp);
    let homogeneity = if h_gold == 0.0 { 1.0 } else { mi / h_gold };
    let completeness = if h_pred == 0.0 { 1.0 } else { mi / h_pred };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(ClusterEvalResult {
        homogeneity,
        completeness,
        v_measure,
    })
}

pub fn homogeneity<P: Hash + Eq, G: Hash + Eq>(
    pred: &[P],
    gold: &[G],
) -> Result<f64, MetricsError> {
    homogeneity_completeness_v(pred, gold).map(|r| r.homogeneity)
}

pub fn completeness<P: Hash + Eq, G: Hash + Eq>(
    pred: &[P],
    gold: &[G],
) -> Result<f64, MetricsError> {
    homogeneity_completeness_v(pred, gold).map(|r| r.completeness)
}

pub fn v_measure<P: Hash + Eq, G: Hash + Eq>(pred: &[P], gold: &[G]) -> Result<f64, MetricsError> {
    homogeneity_completeness_v(pred, gold).map(|r| r.v_measure)
}
