//! Reference implementations used as test oracles. Each one is the slowest
//! obviously-correct formulation of its quantity and shares no code with the
//! library.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use lanid_core::data::EmbeddingMatrix;
use lanid_core::trainer::{triplet_loss, Adapter, Triplet};

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// ARI from explicit enumeration of all point pairs.
pub fn ari_pairs(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len();
    let (mut both, mut same_t, mut same_p) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let t = truth[i] == truth[j];
            let p = pred[i] == pred[j];
            same_t += f64::from(u8::from(t));
            same_p += f64::from(u8::from(p));
            both += f64::from(u8::from(t && p));
        }
    }
    let total = choose2(n as f64);
    let expected = same_t * same_p / total;
    let max = (same_t + same_p) / 2.0;
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with arithmetic-mean normalization, straight from the definitions.
pub fn nmi_entropy(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let h_t = entropy(rows.values().copied(), n);
    let h_p = entropy(cols.values().copied(), n);
    if h_t == 0.0 && h_p == 0.0 {
        return 1.0;
    }
    if h_t == 0.0 || h_p == 0.0 {
        return 0.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(t, p), &c)| {
            let c = c as f64;
            c / n * (c * n / (rows[&t] as f64 * cols[&p] as f64)).ln()
        })
        .sum();
    mi / ((h_t + h_p) / 2.0)
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

/// Best accuracy over every one-to-one relabeling of predicted clusters.
pub fn acc_exhaustive(truth: &[usize], pred: &[usize]) -> f64 {
    let size = truth.iter().chain(pred).max().map_or(1, |m| m + 1);
    let mut perms = Vec::new();
    permutations(&mut (0..size).collect(), 0, &mut perms);
    let best = perms
        .iter()
        .map(|perm| truth.iter().zip(pred).filter(|(&t, &p)| perm[p] == t).count())
        .max()
        .unwrap_or(0);
    best as f64 / truth.len() as f64
}

/// Textbook DBSCAN: points visited in id order, neighbourhoods found by full
/// scan, a cluster expanded completely before the next one starts.
pub struct RefDbscan {
    pub labels: Vec<Option<usize>>,
    pub core: Vec<bool>,
}

pub fn dbscan_reference(points: &[Vec<f64>], eps: f64, min_pts: usize) -> RefDbscan {
    let n = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(&points[i], &points[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut cluster = 0;
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        let mut stack = vec![start];
        labels[start] = Some(cluster);
        while let Some(p) = stack.pop() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    stack.push(q);
                }
            }
        }
        cluster += 1;
    }
    RefDbscan { labels, core }
}

/// Whether two labelings induce the same partition (noise must match noise).
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut forward: BTreeMap<usize, usize> = BTreeMap::new();
    let mut backward: BTreeMap<usize, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *forward.entry(*x).or_insert(*y) != *y || *backward.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Central finite-difference gradient of the triplet loss with respect to
/// every adapter parameter.
pub fn fd_gradient(adapter: &Adapter, triplet: &Triplet, base: &EmbeddingMatrix, margin: f64, step: f64) -> Vec<f64> {
    let flat = adapter.to_flat();
    let loss_at = |params: &[f64]| {
        let mut a = adapter.clone();
        a.set_flat(params).unwrap();
        let f = |id: usize| a.forward(base.row(id));
        triplet_loss(&f(triplet.anchor), &f(triplet.positive), &f(triplet.negative), margin)
    };
    (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += step;
            minus[i] -= step;
            (loss_at(&plus) - loss_at(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Relative error with an absolute floor so that near-zero entries compare
/// on absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
