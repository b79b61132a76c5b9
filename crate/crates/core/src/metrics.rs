//! Clustering quality against ground truth: NMI, ARI and Hungarian-matched
//! accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("label length mismatch: truth={truth}, predicted={predicted}")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("need at least {needed} labels, got {got}")]
    TooFew { needed: usize, got: usize },
}

/// Counts `n_uv` of points with true class `u` and predicted cluster `v`.
/// Classes and clusters are re-indexed densely in ascending label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        check_lengths(truth, pred, 0)?;
        let rows = dense_index(truth);
        let cols = dense_index(pred);
        let mut counts = vec![vec![0; cols.len()]; rows.len()];
        for (t, p) in truth.iter().zip(pred) {
            counts[rows[t]][cols[p]] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..cols.len()).map(|v| counts.iter().map(|r| r[v]).sum()).collect();
        Ok(Self { counts, row_sums, col_sums, total: truth.len() })
    }
}

fn dense_index(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut index: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
    for (i, slot) in index.values_mut().enumerate() {
        *slot = i;
    }
    index
}

fn check_lengths(truth: &[usize], pred: &[usize], needed: usize) -> Result<(), MetricError> {
    if truth.len() != pred.len() {
        return Err(MetricError::LengthMismatch { truth: truth.len(), predicted: pred.len() });
    }
    if truth.len() < needed {
        return Err(MetricError::TooFew { needed, got: truth.len() });
    }
    Ok(())
}

fn entropy(sums: &[usize], total: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization and
/// natural logarithms. Two single-cluster partitions score 1, exactly one
/// single-cluster partition scores 0.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    check_lengths(truth, pred, 1)?;
    let table = ContingencyTable::new(truth, pred)?;
    let n = table.total as f64;
    let h_true = entropy(&table.row_sums, n);
    let h_pred = entropy(&table.col_sums, n);
    match (h_true == 0.0, h_pred == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut mi = 0.0;
    for (u, row) in table.counts.iter().enumerate() {
        for (v, &count) in row.iter().enumerate() {
            if count > 0 {
                let c = count as f64;
                mi += c / n * (n * c / (table.row_sums[u] as f64 * table.col_sums[v] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (h_true + h_pred))).clamp(0.0, 1.0))
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index under the permutation model.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    check_lengths(truth, pred, 2)?;
    let table = ContingencyTable::new(truth, pred)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = table.row_sums.iter().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = table.col_sums.iter().map(|&c| comb2(c)).sum();
    let expected = sum_rows * sum_cols / comb2(table.total);
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    // zero only when both partitions are all-singletons or both all-one
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Accuracy under the best one-to-one mapping of predicted clusters to true
/// classes.
pub fn hungarian_acc(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    check_lengths(truth, pred, 1)?;
    let table = ContingencyTable::new(truth, pred)?;
    let size = table.row_sums.len().max(table.col_sums.len());
    let max = table.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    // square cost matrix: rows = predicted clusters, cols = classes, zero padded
    let mut cost = vec![vec![max; size]; size];
    for (u, row) in table.counts.iter().enumerate() {
        for (v, &count) in row.iter().enumerate() {
            cost[v][u] = max - count as i64;
        }
    }
    let assignment = min_cost_assignment(&cost);
    let matched: usize = assignment
        .iter()
        .enumerate()
        .filter(|&(v, &u)| u < table.row_sums.len() && v < table.col_sums.len())
        .map(|(v, &u)| table.counts[u][v])
        .sum();
    Ok(matched as f64 / table.total as f64)
}

/// Minimum-cost perfect matching on a square matrix by the shortest
/// augmenting path method with potentials, O(n^3). Returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let row0 = owner[col0];
            let mut delta = i64::MAX;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[row0 - 1][col - 1] - u[row0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// The three headline scores for one clustering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub k: usize,
    pub n: usize,
}

pub fn score_report(pred: &[usize], truth: &[usize], k: usize) -> Result<ScoreReport, MetricError> {
    Ok(ScoreReport {
        nmi: nmi(truth, pred)?,
        ari: ari(truth, pred)?,
        acc: hungarian_acc(truth, pred)?,
        k,
        n: truth.len(),
    })
}
