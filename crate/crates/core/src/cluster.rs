//! Clustering agreement metrics and clustering of cell-topic proportions.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::rng::seeded;
use crate::tensor::{sq_euclidean, Matrix};

/// Counts of cells per (predicted cluster, true class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[i][j]`: cells in predicted cluster `i` with true class `j`.
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    /// Label values are compacted in first-appearance order.
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            bail!(Shape, "{} predictions for {} labels", pred.len(), truth.len());
        }
        let p = compact(pred);
        let t = compact(truth);
        let r = p.iter().max().map_or(0, |m| m + 1);
        let c = t.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&a, &b) in p.iter().zip(&t) {
            counts[a][b] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(Self { counts, row_sums, col_sums, n: pred.len() as u64 })
    }
}

fn compact(labels: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(pred, truth)?;
    if t.n < 2 {
        bail!(InvalidArgument, "ARI needs at least 2 cells");
    }
    let index: f64 = t.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&c| choose2(c)).sum();
    let b: f64 = t.col_sums.iter().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(t.n);
    let max = 0.5 * (a + b);
    if max == expected {
        // both partitions trivial in the same way
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Normalized mutual information, `I / sqrt(H_pred · H_truth)`.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(pred, truth)?;
    if t.n < 2 {
        bail!(InvalidArgument, "NMI needs at least 2 cells");
    }
    let n = t.n as f64;
    let hp = entropy(&t.row_sums, n);
    let ht = entropy(&t.col_sums, n);
    if hp == 0.0 || ht == 0.0 {
        let same = t.row_sums.len() == t.col_sums.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * libm::log(c * n / (t.row_sums[i] as f64 * t.col_sums[j] as f64));
            }
        }
    }
    Ok((mi / libm::sqrt(hp * ht)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMode {
    Argmax,
    KMeans { k: usize, seed: u64 },
}

pub const KMEANS_MAX_ITER: usize = 300;

pub fn cluster_theta(theta: &Matrix, mode: ClusterMode) -> Result<Vec<usize>> {
    match mode {
        ClusterMode::Argmax => Ok(theta.argmax_rows()),
        ClusterMode::KMeans { k, seed } => kmeans(theta, k, seed),
    }
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or [`KMEANS_MAX_ITER`] is reached.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.rows();
    if k == 0 || k > n {
        bail!(InvalidArgument, "k = {} must be in 1..={}", k, n);
    }
    let mut rng = seeded(seed);
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_euclidean(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > u {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let c = points.row(next).to_vec();
        for (d, p) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(sq_euclidean(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter_rows().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_euclidean(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; points.cols()]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(assign)
}
