//! In-memory datasets, preprocessing, pathway collections and the planted
//! synthetic generator.

mod pathways;
mod synth;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

pub use pathways::{Pathway, PathwayDb};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};

use crate::error::{bail, Result};
use crate::tensor::Matrix;

/// Cells × genes expression values with an optional external embedding.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub expression: Matrix,
    pub external: Option<Matrix>,
    pub gene_names: Vec<String>,
    pub cell_ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    /// Checks the invariants: nonnegative finite expression, unique gene
    /// names, and consistent row counts across every part.
    pub fn new(
        expression: Matrix,
        external: Option<Matrix>,
        gene_names: Vec<String>,
        cell_ids: Vec<String>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, v) = expression.shape();
        if let Some(pos) = expression.as_slice().iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            bail!(Data, "expression value at cell {}, gene {} is negative or not finite", pos / v, pos % v);
        }
        if gene_names.len() != v {
            bail!(Shape, "{} gene names for {} columns", gene_names.len(), v);
        }
        if cell_ids.len() != n {
            bail!(Shape, "{} cell ids for {} rows", cell_ids.len(), n);
        }
        check_unique(&gene_names, "gene name")?;
        if let Some(ext) = &external {
            if ext.rows() != n {
                bail!(Shape, "external embedding has {} rows, expression has {}", ext.rows(), n);
            }
            ext.ensure_finite("external embedding")?;
        }
        if let Some(l) = &labels {
            if l.len() != n {
                bail!(Shape, "{} labels for {} cells", l.len(), n);
            }
        }
        Ok(Self { expression, external, gene_names, cell_ids, labels })
    }

    pub fn n_cells(&self) -> usize {
        self.expression.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.expression.cols()
    }
}

pub(crate) fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            bail!(Data, "duplicate {} {:?}", what, name);
        }
    }
    Ok(())
}

/// Result of [`preprocess`]: log-transformed values restricted to the most
/// variable genes.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub expression: Matrix,
    /// Original column index of each kept gene, in selection order.
    pub selected: Vec<usize>,
}

/// `log1p` every entry, then keep the `n_hvg` genes with the highest
/// (population) variance of the transformed values. Genes are ordered by
/// descending variance, ties by original column index.
pub fn preprocess(x: &Matrix, n_hvg: usize) -> Result<Preprocessed> {
    if n_hvg > x.cols() {
        bail!(InvalidArgument, "asked for {} variable genes but only {} exist", n_hvg, x.cols());
    }
    let logged = x.map(libm::log1p);
    let variances = column_variances(&logged);
    let mut order: Vec<usize> = (0..x.cols()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    order.truncate(n_hvg);
    Ok(Preprocessed { expression: logged.select_cols(&order), selected: order })
}

pub fn column_variances(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    let means: Vec<f64> = m.col_sums().into_iter().map(|s| s / n).collect();
    let mut var = alloc::vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for ((v, &x), &mu) in var.iter_mut().zip(row).zip(&means) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    var
}

/// Maps label strings to dense ids in order of first appearance.
pub fn encode_labels<S: AsRef<str>>(labels: &[S]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = Vec::new();
    let ids = labels
        .iter()
        .map(|l| {
            let l = l.as_ref();
            match names.iter().position(|n| n == l) {
                Some(i) => i,
                None => {
                    names.push(l.into());
                    names.len() - 1
                }
            }
        })
        .collect();
    (ids, names)
}
