use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use super::{Dataset, PathwayDb};
use crate::error::{bail, Result};
use crate::rng::{normal_matrix, seeded, standard_normal};
use crate::tensor::Matrix;

/// Planted-topic generator settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_topics: usize,
    /// Base gene popularity falls off as `rank^-zipf_exponent`.
    pub zipf_exponent: f64,
    /// Std of the Gaussian noise added to the external view, in `[0, 1]`.
    pub noise_level: f64,
    pub view_dim: usize,
    /// Multiplier applied to each topic's signature block (10 by default;
    /// 1 disables the planted signal).
    pub boost: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cells: 500,
            n_genes: 300,
            n_topics: 5,
            zipf_exponent: 1.2,
            noise_level: 0.1,
            view_dim: 32,
            boost: 10.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_genes == 0 || self.n_topics == 0 || self.view_dim == 0 {
            bail!(InvalidArgument, "cells, genes, topics and view_dim must all be at least 1");
        }
        if self.n_topics > self.n_cells {
            bail!(InvalidArgument, "{} topics for {} cells", self.n_topics, self.n_cells);
        }
        if self.n_topics > self.n_genes {
            bail!(InvalidArgument, "{} topics need at least as many genes, got {}", self.n_topics, self.n_genes);
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            bail!(InvalidArgument, "zipf exponent must be >= 0, got {}", self.zipf_exponent);
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            bail!(InvalidArgument, "noise level must be in [0, 1], got {}", self.noise_level);
        }
        if !(self.boost > 0.0 && self.boost.is_finite()) {
            bail!(InvalidArgument, "boost must be positive, got {}", self.boost);
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.n_genes / self.n_topics
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// K × V planted topic-gene distributions (rows sum to 1).
    pub topic_gene: Matrix,
    /// Genes boosted by each topic.
    pub signature_blocks: Vec<Range<usize>>,
    pub labels: Vec<usize>,
    pub config: SynthConfig,
}

impl SyntheticDataset {
    /// One pathway per planted topic holding that topic's signature genes.
    pub fn signature_pathways(&self) -> PathwayDb {
        let mut db = PathwayDb::new();
        for (k, block) in self.signature_blocks.iter().enumerate() {
            let genes = block.clone().map(|g| self.dataset.gene_names[g].clone());
            db.insert(format!("signature_{k}"), genes).expect("blocks are disjoint and non-empty");
        }
        db
    }
}

pub const LIBRARY_SIZE: core::ops::RangeInclusive<u32> = 800..=1200;

pub fn gene_name(g: usize) -> String {
    format!("G{g:05}")
}

pub fn cell_name(i: usize) -> String {
    format!("cell_{i:05}")
}

/// Draws a planted-topic count matrix and a matching external view.
///
/// Topic `k` boosts genes `k·b .. (k+1)·b` (with `b = ⌊V/K⌋`) on top of a
/// Zipf popularity profile. Cell `i` belongs to topic `i mod K`, gets a
/// library size uniform in 800..=1200, and its counts are a multinomial draw
/// from its topic's distribution. The external view is the one-hot topic
/// projected through a fixed Gaussian K × d matrix plus Gaussian noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (n, v, k) = (cfg.n_cells, cfg.n_genes, cfg.n_topics);
    let mut rng = seeded(cfg.seed);

    let base: Vec<f64> = (0..v).map(|g| libm::pow((g + 1) as f64, -cfg.zipf_exponent)).collect();
    let b = cfg.block_size();
    let blocks: Vec<Range<usize>> = (0..k).map(|t| t * b..(t + 1) * b).collect();
    let mut topic_gene = Matrix::zeros(k, v);
    for (t, block) in blocks.iter().enumerate() {
        let row = topic_gene.row_mut(t);
        row.copy_from_slice(&base);
        for g in block.clone() {
            row[g] *= cfg.boost;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }

    let projection = normal_matrix(&mut rng, k, cfg.view_dim, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();

    let cumulative: Vec<Vec<f64>> = topic_gene
        .iter_rows()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();

    let mut counts = Matrix::zeros(n, v);
    let mut external = Matrix::zeros(n, cfg.view_dim);
    for i in 0..n {
        let t = labels[i];
        let library = rng.gen_range(LIBRARY_SIZE);
        let cdf = &cumulative[t];
        let total = cdf[v - 1];
        let row = counts.row_mut(i);
        for _ in 0..library {
            let u = rng.gen::<f64>() * total;
            let g = cdf.partition_point(|&c| c <= u).min(v - 1);
            row[g] += 1.0;
        }
        let ext = external.row_mut(i);
        for (e, &p) in ext.iter_mut().zip(projection.row(t)) {
            *e = p + cfg.noise_level * standard_normal(&mut rng);
        }
    }

    let gene_names = (0..v).map(gene_name).collect();
    let cell_ids = (0..n).map(cell_name).collect();
    let dataset = Dataset::new(counts, Some(external), gene_names, cell_ids, Some(labels.clone()))?;
    Ok(SyntheticDataset { dataset, topic_gene, signature_blocks: blocks, labels, config: cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_cells: 40, n_genes: 30, n_topics: 4, view_dim: 6, ..Default::default() }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset.expression, b.dataset.expression);
        assert_eq!(a.dataset.external, b.dataset.external);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.dataset.expression, c.dataset.expression);
    }

    #[test]
    fn zero_noise_gives_identical_views_per_topic() {
        let cfg = SynthConfig { noise_level: 0.0, view_dim: 4, ..small() };
        let s = generate_synthetic(&cfg).unwrap();
        let ext = s.dataset.external.as_ref().unwrap();
        for i in 0..cfg.n_cells {
            for j in 0..cfg.n_cells {
                if s.labels[i] == s.labels[j] {
                    assert_eq!(ext.row(i), ext.row(j));
                }
            }
        }
    }

    #[test]
    fn uniform_case_has_equal_marginals() {
        let cfg = SynthConfig { zipf_exponent: 0.0, boost: 1.0, n_cells: 400, n_genes: 10, n_topics: 2, ..small() };
        let s = generate_synthetic(&cfg).unwrap();
        for row in s.topic_gene.iter_rows() {
            for &p in row {
                assert!((p - 0.1).abs() < 1e-15);
            }
        }
        let totals = s.dataset.expression.col_sums();
        let all: f64 = totals.iter().sum();
        for t in totals {
            // each gene gets 1/10 of ~400k counts; binomial sd ~190
            assert!((t / all - 0.1).abs() < 0.005);
        }
    }

    #[test]
    fn library_sizes_and_labels() {
        let s = generate_synthetic(&small()).unwrap();
        for (i, total) in s.dataset.expression.row_sums().into_iter().enumerate() {
            assert!((800.0..=1200.0).contains(&total));
            assert_eq!(s.labels[i], i % 4);
        }
        for row in s.topic_gene.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signature_genes_are_enriched() {
        let s = generate_synthetic(&small()).unwrap();
        let b = s.config.block_size();
        for t in 0..4 {
            let inside = s.topic_gene[(t, t * b)];
            let others = s.topic_gene[((t + 1) % 4, t * b)];
            assert!((inside / others - 10.0 * ratio_norm(&s, t, (t + 1) % 4)).abs() < 1e-9);
        }
    }

    fn ratio_norm(s: &SyntheticDataset, a: usize, b: usize) -> f64 {
        // p_a(g)/p_b(g) = boost · Z_b / Z_a for g in block a
        let z = |t: usize| -> f64 {
            let block = &s.signature_blocks[t];
            (0..s.config.n_genes)
                .map(|g| {
                    let base = libm::pow((g + 1) as f64, -s.config.zipf_exponent);
                    if block.contains(&g) { base * 10.0 } else { base }
                })
                .sum()
        };
        z(b) / z(a)
    }

    #[test]
    fn validation() {
        assert!(generate_synthetic(&SynthConfig { n_topics: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { noise_level: 1.5, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { n_topics: 41, ..small() }).is_err());
    }

    #[test]
    fn signature_pathways_match_blocks() {
        let s = generate_synthetic(&small()).unwrap();
        let db = s.signature_pathways();
        assert_eq!(db.len(), 4);
        assert!(db.get(1).genes.contains(&gene_name(s.config.block_size())));
    }
}
