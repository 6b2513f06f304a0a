//! Interpretability metrics for fitted topics.

pub mod enrichment;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

pub use enrichment::{
    benjamini_hochberg, enrichment_score, gsea, hypergeom_upper_tail, max_running_sum_residual, ora, permutation_p, ranking, running_sum,
    EnrichmentRecord, EnrichmentResult, GseaConfig, Method,
};

use crate::data::PathwayDb;
use crate::error::{bail, Result};
use crate::model::{extract_top_genes, TopicOutputs};
use crate::tensor::Matrix;

/// NPMI of a gene pair from pathway co-membership. Pairs that never
/// co-occur, or involve a gene absent from every pathway, score 0.
pub fn npmi(p1: f64, p2: f64, p12: f64) -> f64 {
    if p12 <= 0.0 || p1 <= 0.0 || p2 <= 0.0 {
        return 0.0;
    }
    if p12 >= 1.0 {
        return 1.0;
    }
    let l12 = libm::log(p12);
    (l12 - libm::log(p1) - libm::log(p2)) / -l12
}

/// Mean pairwise NPMI of each topic's top genes, using pathways as
/// documents.
pub fn topic_coherences(top_genes: &[Vec<String>], db: &PathwayDb) -> Result<Vec<f64>> {
    if db.is_empty() {
        bail!(Data, "pathway database is empty");
    }
    let n = db.len() as f64;
    let counts = db.gene_counts();
    let p = |g: &str| counts.get(g).copied().unwrap_or(0) as f64 / n;
    top_genes
        .iter()
        .map(|list| {
            if list.len() < 2 {
                bail!(InvalidArgument, "coherence needs at least 2 genes per topic, got {}", list.len());
            }
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..list.len() {
                for j in i + 1..list.len() {
                    let (a, b) = (list[i].as_str(), list[j].as_str());
                    let both = db.iter().filter(|pw| pw.genes.contains(a) && pw.genes.contains(b)).count() as f64;
                    sum += npmi(p(a), p(b), both / n);
                    pairs += 1;
                }
            }
            Ok(sum / pairs as f64)
        })
        .collect()
}

pub fn topic_coherence(top_genes: &[Vec<String>], db: &PathwayDb) -> Result<f64> {
    let per_topic = topic_coherences(top_genes, db)?;
    if per_topic.is_empty() {
        bail!(InvalidArgument, "no topics");
    }
    Ok(per_topic.iter().sum::<f64>() / per_topic.len() as f64)
}

/// Distinct genes over all top-gene slots.
pub fn topic_diversity(top_genes: &[Vec<String>]) -> f64 {
    let total: usize = top_genes.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let unique: BTreeSet<&str> = top_genes.iter().flatten().map(String::as_str).collect();
    unique.len() as f64 / total as f64
}

/// Purity of argmax-topic groups against class labels.
pub fn interpretation_purity(theta: &Matrix, labels: &[usize]) -> Result<f64> {
    if theta.rows() != labels.len() {
        bail!(Shape, "{} labels for {} cells", labels.len(), theta.rows());
    }
    if labels.is_empty() {
        bail!(InvalidArgument, "no cells");
    }
    let assign = theta.argmax_rows();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut table = alloc::vec![alloc::vec![0usize; n_classes]; theta.cols()];
    for (&k, &y) in assign.iter().zip(labels) {
        table[k][y] += 1;
    }
    let hits: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsConfig {
    pub top_h: usize,
    pub ora_q_threshold: f64,
    pub gsea: GseaConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { top_h: 10, ora_q_threshold: 0.05, gsea: GseaConfig::default() }
    }
}

/// The ten interpretability scores plus the tables behind them.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterpretReport {
    pub tc: f64,
    pub td: f64,
    pub tq: f64,
    pub ip: f64,
    pub ora_n: f64,
    pub ora_u: f64,
    pub ora_q: f64,
    pub gsea_n: f64,
    pub gsea_u: f64,
    pub gsea_q: f64,
    pub topic_coherence: Vec<f64>,
    pub top_genes: Vec<Vec<String>>,
    pub ora: EnrichmentResult,
    pub gsea: EnrichmentResult,
}

impl InterpretReport {
    /// Largest deviation from the three product identities.
    pub fn identity_residual(&self) -> f64 {
        let a = (self.tq - self.tc * self.td).abs();
        let b = (self.ora_q - self.ora_n * self.ora_u).abs();
        let c = (self.gsea_q - self.gsea_n * self.gsea_u).abs();
        a.max(b).max(c)
    }
}

/// Scores fitted topics against class labels and a pathway database. The
/// ORA universe is the model's gene vocabulary.
pub fn full_report(outputs: &TopicOutputs, labels: &[usize], db: &PathwayDb, cfg: &MetricsConfig) -> Result<InterpretReport> {
    let h = cfg.top_h.min(outputs.gene_names.len());
    let top_genes = extract_top_genes(&outputs.gene_topic, &outputs.gene_names, h)?;
    let topic_coherence = topic_coherences(&top_genes, db)?;
    let tc = topic_coherence.iter().sum::<f64>() / topic_coherence.len().max(1) as f64;
    let td = topic_diversity(&top_genes);
    let ip = interpretation_purity(&outputs.theta, labels)?;
    let ora = ora(&top_genes, db, &outputs.gene_names, cfg.ora_q_threshold)?;
    let gsea = gsea(&outputs.gene_topic, &outputs.gene_names, db, &cfg.gsea)?;
    Ok(InterpretReport {
        tc,
        td,
        tq: tc * td,
        ip,
        ora_n: ora.n_unique,
        ora_u: ora.uniqueness,
        ora_q: ora.quality,
        gsea_n: gsea.n_unique,
        gsea_u: gsea.uniqueness,
        gsea_q: gsea.quality,
        topic_coherence,
        top_genes,
        ora,
        gsea,
    })
}
