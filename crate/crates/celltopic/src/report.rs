//! Evaluation outputs: the JSON report, clustering summary and enrichment
//! tables.

use std::fmt::Write as _;
use std::path::Path;

use celltopic_core::metrics::{EnrichmentResult, InterpretReport, MetricsConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::atomic_write;

/// JSON schema that every `report.json` satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/report.schema.json");

/// The ten interpretability scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
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
}

impl From<&InterpretReport> for Scores {
    fn from(r: &InterpretReport) -> Self {
        Self {
            tc: r.tc,
            td: r.td,
            tq: r.tq,
            ip: r.ip,
            ora_n: r.ora_n,
            ora_u: r.ora_u,
            ora_q: r.ora_q,
            gsea_n: r.gsea_n,
            gsea_u: r.gsea_u,
            gsea_q: r.gsea_q,
        }
    }
}

impl Scores {
    pub fn identity_residual(&self) -> f64 {
        let a = (self.tq - self.tc * self.td).abs();
        let b = (self.ora_q - self.ora_n * self.ora_u).abs();
        let c = (self.gsea_q - self.gsea_n * self.gsea_u).abs();
        a.max(b).max(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub mode: String,
    pub n_clusters: usize,
    pub ari: f64,
    pub nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metrics: MetricsConfig,
    pub cluster_mode: String,
    pub kmeans_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Scores,
    pub clustering: ClusterScores,
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_topics: usize,
    pub n_pathways: usize,
    /// Coherence is an NPMI mean and may be negative.
    pub negative_tc: bool,
    pub topic_coherence: Vec<f64>,
    pub top_genes: Vec<Vec<String>>,
    pub ora_skipped: Vec<(String, String)>,
    pub gsea_skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringOutput {
    pub scores: ClusterScores,
    pub cell_ids: Vec<String>,
    pub assignments: Vec<usize>,
}

/// `topic,pathway,p,q,statistic,overlap,significant` rows.
pub fn write_enrichment_csv(path: &Path, result: &EnrichmentResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(["topic", "pathway", "p", "q", "statistic", "overlap", "significant"]).map_err(err)?;
    for r in &result.records {
        w.write_record([
            r.topic.to_string(),
            r.pathway.clone(),
            r.p.to_string(),
            r.q.to_string(),
            r.statistic.to_string(),
            r.overlap.to_string(),
            r.significant.to_string(),
        ])
        .map_err(err)?;
    }
    atomic_write(path, &w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
}

/// Plain-text summary of a report.
pub fn render(r: &EvalReport) -> String {
    let mut s = String::new();
    let sc = &r.scores;
    let _ = writeln!(s, "cells {}  genes {}  topics {}  pathways {}", r.n_cells, r.n_genes, r.n_topics, r.n_pathways);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:>10}", "metric", "value");
    for (name, v) in [
        ("TC", sc.tc),
        ("TD", sc.td),
        ("TQ", sc.tq),
        ("IP", sc.ip),
        ("ORA_N", sc.ora_n),
        ("ORA_U", sc.ora_u),
        ("ORA_Q", sc.ora_q),
        ("GSEA_N", sc.gsea_n),
        ("GSEA_U", sc.gsea_u),
        ("GSEA_Q", sc.gsea_q),
        ("ARI", r.clustering.ari),
        ("NMI", r.clustering.nmi),
    ] {
        let _ = writeln!(s, "{name:<8} {v:>10.4}");
    }
    let _ = writeln!(s);
    for (k, genes) in r.top_genes.iter().enumerate() {
        let tc = r.topic_coherence.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "topic_{k:<4} tc {tc:>7.4}  {}", genes.join(" "));
    }
    if r.negative_tc {
        let _ = writeln!(s, "\nnote: mean coherence is negative");
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}
