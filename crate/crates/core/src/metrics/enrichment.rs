//! Over-representation and gene-set enrichment tests with FDR control.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::data::PathwayDb;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    Ora,
    Gsea,
}

/// One (topic, pathway) test.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnrichmentRecord {
    pub topic: usize,
    pub pathway: String,
    pub p: f64,
    pub q: f64,
    /// Fold enrichment of the overlap for ORA, enrichment score for GSEA.
    pub statistic: f64,
    /// Top genes in the pathway (ORA) or pathway size in the ranking (GSEA).
    pub overlap: usize,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnrichmentResult {
    pub method: Method,
    pub q_threshold: f64,
    pub records: Vec<EnrichmentRecord>,
    /// Pathways left out of every test, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Distinct significant pathways.
    pub n_unique: f64,
    /// Distinct over total significant pathways; 1 when nothing is significant.
    pub uniqueness: f64,
    /// `n_unique · uniqueness`.
    pub quality: f64,
}

impl EnrichmentResult {
    fn finish(method: Method, q_threshold: f64, mut records: Vec<EnrichmentRecord>, skipped: Vec<(String, String)>) -> Result<Self> {
        let p: Vec<f64> = records.iter().map(|r| r.p).collect();
        let q = benjamini_hochberg(&p)?;
        let mut hits: Vec<&str> = Vec::new();
        for (r, q) in records.iter_mut().zip(q) {
            r.q = q;
            r.significant = q < q_threshold;
        }
        for r in &records {
            if r.significant {
                hits.push(&r.pathway);
            }
        }
        let unique = hits.iter().collect::<BTreeSet<_>>().len() as f64;
        let uniqueness = if hits.is_empty() { 1.0 } else { unique / hits.len() as f64 };
        Ok(Self { method, q_threshold, records, skipped, n_unique: unique, uniqueness, quality: unique * uniqueness })
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P[X ≥ observed]` for a hypergeometric draw of `draws` items from a
/// population with `successes` marked items.
pub fn hypergeom_upper_tail(population: u64, successes: u64, draws: u64, observed: u64) -> Result<f64> {
    if successes > population || draws > population {
        bail!(InvalidArgument, "successes {} and draws {} must not exceed population {}", successes, draws, population);
    }
    let lo = observed.max((draws + successes).saturating_sub(population));
    let hi = draws.min(successes);
    if observed > hi {
        return Ok(0.0);
    }
    if lo == 0 {
        return Ok(1.0);
    }
    let denom = ln_choose(population, draws);
    let mut p = 0.0;
    for i in lo..=hi {
        p += libm::exp(ln_choose(successes, i) + ln_choose(population - successes, draws - i) - denom);
    }
    Ok(p.min(1.0))
}

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(InvalidArgument, "p-value {} outside [0, 1]", bad);
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.max(p[i]).min(1.0);
    }
    Ok(q)
}

/// Hypergeometric over-representation of each topic's top genes in each
/// pathway, restricted to `universe`. BH runs over all tests jointly.
pub fn ora(top_genes: &[Vec<String>], db: &PathwayDb, universe: &[String], q_threshold: f64) -> Result<EnrichmentResult> {
    let universe: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    for list in top_genes {
        if let Some(g) = list.iter().find(|g| !universe.contains(g.as_str())) {
            bail!(Data, "top gene {:?} is not in the universe", g);
        }
    }
    let n = universe.len() as u64;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut tested = 0;
    let pathways: Vec<(&str, BTreeSet<&str>)> = db
        .iter()
        .map(|p| (p.name.as_str(), p.genes.iter().map(String::as_str).filter(|g| universe.contains(g)).collect()))
        .collect();
    for (name, genes) in &pathways {
        if genes.is_empty() {
            skipped.push(((*name).into(), "no genes in universe".into()));
        } else {
            tested += 1;
        }
    }
    if tested == 0 {
        bail!(Data, "no pathway shares a gene with the universe");
    }
    for (topic, list) in top_genes.iter().enumerate() {
        let draws = list.len() as u64;
        for (name, genes) in pathways.iter().filter(|(_, g)| !g.is_empty()) {
            let s = genes.len() as u64;
            let x = list.iter().filter(|g| genes.contains(g.as_str())).count() as u64;
            let expected = draws as f64 * s as f64 / n as f64;
            records.push(EnrichmentRecord {
                topic,
                pathway: (*name).into(),
                p: hypergeom_upper_tail(n, s, draws, x)?,
                q: 0.0,
                statistic: if expected > 0.0 { x as f64 / expected } else { 0.0 },
                overlap: x as usize,
                significant: false,
            });
        }
    }
    EnrichmentResult::finish(Method::Ora, q_threshold, records, skipped)
}

/// Weighted running sum over a descending ranking. `scores[i]` is the score
/// of the gene at rank `i`; `hits[i]` marks pathway membership. Hits add
/// `|score|^weight / Σ_hits |score|^weight`, misses subtract `1/(V − |S|)`.
/// Returns `None` when the walk is undefined (no hits, no misses, or zero
/// hit weight).
pub fn running_sum(scores: &[f64], hits: &[bool], weight: f64) -> Option<Vec<f64>> {
    let v = scores.len();
    let n_hits = hits.iter().filter(|&&h| h).count();
    if n_hits == 0 || n_hits == v {
        return None;
    }
    let w = |s: f64| if weight == 0.0 { 1.0 } else { libm::pow(s.abs(), weight) };
    let hit_total: f64 = scores.iter().zip(hits).filter(|(_, &h)| h).map(|(&s, _)| w(s)).sum();
    if !(hit_total > 0.0) {
        return None;
    }
    let miss = 1.0 / (v - n_hits) as f64;
    let (mut hit_acc, mut n_miss) = (0.0, 0usize);
    Some(
        scores
            .iter()
            .zip(hits)
            .map(|(&s, &h)| {
                if h {
                    hit_acc += w(s);
                } else {
                    n_miss += 1;
                }
                walk_value(hit_acc, hit_total, n_miss, miss)
            })
            .collect(),
    )
}

// Every point of the walk is evaluated from running totals so the full walk
// and the hit-position shortcut agree bit for bit.
fn walk_value(hit_acc: f64, hit_total: f64, n_miss: usize, miss: f64) -> f64 {
    hit_acc / hit_total - n_miss as f64 * miss
}

/// Signed extremum of a running sum; ties favour the positive side.
pub fn enrichment_score(running: &[f64]) -> f64 {
    let max = running.iter().copied().fold(0.0, f64::max);
    let min = running.iter().copied().fold(0.0, f64::min);
    if max >= -min {
        max
    } else {
        min
    }
}

/// Enrichment score from hit positions only, without materialising the walk.
fn es_from_positions(scores: &[f64], positions: &[usize], weight: f64) -> Option<f64> {
    let v = scores.len();
    let s = positions.len();
    if s == 0 || s == v {
        return None;
    }
    let w = |x: f64| if weight == 0.0 { 1.0 } else { libm::pow(x.abs(), weight) };
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    let total: f64 = sorted.iter().map(|&i| w(scores[i])).sum();
    if !(total > 0.0) {
        return None;
    }
    let miss = 1.0 / (v - s) as f64;
    let (mut hit_acc, mut max, mut min) = (0.0f64, 0.0f64, 0.0f64);
    for (n_before, &i) in sorted.iter().enumerate() {
        // lowest point is just before this hit, highest just after it
        let n_miss = i - n_before;
        min = min.min(walk_value(hit_acc, total, n_miss, miss));
        hit_acc += w(scores[i]);
        max = max.max(walk_value(hit_acc, total, n_miss, miss));
    }
    min = min.min(walk_value(hit_acc, total, v - s, miss));
    Some(if max >= -min { max } else { min })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GseaConfig {
    pub n_perm: usize,
    pub q_threshold: f64,
    /// Exponent on the ranking score; 0 gives the unweighted statistic.
    pub weight: f64,
    pub seed: u64,
}

impl Default for GseaConfig {
    fn default() -> Self {
        Self { n_perm: 1000, q_threshold: 0.01, weight: 1.0, seed: 0 }
    }
}

/// Genes of column `k` of `o`, descending, ties by index.
pub fn ranking(o: &Matrix, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..o.rows()).collect();
    idx.sort_by(|&a, &b| o[(b, k)].total_cmp(&o[(a, k)]).then(a.cmp(&b)));
    idx
}

/// Permutation p-value: `(1 + #{|null| ≥ |observed|}) / (1 + n_perm)`.
pub fn permutation_p(observed: f64, scores: &[f64], set_size: usize, weight: f64, n_perm: usize, seed: u64) -> f64 {
    let v = scores.len();
    let mut rng = seeded(seed);
    let mut pool: Vec<usize> = (0..v).collect();
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        for i in 0..set_size {
            let j = rng.gen_range(i..v);
            pool.swap(i, j);
        }
        let null = es_from_positions(scores, &pool[..set_size], weight).unwrap_or(0.0);
        if null.abs() >= observed.abs() {
            extreme += 1;
        }
    }
    (1 + extreme) as f64 / (1 + n_perm) as f64
}

struct GseaCell {
    topic: usize,
    pathway: usize,
}

/// Gene-set enrichment of every pathway along every topic's gene ranking.
/// Each (topic, pathway) pair draws its null from its own seeded stream, so
/// results do not depend on evaluation order.
pub fn gsea(o: &Matrix, gene_names: &[String], db: &PathwayDb, cfg: &GseaConfig) -> Result<EnrichmentResult> {
    if cfg.n_perm == 0 {
        bail!(InvalidArgument, "n_perm must be at least 1");
    }
    if gene_names.len() != o.rows() {
        bail!(Shape, "{} gene names for {} rows", gene_names.len(), o.rows());
    }
    let index: BTreeMap<&str, usize> = gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let v = o.rows();
    let mut members: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut skipped = Vec::new();
    for (pi, p) in db.iter().enumerate() {
        let genes: Vec<usize> = p.genes.iter().filter_map(|g| index.get(g.as_str()).copied()).collect();
        if genes.is_empty() {
            skipped.push((p.name.clone(), "no genes in ranking".into()));
        } else if genes.len() == v {
            skipped.push((p.name.clone(), "covers every ranked gene".into()));
        } else {
            members.push((pi, genes));
        }
    }
    if members.is_empty() {
        bail!(Data, "no pathway can be tested against the ranking");
    }

    let cells: Vec<GseaCell> =
        (0..o.cols()).flat_map(|topic| (0..members.len()).map(move |pathway| GseaCell { topic, pathway })).collect();
    let rankings: Vec<(Vec<f64>, Vec<usize>)> = (0..o.cols())
        .map(|k| {
            let order = ranking(o, k);
            let mut rank_of = vec![0; v];
            for (r, &g) in order.iter().enumerate() {
                rank_of[g] = r;
            }
            (order.iter().map(|&g| o[(g, k)]).collect(), rank_of)
        })
        .collect();

    let eval = |c: &GseaCell| -> EnrichmentRecord {
        let (scores, rank_of) = &rankings[c.topic];
        let (pi, genes) = &members[c.pathway];
        let positions: Vec<usize> = genes.iter().map(|&g| rank_of[g]).collect();
        let es = es_from_positions(scores, &positions, cfg.weight).unwrap_or(0.0);
        let seed = derive_seed(cfg.seed, &[c.topic as u64, *pi as u64]);
        EnrichmentRecord {
            topic: c.topic,
            pathway: db.get(*pi).name.clone(),
            p: permutation_p(es, scores, genes.len(), cfg.weight, cfg.n_perm, seed),
            q: 0.0,
            statistic: es,
            overlap: genes.len(),
            significant: false,
        }
    };

    #[cfg(feature = "parallel")]
    let records: Vec<EnrichmentRecord> = {
        use rayon::prelude::*;
        cells.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<EnrichmentRecord> = cells.iter().map(eval).collect();

    EnrichmentResult::finish(Method::Gsea, cfg.q_threshold, records, skipped)
}

/// Largest `|final value|` of the running sum over every (topic, pathway)
/// pair that is tested; zero for a correct walk.
pub fn max_running_sum_residual(o: &Matrix, gene_names: &[String], db: &PathwayDb, weight: f64) -> f64 {
    let index: BTreeMap<&str, usize> = gene_names.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut worst = 0.0f64;
    for k in 0..o.cols() {
        let order = ranking(o, k);
        let scores: Vec<f64> = order.iter().map(|&g| o[(g, k)]).collect();
        for p in db.iter() {
            let set: BTreeSet<usize> = p.genes.iter().filter_map(|g| index.get(g.as_str()).copied()).collect();
            let hits: Vec<bool> = order.iter().map(|g| set.contains(g)).collect();
            if let Some(run) = running_sum(&scores, &hits, weight) {
                worst = worst.max(run.last().copied().unwrap_or(0.0).abs());
            }
        }
    }
    worst
}
