use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pathway {
    pub name: String,
    pub genes: BTreeSet<String>,
}

/// Named gene sets, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PathwayDb {
    pathways: Vec<Pathway>,
}

impl PathwayDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pathway; duplicate genes collapse, duplicate names and empty
    /// sets are rejected.
    pub fn insert<I, S>(&mut self, name: impl Into<String>, genes: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        if self.pathways.iter().any(|p| p.name == name) {
            bail!(Data, "duplicate pathway name {:?}", name);
        }
        let genes: BTreeSet<String> = genes.into_iter().map(Into::into).collect();
        if genes.is_empty() {
            bail!(Data, "pathway {:?} has no genes", name);
        }
        self.pathways.push(Pathway { name, genes });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pathways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pathway> {
        self.pathways.iter()
    }

    pub fn get(&self, i: usize) -> &Pathway {
        &self.pathways[i]
    }

    /// Every gene mentioned by any pathway.
    pub fn all_genes(&self) -> BTreeSet<&str> {
        self.pathways.iter().flat_map(|p| p.genes.iter().map(String::as_str)).collect()
    }

    /// Number of pathways containing each gene.
    pub fn gene_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pathways {
            for g in &p.genes {
                *counts.entry(g.as_str()).or_insert(0) += 1;
            }
        }
        counts
    }
}
