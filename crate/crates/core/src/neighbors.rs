//! Mutual k-nearest-neighbour sets for the two views of each cell.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::{sq_euclidean, Matrix};

/// Neighbour lists for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNeighbors {
    pub k: usize,
    lists: Vec<Vec<usize>>,
    /// `true` where the mutual set was empty and the plain kNN list is used.
    fallback: Vec<bool>,
}

impl ViewNeighbors {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn is_fallback(&self, i: usize) -> bool {
        self.fallback[i]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }

    /// Uniform draw from the stored list of cell `i`.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let list = &self.lists[i];
        list[rng.gen_range(0..list.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Expression view.
    Internal,
    /// External embedding view.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub internal: ViewNeighbors,
    pub external: ViewNeighbors,
}

impl NeighborIndex {
    pub fn build(internal: &Matrix, external: &Matrix, k: usize) -> Result<Self> {
        if internal.rows() != external.rows() {
            bail!(Shape, "views have {} and {} cells", internal.rows(), external.rows());
        }
        Ok(Self { internal: build_mutual_knn(internal, k)?, external: build_mutual_knn(external, k)? })
    }

    pub fn view(&self, view: View) -> &ViewNeighbors {
        match view {
            View::Internal => &self.internal,
            View::External => &self.external,
        }
    }

    pub fn sample_neighbor<R: Rng + ?Sized>(&self, view: View, i: usize, rng: &mut R) -> usize {
        self.view(view).sample(i, rng)
    }
}

/// Plain k nearest neighbours of every row by Euclidean distance, ties to the
/// lower index. Brute force.
pub fn knn(points: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.rows();
    if n < 2 {
        bail!(InvalidArgument, "need at least 2 points for neighbours, got {}", n);
    }
    if k == 0 || k >= n {
        bail!(InvalidArgument, "k must be in 1..{}, got {}", n, k);
    }
    let row = |i: usize| -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_euclidean(points.row(i), points.row(j)), j))
            .collect();
        d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d.into_iter().map(|(_, j)| j).collect()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..n).into_par_iter().map(row).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..n).map(row).collect())
    }
}

/// Mutual kNN: `j` is kept for `i` only if each is among the other's k
/// nearest. Cells left with no mutual neighbour fall back to their plain kNN
/// list and are flagged.
pub fn build_mutual_knn(points: &Matrix, k: usize) -> Result<ViewNeighbors> {
    let plain = knn(points, k)?;
    let n = plain.len();
    let mut lists = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    for (i, list) in plain.iter().enumerate() {
        let mutual: Vec<usize> = list.iter().copied().filter(|&j| plain[j].contains(&i)).collect();
        if mutual.is_empty() {
            lists.push(list.clone());
            fallback.push(true);
        } else {
            lists.push(mutual);
            fallback.push(false);
        }
    }
    Ok(ViewNeighbors { k, lists, fallback })
}
