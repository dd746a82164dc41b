//! Recall@K and RSUM.
//!
//! A query's rank is the number of items strictly closer than its ground
//! truth plus the number of equally distant items with a lower index. Ties
//! therefore resolve toward the lowest index on every machine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gaussian::{csd_slices, GaussianEmbedding};
use crate::matrix::Matrix;
use crate::par;
use crate::store::EmbeddingStore;
use crate::trainer::Scoring;
use crate::{Error, Result};

/// Cut-offs reported per direction; RSUM sums all of them over both directions.
pub const STANDARD_KS: [usize; 4] = [1, 5, 10, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    I2t,
    T2i,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::I2t => "i2t",
            Direction::T2i => "t2i",
        })
    }
}

/// Recall@K percentages for one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
}

impl RetrievalReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// Sum of this direction's values (its share of RSUM).
    pub fn rsum_contribution(&self) -> f64 {
        self.recall_at.values().sum()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Pair distance under `scoring`; smaller means a better match.
#[inline]
pub fn pair_distance(a: &GaussianEmbedding, b: &GaussianEmbedding, scoring: Scoring) -> f64 {
    match scoring {
        Scoring::Csd => csd_slices(a.mu(), a.variance(), b.mu(), b.variance()),
        Scoring::NegCosine => -cosine(a.mu(), b.mu()),
    }
}

/// `queries.len() x items.len()` distance matrix, rows computed in parallel.
pub fn distance_matrix(queries: &[GaussianEmbedding], items: &[GaussianEmbedding], scoring: Scoring) -> Result<Matrix> {
    let dim = queries.first().or(items.first()).map(|z| z.dim()).unwrap_or(0);
    if let Some(z) = queries.iter().chain(items).find(|z| z.dim() != dim) {
        return Err(Error::dims(dim, z.dim()));
    }
    let mut out = Matrix::zeros(queries.len(), items.len());
    par::fill_rows(out.as_mut_slice(), items.len(), |i, row| {
        for (j, item) in items.iter().enumerate() {
            row[j] = pair_distance(&queries[i], item, scoring);
        }
    });
    Ok(out)
}

/// Zero-based rank of `target` in `row` under ascending distance.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let d = row[target];
    row.iter().enumerate().filter(|&(j, &x)| x < d || (x == d && j < target)).count()
}

/// Index of the smallest entry, lowest index on ties.
pub fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x < row[best] {
            best = j;
        }
    }
    best
}

fn check_gt(dist: &Matrix, gt: &[usize]) -> Result<()> {
    if gt.len() != dist.rows() {
        return Err(Error::dims(dist.rows(), gt.len()));
    }
    if let Some(&g) = gt.iter().find(|&&g| g >= dist.cols()) {
        return Err(Error::invalid(format!("ground-truth index {g} out of range for {} items", dist.cols())));
    }
    Ok(())
}

/// Zero-based ground-truth rank of every query.
pub fn ranks(dist: &Matrix, gt: &[usize]) -> Result<Vec<usize>> {
    check_gt(dist, gt)?;
    Ok(par::map_range(dist.rows(), |i| rank_of(dist.row(i), gt[i])))
}

/// Per-query hit indicator at cut-off `k`.
pub fn correct_at_k(dist: &Matrix, gt: &[usize], k: usize) -> Result<Vec<bool>> {
    check_k(dist, k)?;
    Ok(ranks(dist, gt)?.into_iter().map(|r| r < k).collect())
}

fn check_k(dist: &Matrix, k: usize) -> Result<()> {
    if k == 0 || k > dist.cols() {
        return Err(Error::invalid(format!("K must lie in 1..={}, got {k}", dist.cols())));
    }
    Ok(())
}

fn percentage(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percentage of queries whose ground truth is among the `k` nearest items.
pub fn recall_at_k(dist: &Matrix, gt: &[usize], k: usize) -> Result<f64> {
    let hits = correct_at_k(dist, gt, k)?.into_iter().filter(|&c| c).count();
    Ok(percentage(hits, dist.rows()))
}

pub fn retrieval_report(dist: &Matrix, gt: &[usize], direction: Direction, ks: &[usize]) -> Result<RetrievalReport> {
    let r = ranks(dist, gt)?;
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        check_k(dist, k)?;
        recall_at.insert(k, percentage(r.iter().filter(|&&x| x < k).count(), r.len()));
    }
    Ok(RetrievalReport { direction, recall_at })
}

/// Sum of R@{1,5,10,100} over both directions.
pub fn rsum(i2t: &RetrievalReport, t2i: &RetrievalReport) -> Result<f64> {
    let mut total = 0.0;
    for report in [i2t, t2i] {
        for k in STANDARD_KS {
            total += report.get(k).ok_or_else(|| Error::invalid(format!("{} report lacks R@{k}", report.direction)))?;
        }
    }
    Ok(total)
}

/// Ground truth for every entry of `queries`: the index of the same id in `items`.
pub fn ground_truth_by_id(queries: &EmbeddingStore, items: &EmbeddingStore) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> =
        items.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    queries
        .ids()
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("id {id:?} has no match"))))
        .collect()
}

/// Both retrieval directions between paired image and text stores.
pub fn evaluate_stores(
    images: &EmbeddingStore,
    texts: &EmbeddingStore,
    scoring: Scoring,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let img = images.embeddings();
    let txt = texts.embeddings();
    let i2t = distance_matrix(&img, &txt, scoring)?;
    let t2i = i2t.transpose();
    let i2t_report = retrieval_report(&i2t, &ground_truth_by_id(images, texts)?, Direction::I2t, ks)?;
    let t2i_report = retrieval_report(&t2i, &ground_truth_by_id(texts, images)?, Direction::T2i, ks)?;
    Ok((i2t_report, t2i_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_minimum_gives_full_r1() {
        let d = Matrix::from_vec(2, 2, vec![0.1, 0.5, 0.9, 0.2]).unwrap();
        assert_eq!(recall_at_k(&d, &[0, 1], 1).unwrap(), 100.0);
    }

    #[test]
    fn hand_enumerated_ranks() {
        // true items at ranks 1, 3, 2 (one-based)
        let d = Matrix::from_vec(3, 3, vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.8, 0.4, 0.6, 0.5]).unwrap();
        let gt = [0, 2, 2];
        assert_eq!(ranks(&d, &gt).unwrap(), vec![0, 2, 1]);
        assert!((recall_at_k(&d, &gt, 1).unwrap() - 33.333333).abs() < 1e-5);
        assert!((recall_at_k(&d, &gt, 2).unwrap() - 66.666667).abs() < 1e-5);
        assert_eq!(recall_at_k(&d, &gt, 3).unwrap(), 100.0);
        assert!(recall_at_k(&d, &gt, 4).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let d = Matrix::from_vec(2, 3, vec![1.0, 1.0, 1.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(ranks(&d, &[0, 1]).unwrap(), vec![0, 2]);
        assert_eq!(ranks(&d, &[2, 0]).unwrap(), vec![2, 1]);
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn rsum_examples() {
        let mk = |direction, vals: [f64; 4]| RetrievalReport {
            direction,
            recall_at: STANDARD_KS.iter().copied().zip(vals).collect(),
        };
        let i2t = mk(Direction::I2t, [21.02, 46.88, 58.91, 92.41]);
        let t2i = mk(Direction::T2i, [19.96, 47.44, 59.42, 92.58]);
        assert!((rsum(&i2t, &t2i).unwrap() - 438.62).abs() < 1e-9);
        assert_eq!(rsum(&mk(Direction::I2t, [0.0; 4]), &mk(Direction::T2i, [0.0; 4])).unwrap(), 0.0);
        assert_eq!(rsum(&mk(Direction::I2t, [100.0; 4]), &mk(Direction::T2i, [100.0; 4])).unwrap(), 800.0);
        let mut partial = i2t.clone();
        partial.recall_at.remove(&100);
        assert!(rsum(&partial, &t2i).is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_rank_invariant(
            vals in prop::collection::vec(-10.0f64..10.0, 36),
            gt in prop::collection::vec(0usize..6, 6),
        ) {
            let d = Matrix::from_vec(6, 6, vals).unwrap();
            let mut prev = 0.0;
            for k in 1..=6 {
                let r = recall_at_k(&d, &gt, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 100.0);
            // strictly increasing transform keeps every rank
            let t = d.map(|x| (0.3 * x).exp() * 2.0 + 1.0);
            prop_assert_eq!(ranks(&d, &gt).unwrap(), ranks(&t, &gt).unwrap());
        }
    }
}
