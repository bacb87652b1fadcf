//! Reward-similarity pair matching and exact k-nearest-neighbour search.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::alignment::similarity_coefficient;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub x: usize,
    pub y: usize,
    pub r_x: f64,
    pub r_y: f64,
}

/// Cross-domain pairs sorted by `(x, y)`, no duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPairSet {
    pub pairs: Vec<MatchedPair>,
    pub delta: f64,
}

impl MatchedPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn weight(&self, p: &MatchedPair) -> f64 {
        similarity_coefficient(p.r_x, p.r_y, self.delta)
    }
}

/// Distinct reward values of one side in ascending order, each with the
/// lowest row index carrying it.
struct RewardIndex {
    values: Vec<f64>,
    first_row: Vec<usize>,
}

impl RewardIndex {
    fn new(rewards: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..rewards.len()).collect();
        order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]).then(a.cmp(&b)));
        let mut values = Vec::new();
        let mut first_row = Vec::new();
        for i in order {
            if values.last() != Some(&rewards[i]) {
                values.push(rewards[i]);
                first_row.push(i);
            }
        }
        Self { values, first_row }
    }

    /// Lowest row index among the rows maximizing `W(r, ·)`.
    ///
    /// `W` is non-increasing in the computed `|r − r'|`, which is itself
    /// monotone on each side of `r`, so the maximizers form a contiguous run
    /// of distinct values around the insertion point of `r`.
    fn best_row(&self, r: f64, delta: f64) -> usize {
        let w = |k: usize| similarity_coefficient(r, self.values[k], delta);
        let p = self.values.partition_point(|&v| v < r);
        let n = self.values.len();
        let best = match (p.checked_sub(1), (p < n).then_some(p)) {
            (Some(l), Some(h)) => w(l).max(w(h)),
            (Some(l), None) => w(l),
            (None, Some(h)) => w(h),
            (None, None) => unreachable!("reward index is never empty"),
        };
        let mut row = usize::MAX;
        let mut k = p;
        while k > 0 && w(k - 1) == best {
            k -= 1;
            row = row.min(self.first_row[k]);
        }
        let mut k = p;
        while k < n && w(k) == best {
            row = row.min(self.first_row[k]);
            k += 1;
        }
        row
    }
}

/// Matches every `x` to its most reward-similar `y` and every `y` to its
/// most reward-similar `x` (ties to the lowest index), returning the union.
pub fn match_pairs(dx: &LabeledSet, dy: &LabeledSet, delta: f64) -> Result<MatchedPairSet> {
    if dx.is_empty() || dy.is_empty() {
        return Err(Error::invalid(format!("cannot match pairs between sets of sizes {} and {}", dx.len(), dy.len())));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    let ix = RewardIndex::new(&dx.rewards);
    let iy = RewardIndex::new(&dy.rewards);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(dx.len() + dy.len());
    pairs.extend((0..dx.len()).map(|i| (i, iy.best_row(dx.rewards[i], delta))));
    pairs.extend((0..dy.len()).map(|j| (ix.best_row(dy.rewards[j], delta), j)));
    pairs.sort_unstable();
    pairs.dedup();
    Ok(MatchedPairSet {
        pairs: pairs.into_iter().map(|(x, y)| MatchedPair { x, y, r_x: dx.rewards[x], r_y: dy.rewards[y] }).collect(),
        delta,
    })
}

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Keeps the `k` smallest `(distance, index)` keys seen so far.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    fn offer(&mut self, d: f64, i: usize) {
        let key = (d, i);
        let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if self.items.len() == self.k {
            if !less(&key, self.items.last().expect("k > 0")) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|it| less(it, &key));
        self.items.insert(pos, key);
    }

    fn indices(self) -> Vec<usize> {
        self.items.into_iter().map(|(_, i)| i).collect()
    }
}

fn check_k(k: usize, available: usize) -> Result<()> {
    if k == 0 || k > available {
        return Err(Error::invalid(format!("k = {k} needs 1 ≤ k ≤ {available} candidate points")));
    }
    Ok(())
}

/// Indices of the `k` points of `data` closest to `point` in Euclidean
/// distance, nearest first, ties to the lowest index. Rows equal to the
/// query are the query itself and never count as its neighbours; `k` must
/// be below the number of rows.
pub fn knn(point: &[f64], data: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    check_k(k, data.nrows().saturating_sub(1))?;
    if point.len() != data.ncols() {
        return Err(Error::shape(format!("query has {} coordinates, data has {}", point.len(), data.ncols())));
    }
    let mut top = TopK::new(k);
    let mut offered = 0;
    for (i, row) in data.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d > 0.0 {
            top.offer(d, i);
            offered += 1;
        }
    }
    if offered < k {
        return Err(Error::invalid(format!("only {offered} points differ from the query, k = {k}")));
    }
    Ok(top.indices())
}

/// For every row, its `k` nearest other rows.
pub fn knn_graph(data: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    check_k(k, data.nrows().saturating_sub(1))?;
    Ok(data
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let p = p.to_vec();
            let mut top = TopK::new(k);
            for (j, row) in data.rows().into_iter().enumerate() {
                if j != i {
                    top.offer(sq_dist(&p, row), j);
                }
            }
            top.indices()
        })
        .collect())
}
