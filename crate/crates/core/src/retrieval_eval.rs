//! Exact retrieval metrics.
//!
//! Ranks use the Heaviside convention `H(0) = 1`: a database item tied with
//! `x` counts as ranked above it. The same rule applies to recall@k, r@k and
//! mAP. The [`reference`] module holds direct transcriptions of the
//! definitions, quadratic per query, used to cross-check the sort-based code.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::numerics::{similarity_matrix, Matrix};
use crate::rsloss::KSet;
use crate::{Error, Result};

/// Database indices of one query ordered by descending similarity.
///
/// Tied items keep ascending index order; ranks are derived with the `H(0)=1`
/// rule regardless of that order.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub order: Vec<usize>,
    /// `rank[j]` for every database index `j` (0 for the excluded query).
    ranks: Vec<usize>,
}

impl RankedList {
    pub fn new(sim_row: &[f64], self_index: Option<usize>) -> Self {
        let mut order: Vec<usize> = (0..sim_row.len())
            .filter(|&j| Some(j) != self_index)
            .collect();
        order.sort_by(|&a, &b| {
            sim_row[b]
                .partial_cmp(&sim_row[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut ranks = vec![0; sim_row.len()];
        let mut start = 0;
        while start < order.len() {
            let mut end = start + 1;
            while end < order.len() && sim_row[order[end]] == sim_row[order[start]] {
                end += 1;
            }
            // every member of a tie group is preceded by the whole group
            for &j in &order[start..end] {
                ranks[j] = end;
            }
            start = end;
        }
        Self { order, ranks }
    }

    #[inline]
    pub fn rank_of(&self, j: usize) -> usize {
        self.ranks[j]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn check_row(sim_row: &[f64], pos_mask: &[bool]) -> Result<()> {
    if sim_row.len() != pos_mask.len() {
        return Err(Error::DimensionMismatch {
            expected: sim_row.len(),
            got: pos_mask.len(),
        });
    }
    Ok(())
}

/// Ranks of the query's positives, in database order.
///
/// Positive similarities are sorted once; every database item then adds one
/// to the rank of each positive it is at least as similar as, found by a
/// binary search. O(N log P) instead of a full sort of the row.
fn positive_ranks(
    sim_row: &[f64],
    pos_mask: &[bool],
    self_index: Option<usize>,
) -> Result<Vec<usize>> {
    check_row(sim_row, pos_mask)?;
    let pos_idx: Vec<usize> = (0..sim_row.len())
        .filter(|&j| pos_mask[j] && Some(j) != self_index)
        .collect();
    if pos_idx.is_empty() {
        return Err(Error::NoPositives(self_index.unwrap_or(0)));
    }
    let mut sorted: Vec<f64> = pos_idx.iter().map(|&j| sim_row[j]).collect();
    sorted.sort_by(f64::total_cmp);
    // covered[i]: items z with s_z >= sorted[i]; x itself supplies the leading 1
    let mut covered = vec![0usize; sorted.len() + 1];
    for (z, &s) in sim_row.iter().enumerate() {
        if Some(z) != self_index {
            covered[sorted.partition_point(|&p| p <= s)] += 1;
        }
    }
    let mut rank_sorted = vec![0; sorted.len()];
    let mut acc = 0;
    for i in (0..sorted.len()).rev() {
        acc += covered[i + 1];
        rank_sorted[i] = acc;
    }
    Ok(pos_idx
        .iter()
        .map(|&j| {
            // tied positives share a rank, so any of them will do
            let i = sorted.partition_point(|&p| p < sim_row[j]);
            rank_sorted[i]
        })
        .collect())
}

/// Mean over positives of `#{positives ranked at or above x} / rank(x)`,
/// summed in database order.
fn ap_from_ranks(ranks: &[usize]) -> f64 {
    let mut by_rank = ranks.to_vec();
    by_rank.sort_unstable();
    let mut sum = 0.0;
    for &r in ranks {
        let retrieved = by_rank.partition_point(|&q| q <= r);
        sum += retrieved as f64 / r as f64;
    }
    sum / ranks.len() as f64
}

/// `1 + #{z ≠ x, z ≠ self : s_z ≥ s_x}`.
pub fn exact_rank(sim_row: &[f64], x: usize, self_index: Option<usize>) -> Result<usize> {
    if x >= sim_row.len() {
        return Err(Error::IndexOutOfRange {
            index: x,
            len: sim_row.len(),
        });
    }
    if Some(x) == self_index {
        return Err(Error::BadParam("cannot rank the query against itself".into()));
    }
    let sx = sim_row[x];
    let above = sim_row
        .iter()
        .enumerate()
        .filter(|&(z, &s)| z != x && Some(z) != self_index && s >= sx)
        .count();
    Ok(1 + above)
}

/// Fraction of the query's positives ranked within the top `k`.
pub fn recall_at_k(
    sim_row: &[f64],
    pos_mask: &[bool],
    self_index: Option<usize>,
    k: usize,
) -> Result<f64> {
    let ranks = positive_ranks(sim_row, pos_mask, self_index)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Benchmark-style r@k: 1 if at least one positive is within the top `k`.
pub fn benchmark_r_at_k(
    sim_row: &[f64],
    pos_mask: &[bool],
    self_index: Option<usize>,
    k: usize,
) -> Result<u8> {
    let ranks = positive_ranks(sim_row, pos_mask, self_index)?;
    Ok(u8::from(ranks.iter().any(|&r| r <= k)))
}

/// Average precision of one query: mean over positives of precision at their rank.
pub fn average_precision(
    sim_row: &[f64],
    pos_mask: &[bool],
    self_index: Option<usize>,
) -> Result<f64> {
    Ok(ap_from_ranks(&positive_ranks(sim_row, pos_mask, self_index)?))
}

fn positive_mask(labels: &[usize], q: usize) -> Vec<bool> {
    labels.iter().map(|&l| l == labels[q]).collect()
}

/// Mean average precision over all rows of `sims`.
///
/// With `self_retrieval` the query itself (column `q` of row `q`) is removed
/// from its database.
pub fn mean_average_precision(sims: &Matrix, labels: &[usize], self_retrieval: bool) -> Result<f64> {
    if labels.len() != sims.cols() {
        return Err(Error::DimensionMismatch {
            expected: sims.cols(),
            got: labels.len(),
        });
    }
    let aps: Vec<f64> = (0..sims.rows())
        .into_par_iter()
        .map(|q| {
            let self_index = self_retrieval.then_some(q);
            average_precision(sims.row(q), &positive_mask(labels, q), self_index)
                .map_err(|_| Error::NoPositives(q))
        })
        .collect::<Result<_>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len().max(1) as f64)
}

/// Averaged self-retrieval metrics for one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub ks: Vec<usize>,
    /// Benchmark r@k per entry of `ks`.
    pub r_at_k: Vec<f64>,
    /// Recall@k (fraction of positives) per entry of `ks`.
    pub recall_at_k: Vec<f64>,
    pub map: f64,
    pub queries: usize,
}

impl MetricTable {
    pub fn r_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.r_at_k[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall_at_k[i])
    }
}

const DEFAULT_TILE: usize = 256;

/// Self-retrieval evaluation of unit embeddings: every row is a query against
/// all other rows.
pub fn evaluate(embeddings: &Matrix, labels: &[usize], ks: &KSet) -> Result<MetricTable> {
    evaluate_tiled(embeddings, labels, ks, DEFAULT_TILE)
}

/// As [`evaluate`], computing similarities `tile` query rows at a time.
pub fn evaluate_tiled(
    embeddings: &Matrix,
    labels: &[usize],
    ks: &KSet,
    tile: usize,
) -> Result<MetricTable> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let tile = tile.max(1);
    let ks_vec = ks.as_slice().to_vec();
    let nk = ks_vec.len();
    // per query: r@k hits, recall@k, AP
    let mut per_query: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(n);
    for start in (0..n).step_by(tile) {
        let end = (start + tile).min(n);
        let block = similarity_matrix(&embeddings.row_range(start, end), embeddings)?;
        let rows: Vec<_> = (start..end)
            .into_par_iter()
            .map(|q| {
                let row = block.row(q - start);
                let mask = positive_mask(labels, q);
                let ranks = positive_ranks(row, &mask, Some(q)).map_err(|_| Error::NoPositives(q))?;
                let best = *ranks.iter().min().unwrap();
                let hits = ks_vec.iter().map(|&k| f64::from(u8::from(best <= k))).collect();
                let recalls = ks_vec
                    .iter()
                    .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
                    .collect();
                Ok((hits, recalls, ap_from_ranks(&ranks)))
            })
            .collect::<Result<_>>()?;
        per_query.extend(rows);
    }
    let denom = n.max(1) as f64;
    let mut r_at_k = vec![0.0; nk];
    let mut recall = vec![0.0; nk];
    let mut map = 0.0;
    for (hits, recalls, ap) in &per_query {
        for i in 0..nk {
            r_at_k[i] += hits[i];
            recall[i] += recalls[i];
        }
        map += ap;
    }
    r_at_k.iter_mut().for_each(|v| *v /= denom);
    recall.iter_mut().for_each(|v| *v /= denom);
    Ok(MetricTable {
        ks: ks_vec,
        r_at_k,
        recall_at_k: recall,
        map: map / denom,
        queries: n,
    })
}

/// Definitional implementations, quadratic in the row length.
///
/// Deliberately share no code with the sort-based routines above.
pub mod reference {
    /// `1 + Σ_{z≠x, z≠self} H(s_z − s_x)` with `H(0) = 1`.
    pub fn rank(sim_row: &[f64], x: usize, self_index: Option<usize>) -> usize {
        let mut r = 1;
        for z in 0..sim_row.len() {
            if z == x || Some(z) == self_index {
                continue;
            }
            if sim_row[z] - sim_row[x] >= 0.0 {
                r += 1;
            }
        }
        r
    }

    fn positives(pos_mask: &[bool], self_index: Option<usize>) -> Vec<usize> {
        (0..pos_mask.len())
            .filter(|&j| pos_mask[j] && Some(j) != self_index)
            .collect()
    }

    /// `Σ_{x∈P} H(k − rank(x)) / |P|`; `None` without positives.
    pub fn recall(sim_row: &[f64], pos_mask: &[bool], self_index: Option<usize>, k: usize) -> Option<f64> {
        let p = positives(pos_mask, self_index);
        if p.is_empty() {
            return None;
        }
        let hits = p
            .iter()
            .filter(|&&x| k as i64 - rank(sim_row, x, self_index) as i64 >= 0)
            .count();
        Some(hits as f64 / p.len() as f64)
    }

    /// Enumerates the top-`k` ranks and looks for a positive there.
    pub fn r_at_k(sim_row: &[f64], pos_mask: &[bool], self_index: Option<usize>, k: usize) -> Option<u8> {
        let p = positives(pos_mask, self_index);
        if p.is_empty() {
            return None;
        }
        Some(u8::from(p.iter().any(|&x| rank(sim_row, x, self_index) <= k)))
    }

    /// `(1/|P|) Σ_{x∈P} #{y∈P : rank(y) ≤ rank(x)} / rank(x)`.
    pub fn average_precision(sim_row: &[f64], pos_mask: &[bool], self_index: Option<usize>) -> Option<f64> {
        let p = positives(pos_mask, self_index);
        if p.is_empty() {
            return None;
        }
        let ranks: Vec<usize> = p.iter().map(|&x| rank(sim_row, x, self_index)).collect();
        let mut sum = 0.0;
        for &rx in &ranks {
            let retrieved = ranks.iter().filter(|&&ry| ry <= rx).count();
            sum += retrieved as f64 / rx as f64;
        }
        Some(sum / p.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize_rows;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(exact_rank(&[0.9, 0.5, 0.7], 0, None).unwrap(), 1);
        assert_eq!(exact_rank(&[0.7, 0.7, 0.5], 0, None).unwrap(), 2);
        assert_eq!(exact_rank(&[0.7, 0.7, 0.5], 1, None).unwrap(), 2);
        assert_eq!(exact_rank(&[1.0, 0.7, 0.5], 1, Some(0)).unwrap(), 1);
        assert!(matches!(
            exact_rank(&[0.1], 3, None),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn recall_examples() {
        // positives at ranks 1 and 3
        let row = [0.9, 0.8, 0.7, 0.1];
        let mask = [true, false, true, false];
        assert_eq!(recall_at_k(&row, &mask, None, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&row, &mask, None, 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&row, &mask, None, 100).unwrap(), 1.0);
        assert!(matches!(
            recall_at_k(&row, &[false; 4], None, 1),
            Err(Error::NoPositives(_))
        ));
    }

    #[test]
    fn benchmark_examples() {
        // best positive at rank 3
        let row = [0.9, 0.8, 0.7, 0.1];
        let mask = [false, false, true, true];
        assert_eq!(benchmark_r_at_k(&row, &mask, None, 4).unwrap(), 1);
        assert_eq!(benchmark_r_at_k(&row, &mask, None, 2).unwrap(), 0);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[0.9, 0.2], &[true, false], None).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.9], &[true, false], None).unwrap(), 0.5);
        let sims = Matrix::from_rows(&[vec![1.0, 0.5, 0.9], vec![0.5, 1.0, 0.4], vec![0.9, 0.4, 1.0]])
            .unwrap();
        // queries 0 and 2 retrieve each other first; 1 has no positive
        assert!(matches!(
            mean_average_precision(&sims, &[0, 1, 0], true),
            Err(Error::NoPositives(1))
        ));
        let map = mean_average_precision(&sims, &[0, 0, 0], true).unwrap();
        assert!((map - 1.0).abs() < 1e-15);
    }

    fn clustered(classes: usize, per: usize) -> (Matrix, Vec<usize>) {
        let d = classes;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                let mut v = vec![0.0; d];
                v[c] = 1.0;
                // small distinct offsets keep same-class points from tying
                v[(c + 1) % d] = 0.01 * (i + 1) as f64;
                rows.push(v);
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn perfect_clusters_score_one() {
        let (e, labels) = clustered(5, 3);
        let t = evaluate(&e, &labels, &KSet::new(vec![1, 2, 4]).unwrap()).unwrap();
        assert_eq!(t.r_at(1), Some(1.0));
        assert_eq!(t.map, 1.0);
        assert_eq!(t.recall_at(2), Some(1.0));
        assert_eq!(t.recall_at(1), Some(0.5));
    }

    fn random_embeddings(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_rows(&Matrix::from_vec(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn tiling_does_not_change_metrics() {
        let e = random_embeddings(50, 6, 3);
        let labels: Vec<usize> = (0..50).map(|i| i % 7).collect();
        let ks = KSet::new(vec![1, 2, 4, 8]).unwrap();
        let whole = evaluate_tiled(&e, &labels, &ks, 50).unwrap();
        for tile in [1, 7, 16] {
            assert_eq!(evaluate_tiled(&e, &labels, &ks, tile).unwrap(), whole);
        }
    }

    #[test]
    fn random_labels_sit_at_chance() {
        let n = 600;
        let e = random_embeddings(n, 8, 21);
        let mut rng = seeded_rng(22);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let t = evaluate(&e, &labels, &KSet::single(1).unwrap()).unwrap();
        let mut counts = [0usize; 20];
        labels.iter().for_each(|&l| counts[l] += 1);
        let chance: f64 = labels
            .iter()
            .map(|&l| (counts[l] - 1) as f64 / (n - 1) as f64)
            .sum::<f64>()
            / n as f64;
        let se = (chance * (1.0 - chance) / n as f64).sqrt();
        let r1 = t.r_at(1).unwrap();
        assert!((r1 - chance).abs() < 3.0 * se, "r@1 {r1} chance {chance} se {se}");
    }

    fn random_row(rng: &mut crate::Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
        // few distinct levels so ties are common
        let row = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 4.0).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        mask[rng.random_range(0..n)] = true;
        (row, mask)
    }

    #[test]
    fn sort_based_metrics_match_definitions() {
        let mut rng = seeded_rng(99);
        for _ in 0..2000 {
            let n = rng.random_range(2..14);
            let (row, mut mask) = random_row(&mut rng, n, 5);
            let self_index = rng.random_bool(0.5).then(|| rng.random_range(0..n));
            if let Some(s) = self_index {
                mask[s] = false;
                if !mask.iter().any(|&m| m) {
                    mask[(s + 1) % n] = true;
                }
            }
            for x in 0..n {
                if Some(x) != self_index {
                    assert_eq!(exact_rank(&row, x, self_index).unwrap(), reference::rank(&row, x, self_index));
                    assert_eq!(RankedList::new(&row, self_index).rank_of(x), reference::rank(&row, x, self_index));
                }
            }
            for k in 1..=n + 1 {
                assert_eq!(
                    recall_at_k(&row, &mask, self_index, k).unwrap(),
                    reference::recall(&row, &mask, self_index, k).unwrap()
                );
                assert_eq!(
                    benchmark_r_at_k(&row, &mask, self_index, k).unwrap(),
                    reference::r_at_k(&row, &mask, self_index, k).unwrap()
                );
            }
            let ap = average_precision(&row, &mask, self_index).unwrap();
            let ap_ref = reference::average_precision(&row, &mask, self_index).unwrap();
            assert_eq!(ap.to_bits(), ap_ref.to_bits());
        }
    }

    proptest! {
        #[test]
        fn recall_monotone_and_dominated(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(2..20);
            let (row, mask) = random_row(&mut rng, n, 8);
            let mut prev = 0.0;
            for k in 1..=n {
                let r = recall_at_k(&row, &mask, None, k).unwrap();
                let b = benchmark_r_at_k(&row, &mask, None, k).unwrap();
                prop_assert!(r >= prev);
                prop_assert!(f64::from(b) >= r);
                prop_assert_eq!(b == 1, r > 0.0);
                prev = r;
            }
        }

        #[test]
        fn metrics_invariant_under_monotone_maps(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(2..20);
            let (row, mask) = random_row(&mut rng, n, 8);
            let mapped: Vec<f64> = row.iter().map(|&s| (3.0 * s).exp() - 7.0).collect();
            for k in 1..=n {
                prop_assert_eq!(
                    recall_at_k(&row, &mask, None, k).unwrap(),
                    recall_at_k(&mapped, &mask, None, k).unwrap()
                );
            }
            prop_assert_eq!(
                average_precision(&row, &mask, None).unwrap(),
                average_precision(&mapped, &mask, None).unwrap()
            );
        }
    }
}
