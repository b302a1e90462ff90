//! Recall@k surrogate (RS@k) loss.
//!
//! For a query `q` with positives `P` in database `Ω = B \ {q}` the smooth
//! recall at `k` is
//!
//! ```text
//! R~(q) = Σ_{x∈P} σ_τ1( k − 1 − Σ_{z∈Ω, z≠x} σ_τ2(s_qz − s_qx) ) / |P|
//! ```
//!
//! and the loss of a batch is the mean over queries of
//! `1/|K| · Σ_{k∈K} (1 − R~_k(q))`. With `clipped` set the numerator is
//! capped at `k` and the denominator is `min(k, |P|)`, which lets a query with
//! more than `k` positives reach zero loss.
//!
//! Gradients are exact: both sigmoids are chained through every `(x, z)`
//! pair, including the dependence of the inner sum on `s_qx` itself. The cap
//! has subgradient zero once the numerator exceeds `k`.

use rayon::prelude::*;

use crate::numerics::{dot, sigmoid, Matrix, Temperature};
use crate::{Error, Result};

/// Strictly increasing, non-empty set of cut-offs `k ≥ 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KSet(Vec<usize>);

impl KSet {
    /// Sorts the values; rejects empty sets, zeros and duplicates.
    pub fn new(mut ks: Vec<usize>) -> Result<Self> {
        ks.sort_unstable();
        if ks.is_empty() {
            return Err(Error::BadParam("k set must not be empty".into()));
        }
        if ks[0] == 0 {
            return Err(Error::BadParam("k must be >= 1".into()));
        }
        if ks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::BadParam(format!("duplicate k in {ks:?}")));
        }
        Ok(Self(ks))
    }

    /// `{1, 2, 4, 8, 16}`, the set used without similarity mixup.
    pub fn without_simix() -> Self {
        Self(vec![1, 2, 4, 8, 16])
    }

    /// `{1, 2, 4, 8, 12, ..., 32}`, used when virtual examples enlarge the batch.
    pub fn with_simix() -> Self {
        Self(vec![1, 2, 4, 8, 12, 16, 20, 24, 28, 32])
    }

    pub fn single(k: usize) -> Result<Self> {
        Self::new(vec![k])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Temperature of the outer sigmoid acting on `k − rank`.
    pub tau1: Temperature,
    /// Temperature of the inner sigmoid acting on similarity differences.
    pub tau2: Temperature,
    pub ks: KSet,
    pub clipped: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: Temperature::new(1.0).unwrap(),
            tau2: Temperature::new(0.01).unwrap(),
            ks: KSet::without_simix(),
            clipped: true,
        }
    }
}

impl LossConfig {
    pub fn with_temperatures(tau1: f64, tau2: f64) -> Result<Self> {
        Ok(Self {
            tau1: Temperature::new(tau1)?,
            tau2: Temperature::new(tau2)?,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    /// `∂loss/∂s_ij` for every entry of the similarity matrix.
    pub grad_sims: Matrix,
    pub per_query_loss: Vec<f64>,
}

struct QueryTerms {
    loss: f64,
    /// `∂L^K(q)/∂s_qj`, not yet divided by the batch size.
    grad: Vec<f64>,
}

/// Per-positive inner sums: `Σ_z σ2(s_z − s_x)` and `Σ_z σ2'(s_z − s_x)`.
fn inner_sums(
    row: &[f64],
    positives: &[usize],
    self_index: Option<usize>,
    tau2: Temperature,
) -> Vec<(f64, f64)> {
    positives
        .iter()
        .map(|&x| {
            let sx = row[x];
            let mut value = 0.0;
            let mut deriv = 0.0;
            for (z, &sz) in row.iter().enumerate() {
                if z == x || Some(z) == self_index {
                    continue;
                }
                let (v, d) = sigmoid(sz - sx, tau2);
                value += v;
                deriv += d;
            }
            (value, deriv)
        })
        .collect()
}

fn positives_of(pos_mask: &[bool], self_index: Option<usize>) -> Vec<usize> {
    pos_mask
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p && Some(j) != self_index)
        .map(|(j, _)| j)
        .collect()
}

/// Smooth recall and `∂R/∂u_x` for one `k`, given the inner sums.
fn recall_and_slopes(sums: &[(f64, f64)], k: usize, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let n_pos = sums.len();
    let mut numerator = 0.0;
    let mut slopes = Vec::with_capacity(n_pos);
    for &(inner, _) in sums {
        let (r, dr) = sigmoid(k as f64 - 1.0 - inner, cfg.tau1);
        numerator += r;
        slopes.push(dr);
    }
    let kf = k as f64;
    let (value, scale) = if cfg.clipped {
        let denom = k.min(n_pos) as f64;
        if numerator > kf {
            (kf / denom, 0.0)
        } else {
            (numerator / denom, 1.0 / denom)
        }
    } else {
        let denom = n_pos as f64;
        (numerator / denom, 1.0 / denom)
    };
    slopes.iter_mut().for_each(|s| *s *= scale);
    (value, slopes)
}

/// Smooth recall@k of one query row.
///
/// `self_index`, when given, is excluded from the database. Positives are the
/// `true` entries of `pos_mask` other than `self_index`.
pub fn smooth_recall_at_k(
    sim_row: &[f64],
    pos_mask: &[bool],
    self_index: Option<usize>,
    k: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    if pos_mask.len() != sim_row.len() {
        return Err(Error::DimensionMismatch {
            expected: sim_row.len(),
            got: pos_mask.len(),
        });
    }
    if k == 0 {
        return Err(Error::BadParam("k must be >= 1".into()));
    }
    let positives = positives_of(pos_mask, self_index);
    if positives.is_empty() {
        return Err(Error::NoPositives(self_index.unwrap_or(0)));
    }
    let sums = inner_sums(sim_row, &positives, self_index, cfg.tau2);
    Ok(recall_and_slopes(&sums, k, cfg).0)
}

fn query_terms(row: &[f64], labels: &[usize], q: usize, cfg: &LossConfig) -> Result<QueryTerms> {
    let positives: Vec<usize> = (0..row.len())
        .filter(|&j| j != q && labels[j] == labels[q])
        .collect();
    if positives.is_empty() {
        return Err(Error::NoPositives(q));
    }
    let sums = inner_sums(row, &positives, Some(q), cfg.tau2);
    let weight = 1.0 / cfg.ks.len() as f64;

    let mut loss = 0.0;
    // ∂L/∂u_x accumulated over k
    let mut du = vec![0.0; positives.len()];
    for &k in cfg.ks.as_slice() {
        let (recall, slopes) = recall_and_slopes(&sums, k, cfg);
        loss += weight * (1.0 - recall);
        for (acc, s) in du.iter_mut().zip(&slopes) {
            *acc -= weight * s;
        }
    }

    // u_x = k − 1 − Σ_z σ2(s_z − s_x): ∂u_x/∂s_z = −σ2'(s_z − s_x), ∂u_x/∂s_x = Σ_z σ2'(s_z − s_x)
    let mut grad = vec![0.0; row.len()];
    for ((&x, &(_, deriv_sum)), &c) in positives.iter().zip(&sums).zip(&du) {
        if c == 0.0 {
            continue;
        }
        let sx = row[x];
        for (z, &sz) in row.iter().enumerate() {
            if z == x || z == q {
                continue;
            }
            grad[z] -= c * sigmoid(sz - sx, cfg.tau2).1;
        }
        grad[x] += c * deriv_sum;
    }
    Ok(QueryTerms { loss, grad })
}

/// Batch RS@k loss with every example used as a query against the rest.
///
/// `labels[i]` is the class of row `i`; every class must occur at least twice.
/// The loss is averaged over all rows of `sims`, which for an extended batch
/// includes the virtual examples.
pub fn rs_loss(sims: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<LossResult> {
    let m = sims.rows();
    if sims.cols() != m {
        return Err(Error::NotSquare {
            rows: m,
            cols: sims.cols(),
        });
    }
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: labels.len(),
        });
    }
    let terms: Vec<QueryTerms> = (0..m)
        .into_par_iter()
        .map(|q| query_terms(sims.row(q), labels, q, cfg))
        .collect::<Result<_>>()?;

    let inv_m = 1.0 / m.max(1) as f64;
    let mut grad_sims = Matrix::zeros(m, m);
    let mut per_query_loss = Vec::with_capacity(m);
    for (q, t) in terms.into_iter().enumerate() {
        per_query_loss.push(t.loss);
        for (slot, g) in grad_sims.row_mut(q).iter_mut().zip(&t.grad) {
            *slot = g * inv_m;
        }
        grad_sims.set(q, q, 0.0);
    }
    let loss = per_query_loss.iter().sum::<f64>() * inv_m;
    Ok(LossResult {
        loss,
        grad_sims,
        per_query_loss,
    })
}

/// Chains `∂loss/∂s` through `s_ij = e_i · e_j`.
///
/// Row `i` of the result is `Σ_{j≠i} (g_ij + g_ji) e_j`.
pub fn chain_to_embeddings(grad_sims: &Matrix, embeddings: &Matrix) -> Result<Matrix> {
    let m = embeddings.rows();
    if grad_sims.rows() != m || grad_sims.cols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: grad_sims.rows(),
        });
    }
    let d = embeddings.cols();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; d];
            for j in 0..m {
                if j == i {
                    continue;
                }
                let c = grad_sims.get(i, j) + grad_sims.get(j, i);
                if c != 0.0 {
                    for (a, e) in acc.iter_mut().zip(embeddings.row(j)) {
                        *a += c * e;
                    }
                }
            }
            acc
        })
        .collect();
    Matrix::from_vec(m, d, rows.concat())
}

/// Convenience: loss and embedding gradient for a batch of unit embeddings.
pub fn rs_loss_on_embeddings(
    embeddings: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    let sims = crate::numerics::similarity_matrix(embeddings, embeddings)?;
    let res = rs_loss(&sims, labels, cfg)?;
    Ok((res.loss, chain_to_embeddings(&res.grad_sims, embeddings)?))
}

/// Frobenius inner product, handy for adjoint checks.
pub fn frobenius(a: &Matrix, b: &Matrix) -> f64 {
    dot(a.as_slice(), b.as_slice())
}
