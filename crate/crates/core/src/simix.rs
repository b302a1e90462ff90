//! Similarity mixup (SiMix).
//!
//! Every unordered pair of same-class examples `(x, z)` in a batch yields a
//! virtual example `v = α·x + (1−α)·z` with `α ~ U(0,1)`. The mixed vectors
//! are never built and never renormalised, so all similarities involving
//! them are linear combinations of similarities between real examples:
//!
//! ```text
//! s(w, xz_α)              = α s_wx + (1−α) s_wz
//! s(xz_α1, yw_α2)         = α1 α2 s_xy + (1−α1)(1−α2) s_zw + α1 (1−α2) s_xw + (1−α1) α2 s_zy
//! ```
//!
//! [`extend_similarities`] applies that linear map and
//! [`collapse_virtual_grads`] its transpose.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::numerics::Matrix;
use crate::{Error, Result, Rng};

/// One virtual example, mixing base rows `i < j` of the same class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualSpec {
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
    pub class_id: usize,
}

impl VirtualSpec {
    /// Base rows and mixing weights `[(i, α), (j, 1−α)]`.
    #[inline]
    fn parents(&self) -> [(usize, f64); 2] {
        [(self.i, self.alpha), (self.j, 1.0 - self.alpha)]
    }
}

/// Real batch plus its virtual examples; rows `base_size..` of an extended
/// similarity matrix are the virtuals in list order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedBatch {
    pub base_size: usize,
    pub virtuals: Vec<VirtualSpec>,
    pub labels: Vec<usize>,
}

impl ExtendedBatch {
    pub fn len(&self) -> usize {
        self.base_size + self.virtuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weighted base rows making up extended row `e`.
    fn components(&self, e: usize) -> Components {
        if e < self.base_size {
            Components {
                terms: [(e, 1.0), (e, 0.0)],
                len: 1,
            }
        } else {
            Components {
                terms: self.virtuals[e - self.base_size].parents(),
                len: 2,
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Components {
    terms: [(usize, f64); 2],
    len: usize,
}

impl Components {
    fn as_slice(&self) -> &[(usize, f64)] {
        &self.terms[..self.len]
    }
}

/// Number of virtual examples a batch with these labels produces:
/// `Σ_c C(m_c, 2)`.
pub fn virtual_count(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.values().map(|&m| m * m.saturating_sub(1) / 2).sum()
}

/// Size of the extended batch for `batch_size` examples, `per_class` per class.
pub fn extended_batch_size(batch_size: usize, per_class: usize) -> usize {
    if per_class == 0 {
        return batch_size;
    }
    batch_size + (batch_size / per_class) * per_class * per_class.saturating_sub(1) / 2
}

/// One virtual example per unordered same-class pair, in (class, i, j) order,
/// each with a fresh `α` drawn from the open interval (0, 1).
pub fn enumerate_virtual(labels: &[usize], rng: &mut Rng) -> ExtendedBatch {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut virtuals = Vec::with_capacity(virtual_count(labels));
    for (&class_id, members) in &by_class {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let alpha = loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                };
                virtuals.push(VirtualSpec { i, j, alpha, class_id });
            }
        }
    }
    let mut ext_labels = labels.to_vec();
    ext_labels.extend(virtuals.iter().map(|v| v.class_id));
    ExtendedBatch {
        base_size: labels.len(),
        virtuals,
        labels: ext_labels,
    }
}

fn check(base: &Matrix, ext: &ExtendedBatch) -> Result<()> {
    if base.rows() != ext.base_size || base.cols() != ext.base_size {
        return Err(Error::DimensionMismatch {
            expected: ext.base_size,
            got: base.rows(),
        });
    }
    for v in &ext.virtuals {
        let bad = v.i.max(v.j);
        if bad >= ext.base_size {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: ext.base_size,
            });
        }
    }
    Ok(())
}

/// `(M+V)×(M+V)` similarity matrix of the extended batch.
pub fn extend_similarities(base: &Matrix, ext: &ExtendedBatch) -> Result<Matrix> {
    check(base, ext)?;
    let n = ext.len();
    let m = ext.base_size;
    let mut out = Matrix::zeros(n, n);
    for a in 0..m {
        out.row_mut(a)[..m].copy_from_slice(base.row(a));
    }
    for a in 0..n {
        let ca = ext.components(a);
        let start = if a < m { m } else { 0 };
        for b in start..n {
            let cb = ext.components(b);
            let mut s = 0.0;
            for &(p, wp) in ca.as_slice() {
                for &(r, wr) in cb.as_slice() {
                    s += wp * wr * base.get(p, r);
                }
            }
            out.set(a, b, s);
        }
    }
    Ok(out)
}

/// Transpose of [`extend_similarities`]: folds gradients w.r.t. extended
/// similarities back onto the base similarities they were mixed from.
pub fn collapse_virtual_grads(grad_ext: &Matrix, ext: &ExtendedBatch) -> Result<Matrix> {
    let n = ext.len();
    let m = ext.base_size;
    if grad_ext.rows() != n || grad_ext.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: grad_ext.rows(),
        });
    }
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        out.row_mut(a).copy_from_slice(&grad_ext.row(a)[..m]);
    }
    for a in 0..n {
        let ca = ext.components(a);
        let start = if a < m { m } else { 0 };
        for b in start..n {
            let g = grad_ext.get(a, b);
            if g == 0.0 {
                continue;
            }
            let cb = ext.components(b);
            for &(p, wp) in ca.as_slice() {
                for &(r, wr) in cb.as_slice() {
                    out.add_at(p, r, wp * wr * g);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, normalize_rows, similarity_matrix, Temperature};
    use crate::rsloss::{frobenius, rs_loss, KSet, LossConfig};
    use crate::{seeded_rng, Rng};
    use proptest::prelude::*;

    fn random_unit(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_rows(&Matrix::from_vec(n, d, data).unwrap()).unwrap()
    }

    fn mixed_vector(e: &Matrix, ext: &ExtendedBatch, a: usize) -> Vec<f64> {
        if a < ext.base_size {
            return e.row(a).to_vec();
        }
        let v = ext.virtuals[a - ext.base_size];
        e.row(v.i)
            .iter()
            .zip(e.row(v.j))
            .map(|(x, z)| v.alpha * x + (1.0 - v.alpha) * z)
            .collect()
    }

    #[test]
    fn enumeration_examples() {
        let mut rng = seeded_rng(1);
        let ext = enumerate_virtual(&[5, 5, 9], &mut rng);
        assert_eq!(ext.virtuals.len(), 1);
        let v = ext.virtuals[0];
        assert_eq!((v.i, v.j, v.class_id), (0, 1, 5));
        assert!(v.alpha > 0.0 && v.alpha < 1.0);
        assert_eq!(ext.labels, vec![5, 5, 9, 5]);

        let ext = enumerate_virtual(&[0, 1, 2, 3], &mut rng);
        assert!(ext.virtuals.is_empty());
        assert_eq!(ext.len(), 4);
    }

    #[test]
    fn enumeration_order_and_count() {
        let labels = [2, 0, 2, 0, 2, 1];
        let ext = enumerate_virtual(&labels, &mut seeded_rng(3));
        let pairs: Vec<(usize, usize)> = ext.virtuals.iter().map(|v| (v.i, v.j)).collect();
        // class 0, then class 1 (single member), then class 2
        assert_eq!(pairs, vec![(1, 3), (0, 2), (0, 4), (2, 4)]);
        assert_eq!(virtual_count(&labels), 4);
        for (t, v) in ext.virtuals.iter().enumerate() {
            assert_eq!(ext.labels[6 + t], v.class_id);
            assert_eq!(labels[v.i], v.class_id);
            assert_eq!(labels[v.j], v.class_id);
        }
    }

    #[test]
    fn large_batch_arithmetic() {
        let labels: Vec<usize> = (0..4096).map(|i| i / 4).collect();
        let ext = enumerate_virtual(&labels, &mut seeded_rng(0));
        assert_eq!(ext.len(), 10240);
        assert_eq!(extended_batch_size(4096, 4), 10240);
    }

    #[test]
    fn same_seed_same_alphas() {
        let labels: Vec<usize> = (0..32).map(|i| i / 4).collect();
        let a = enumerate_virtual(&labels, &mut seeded_rng(42));
        let b = enumerate_virtual(&labels, &mut seeded_rng(42));
        assert_eq!(a, b);
        let mut rng = seeded_rng(42);
        let first = enumerate_virtual(&labels, &mut rng);
        let second = enumerate_virtual(&labels, &mut rng);
        assert_ne!(first.virtuals[0].alpha, second.virtuals[0].alpha);
    }

    #[test]
    fn hand_checked_entries() {
        // w=(1,0), x=(0,1), z=(1,0)
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let base = similarity_matrix(&e, &e).unwrap();
        let ext = ExtendedBatch {
            base_size: 3,
            virtuals: vec![VirtualSpec { i: 1, j: 2, alpha: 0.5, class_id: 0 }],
            labels: vec![1, 0, 0, 0],
        };
        let s = extend_similarities(&base, &ext).unwrap();
        assert_eq!(s.get(0, 3), 0.5);
        assert_eq!(s.get(3, 0), 0.5);

        let ext1 = ExtendedBatch {
            virtuals: vec![VirtualSpec { i: 1, j: 2, alpha: 1.0, class_id: 0 }],
            ..ext
        };
        let s = extend_similarities(&base, &ext1).unwrap();
        for w in 0..3 {
            assert_eq!(s.get(w, 3), base.get(w, 1));
        }
    }

    #[test]
    fn out_of_range_parent_is_rejected() {
        let base = Matrix::zeros(2, 2);
        let ext = ExtendedBatch {
            base_size: 2,
            virtuals: vec![VirtualSpec { i: 0, j: 5, alpha: 0.5, class_id: 0 }],
            labels: vec![0, 0, 0],
        };
        assert!(matches!(
            extend_similarities(&base, &ext),
            Err(Error::IndexOutOfRange { index: 5, len: 2 })
        ));
        assert!(collapse_virtual_grads(&Matrix::zeros(2, 2), &ext).is_err());
    }

    #[test]
    fn collapse_examples() {
        let ext = ExtendedBatch {
            base_size: 3,
            virtuals: vec![VirtualSpec { i: 1, j: 2, alpha: 0.25, class_id: 0 }],
            labels: vec![1, 0, 0, 0],
        };
        let mut g = Matrix::zeros(4, 4);
        g.set(0, 3, 2.0);
        let c = collapse_virtual_grads(&g, &ext).unwrap();
        assert_eq!(c.get(0, 1), 0.25 * 2.0);
        assert_eq!(c.get(0, 2), 0.75 * 2.0);
        assert_eq!(c.as_slice().iter().filter(|&&v| v != 0.0).count(), 2);

        let none = ExtendedBatch { base_size: 3, virtuals: vec![], labels: vec![0, 0, 1] };
        let g = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(collapse_virtual_grads(&g, &none).unwrap(), g);
    }

    #[test]
    fn loss_gradient_through_mixup_matches_finite_differences() {
        let mut rng = seeded_rng(8);
        let e = random_unit(&mut rng, 9, 5);
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let base = similarity_matrix(&e, &e).unwrap();
        let ext = enumerate_virtual(&labels, &mut rng);
        let cfg = LossConfig {
            tau1: Temperature::new(1.0).unwrap(),
            tau2: Temperature::new(0.1).unwrap(),
            ks: KSet::new(vec![1, 2, 4, 8]).unwrap(),
            clipped: true,
        };
        let loss_of = |s: &Matrix| {
            rs_loss(&extend_similarities(s, &ext).unwrap(), &ext.labels, &cfg)
                .unwrap()
                .loss
        };
        let res = rs_loss(&extend_similarities(&base, &ext).unwrap(), &ext.labels, &cfg).unwrap();
        let g = collapse_virtual_grads(&res.grad_sims, &ext).unwrap();
        let h = 1e-5;
        let scale = g.max_abs();
        for i in 0..9 {
            for j in 0..9 {
                let mut p = base.clone();
                p.add_at(i, j, h);
                let mut n = base.clone();
                n.add_at(i, j, -h);
                let fd = (loss_of(&p) - loss_of(&n)) / (2.0 * h);
                let an = g.get(i, j);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3 * scale);
                assert!(rel < 1e-4, "({i},{j}) analytic {an} fd {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn mixed_similarities_equal_explicit_dots(seed in 0u64..2000) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(2..9);
            let e = random_unit(&mut rng, n, 4);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let ext = enumerate_virtual(&labels, &mut rng);
            let s = extend_similarities(&similarity_matrix(&e, &e).unwrap(), &ext).unwrap();
            for a in 0..ext.len() {
                for b in 0..ext.len() {
                    let want = dot(&mixed_vector(&e, &ext, a), &mixed_vector(&e, &ext, b));
                    prop_assert!((s.get(a, b) - want).abs() < 1e-12);
                    prop_assert!((s.get(a, b) - s.get(b, a)).abs() < 1e-12);
                    prop_assert!(s.get(a, b).abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn extension_is_linear_and_collapse_is_its_adjoint(seed in 0u64..2000, ca in -2.0f64..2.0, cb in -2.0f64..2.0) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(2..8);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let ext = enumerate_virtual(&labels, &mut rng);
            let rand_mat = |rng: &mut Rng, r: usize| {
                Matrix::from_vec(r, r, (0..r * r).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let s1 = rand_mat(&mut rng, n);
            let s2 = rand_mat(&mut rng, n);
            let mut comb = s1.clone();
            for (c, (a, b)) in comb.as_mut_slice().iter_mut().zip(s1.as_slice().iter().zip(s2.as_slice())) {
                *c = ca * a + cb * b;
            }
            let lhs = extend_similarities(&comb, &ext).unwrap();
            let e1 = extend_similarities(&s1, &ext).unwrap();
            let e2 = extend_similarities(&s2, &ext).unwrap();
            for i in 0..lhs.as_slice().len() {
                let rhs = ca * e1.as_slice()[i] + cb * e2.as_slice()[i];
                prop_assert!((lhs.as_slice()[i] - rhs).abs() < 1e-12);
            }
            let g = rand_mat(&mut rng, ext.len());
            let left = frobenius(&g, &e1);
            let right = frobenius(&collapse_virtual_grads(&g, &ext).unwrap(), &s1);
            prop_assert!((left - right).abs() < 1e-9);
        }
    }
}
