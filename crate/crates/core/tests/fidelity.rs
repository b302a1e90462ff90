//! Agreement between the smooth surrogate and exact recall@k.

use rand::seq::SliceRandom;
use rand::Rng;

use rankloss_kit::numerics::Matrix;
use rankloss_kit::retrieval_eval::reference;
use rankloss_kit::rsloss::{rs_loss, smooth_recall_at_k, KSet, LossConfig};
use rankloss_kit::seeded_rng;

/// Tie-free row with gaps of at least `min_gap` and a single positive at a
/// rank other than `k`. With one positive the error has one sign and cannot
/// cancel across positives.
fn instance(rng: &mut rankloss_kit::Rng, k: usize, min_gap: f64) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(k + 2..=k + 20);
    let mut v = 0.9;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(v);
        v -= min_gap + rng.random_range(0.0..0.05);
    }
    let rank = loop {
        let r = rng.random_range(1..=n);
        if r != k {
            break r;
        }
    };
    let mut items: Vec<(f64, bool)> = values.into_iter().enumerate().map(|(i, v)| (v, i + 1 == rank)).collect();
    items.shuffle(rng);
    items.into_iter().unzip()
}

fn cfg(tau1: f64, tau2: f64, k: usize) -> LossConfig {
    LossConfig {
        ks: KSet::single(k).unwrap(),
        clipped: false,
        ..LossConfig::with_temperatures(tau1, tau2).unwrap()
    }
}

#[test]
fn decreasing_temperatures_converge_to_exact_recall() {
    let ladder = [(1.0, 0.01), (0.5, 0.005), (0.25, 0.0025), (0.1, 0.001)];
    let mut rng = seeded_rng(17);
    let mut mean_err = vec![0.0; ladder.len()];
    let trials = 500;
    for _ in 0..trials {
        let k = [1, 2, 4, 8, 16][rng.random_range(0..5)];
        let (row, mask) = instance(&mut rng, k, 0.02);
        let exact = reference::recall(&row, &mask, None, k).unwrap();
        let errs: Vec<f64> = ladder
            .iter()
            .map(|&(t1, t2)| (smooth_recall_at_k(&row, &mask, None, k, &cfg(t1, t2, k)).unwrap() - exact).abs())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "error grew along the ladder: {errs:?}");
        }
        for (m, e) in mean_err.iter_mut().zip(&errs) {
            *m += e / trials as f64;
        }
    }
    assert!(mean_err.windows(2).all(|w| w[1] < w[0]), "{mean_err:?}");
    assert!(mean_err[ladder.len() - 1] < 1e-3, "{mean_err:?}");
}

#[test]
fn batch_loss_tracks_exact_recall_when_separated() {
    // two tight, far-apart classes: every positive outranks every negative
    let mut rng = seeded_rng(8);
    let m = 8;
    let labels: Vec<usize> = (0..m).map(|i| i / 4).collect();
    let mut sims = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let s = if i == j {
                1.0
            } else if labels[i] == labels[j] {
                0.8 + rng.random_range(0.0..0.1)
            } else {
                -0.5 + rng.random_range(0.0..0.1)
            };
            sims.set(i, j, s);
        }
    }
    // three positives per query occupy ranks 1..3; k = 16 leaves a margin > 5
    let c = LossConfig {
        ks: KSet::single(16).unwrap(),
        ..LossConfig::default()
    };
    let r = rs_loss(&sims, &labels, &c).unwrap();
    assert!(r.loss < 1e-3, "{}", r.loss);
    for q in 0..m {
        let mask: Vec<bool> = labels.iter().map(|&l| l == labels[q]).collect();
        assert_eq!(reference::recall(sims.row(q), &mask, Some(q), 16), Some(1.0));
    }
}
