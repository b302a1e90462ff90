//! End-to-end gradient check: encoder → similarities → (SiMix) → loss.
//!
//! Analytic parameter gradients are compared with central finite
//! differences of the scalar loss, one parameter at a time. Relative errors
//! use `max(|analytic|, |numeric|, 1e-3 · max|analytic|)` as denominator so
//! parameters with negligible gradient do not dominate.

use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{forward, Architecture, EncoderParams};
use crate::numerics::Matrix;
use crate::rsloss::LossConfig;
use crate::trainer::{batch_objective, single_pass_gradients, Objective, TrainConfig};
use crate::{seeded_rng, Error, Result};

/// Maximum relative error accepted as a pass.
pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub batch: usize,
    pub samples_per_class: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub eps: f64,
    pub seed: u64,
    pub simix: bool,
    pub encoder: Architecture,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            batch: 32,
            samples_per_class: 4,
            tau1: 1.0,
            tau2: 0.1,
            eps: 1e-5,
            seed: 0,
            simix: false,
            encoder: Architecture::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.dim == 0 || cfg.samples_per_class < 2 || cfg.batch == 0 || !cfg.batch.is_multiple_of(cfg.samples_per_class) {
        return Err(Error::BadParam(format!(
            "need dim >= 1 and batch a positive multiple of {} (got dim {}, batch {})",
            cfg.samples_per_class, cfg.dim, cfg.batch
        )));
    }
    if !cfg.eps.is_finite() || cfg.eps <= 0.0 {
        return Err(Error::BadParam(format!("eps must be > 0, got {}", cfg.eps)));
    }
    let mut rng = seeded_rng(cfg.seed);
    let data: Vec<f64> = (0..cfg.batch * cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Matrix::from_vec(cfg.batch, cfg.dim, data)?;
    let labels: Vec<usize> = (0..cfg.batch).map(|i| i / cfg.samples_per_class).collect();
    let mut params = EncoderParams::init(cfg.encoder, cfg.dim, cfg.dim, &mut rng)?;
    let train = TrainConfig {
        batch_size: cfg.batch,
        samples_per_class: cfg.samples_per_class,
        simix: cfg.simix,
        loss: LossConfig {
            ks: TrainConfig::default_ks(cfg.simix),
            ..LossConfig::with_temperatures(cfg.tau1, cfg.tau2)?
        },
        objective: Objective::RsK,
        encoder: cfg.encoder,
        embed_dim: cfg.dim,
        ..TrainConfig::default()
    };
    // every evaluation replays the same virtual batch
    let mix_rng = rng.clone();

    let analytic = single_pass_gradients(&params, &x, &labels, &train, &mut mix_rng.clone())?;
    let a = analytic.grads.flat();
    let scale = a.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-12);

    let loss_at = |p: &EncoderParams| -> Result<f64> {
        let (e, _) = forward(p, &x, false)?;
        Ok(batch_objective(&e, &labels, &train, &mut mix_rng.clone())?.loss)
    };

    let mut worst = 0.0f64;
    let mut flat_index = 0;
    let n_blocks = params.blocks().len();
    for b in 0..n_blocks {
        let len = params.blocks()[b].len();
        for i in 0..len {
            let orig = params.blocks()[b][i];
            params.blocks_mut()[b][i] = orig + cfg.eps;
            let up = loss_at(&params)?;
            params.blocks_mut()[b][i] = orig - cfg.eps;
            let down = loss_at(&params)?;
            params.blocks_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let g = a[flat_index];
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            flat_index += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        params_checked: flat_index,
        loss: analytic.loss,
    })
}
