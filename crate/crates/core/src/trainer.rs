//! Training: class-balanced batch → optional SiMix → loss → parameter update.
//!
//! [`train_step_two_pass`] computes the update in the memory-bounded way:
//!
//! 1. embed the whole batch without keeping activations,
//! 2. evaluate the loss and its gradient w.r.t. the embeddings only,
//! 3. re-embed `chunk_size` rows at a time with activations kept and
//!    backpropagate the stored embedding gradients, summing parameter
//!    gradients chunk by chunk,
//! 4. take one optimiser step.
//!
//! Retained activations never exceed one chunk. [`train_step_single_pass`]
//! is the ordinary retained-activation path and produces the same update.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::dataio::Dataset;
use crate::encoder::{backward, forward, AdamState, Architecture, EncoderParams};
use crate::numerics::{similarity_matrix, Matrix};
use crate::retrieval_eval::{evaluate, MetricTable};
use crate::rsloss::{chain_to_embeddings, rs_loss, KSet, LossConfig};
use crate::sampler::{check_batch_shape, class_balanced_batch, filter_small_classes, DatasetIndex};
use crate::simix::{collapse_virtual_grads, enumerate_virtual, extend_similarities};
use crate::{seeded_rng, Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    RsK,
    /// Pairwise baseline: squared distance on matching pairs, hinge at
    /// similarity 0.5 on non-matching pairs.
    Contrastive,
}

/// Similarity above which a non-matching pair is penalised by the contrastive baseline.
pub const CONTRASTIVE_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub iterations: u64,
    pub simix: bool,
    pub loss: LossConfig,
    pub objective: Objective,
    pub encoder: Architecture,
    pub embed_dim: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Iterations after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_steps: Vec<u64>,
    pub chunk_size: usize,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            samples_per_class: 4,
            iterations: 200,
            simix: false,
            loss: LossConfig::default(),
            objective: Objective::RsK,
            encoder: Architecture::Linear,
            embed_dim: 32,
            lr: 1e-2,
            lr_decay_factor: 1.0,
            lr_decay_steps: Vec::new(),
            chunk_size: 64,
            eval_every: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The k set a config gets when none is given explicitly.
    pub fn default_ks(simix: bool) -> KSet {
        if simix {
            KSet::with_simix()
        } else {
            KSet::without_simix()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples_per_class < 2 {
            return bad(format!("samples_per_class must be >= 2, got {}", self.samples_per_class));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.samples_per_class) {
            return bad(format!(
                "batch_size {} must be a positive multiple of samples_per_class {}",
                self.batch_size, self.samples_per_class
            ));
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !self.lr_decay_factor.is_finite() || self.lr_decay_factor <= 0.0 {
            return bad(format!("lr_decay_factor must be > 0, got {}", self.lr_decay_factor));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate used at (1-based) iteration `it`.
    pub fn lr_at(&self, it: u64) -> f64 {
        let passed = self.lr_decay_steps.iter().filter(|&&s| it > s).count() as i32;
        self.lr * self.lr_decay_factor.powi(passed)
    }

    /// Cut-offs reported during validation: the loss's k set plus 1.
    pub fn eval_ks(&self) -> KSet {
        let mut ks: BTreeSet<usize> = self.loss.ks.as_slice().iter().copied().collect();
        ks.insert(1);
        KSet::new(ks.into_iter().collect()).expect("non-empty")
    }
}

/// Loss value and gradient w.r.t. each embedding row.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    /// Rows the loss saw, virtual examples included.
    pub expanded_size: usize,
}

fn contrastive(sims: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let m = sims.rows();
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                if labels[i] == labels[j] {
                    n_pos += 1;
                } else {
                    n_neg += 1;
                }
            }
        }
    }
    let mut grad = Matrix::zeros(m, m);
    let mut loss = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let s = sims.get(i, j);
            if labels[i] == labels[j] {
                // |e_i − e_j|² = 2 − 2 s for unit vectors
                loss += (2.0 - 2.0 * s) / n_pos as f64;
                grad.set(i, j, -2.0 / n_pos as f64);
            } else if s > CONTRASTIVE_MARGIN {
                loss += (s - CONTRASTIVE_MARGIN) / n_neg as f64;
                grad.set(i, j, 1.0 / n_neg as f64);
            }
        }
    }
    (loss, grad)
}

/// Loss of one batch of unit embeddings and its embedding gradient.
///
/// With SiMix the virtual batch is enumerated here, consuming `rng`; the
/// loss is averaged over real and virtual queries together.
pub fn batch_objective(
    embeddings: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<BatchObjective> {
    let sims = similarity_matrix(embeddings, embeddings)?;
    let (loss, grad_sims, expanded_size) = match (cfg.objective, cfg.simix) {
        (Objective::RsK, false) => {
            let r = rs_loss(&sims, labels, &cfg.loss)?;
            (r.loss, r.grad_sims, labels.len())
        }
        (Objective::RsK, true) => {
            let ext = enumerate_virtual(labels, rng);
            let ext_sims = extend_similarities(&sims, &ext)?;
            let r = rs_loss(&ext_sims, &ext.labels, &cfg.loss)?;
            (r.loss, collapse_virtual_grads(&r.grad_sims, &ext)?, ext.len())
        }
        (Objective::Contrastive, false) => {
            let (l, g) = contrastive(&sims, labels);
            (l, g, labels.len())
        }
        (Objective::Contrastive, true) => {
            let ext = enumerate_virtual(labels, rng);
            let ext_sims = extend_similarities(&sims, &ext)?;
            let (l, g) = contrastive(&ext_sims, &ext.labels);
            (l, collapse_virtual_grads(&g, &ext)?, ext.len())
        }
    };
    Ok(BatchObjective {
        loss,
        grad_embeddings: chain_to_embeddings(&grad_sims, embeddings)?,
        expanded_size,
    })
}

/// Parameter gradient of one batch plus bookkeeping.
#[derive(Debug, Clone)]
pub struct GradientPass {
    pub loss: f64,
    pub grads: EncoderParams,
    pub expanded_size: usize,
    /// Largest number of rows whose activations were alive at once.
    pub peak_retained_rows: usize,
}

/// Steps 1–3 of the two-pass update: no parameter change.
pub fn two_pass_gradients(
    params: &EncoderParams,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<GradientPass> {
    let (embeddings, none) = forward(params, x, false)?;
    debug_assert!(none.is_none());
    let obj = batch_objective(&embeddings, labels, cfg, rng)?;
    drop(embeddings);

    let chunk = cfg.chunk_size.max(1);
    let mut grads = params.zeros_like();
    let mut peak = 0;
    for start in (0..x.rows()).step_by(chunk) {
        let end = (start + chunk).min(x.rows());
        let xc = x.row_range(start, end);
        let (_, acts) = forward(params, &xc, true)?;
        peak = peak.max(end - start);
        let g = backward(params, &xc, acts.as_ref(), &obj.grad_embeddings.row_range(start, end))?;
        grads.add_assign(&g)?;
    }
    Ok(GradientPass {
        loss: obj.loss,
        grads,
        expanded_size: obj.expanded_size,
        peak_retained_rows: peak,
    })
}

/// Gradient with activations of the whole batch kept through the loss.
pub fn single_pass_gradients(
    params: &EncoderParams,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<GradientPass> {
    let (embeddings, acts) = forward(params, x, true)?;
    let obj = batch_objective(&embeddings, labels, cfg, rng)?;
    let grads = backward(params, x, acts.as_ref(), &obj.grad_embeddings)?;
    Ok(GradientPass {
        loss: obj.loss,
        grads,
        expanded_size: obj.expanded_size,
        peak_retained_rows: x.rows(),
    })
}

/// Memory-bounded update; returns the batch loss.
pub fn train_step_two_pass(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let pass = two_pass_gradients(params, x, labels, cfg, rng)?;
    adam.step(params, &pass.grads)?;
    Ok(pass.loss)
}

/// Reference update through ordinary backprop; returns the batch loss.
pub fn train_step_single_pass(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let pass = single_pass_gradients(params, x, labels, cfg, rng)?;
    adam.step(params, &pass.grads)?;
    Ok(pass.loss)
}

/// Embeds a dataset and evaluates self-retrieval on it.
pub fn evaluate_encoder(params: &EncoderParams, data: &Dataset, ks: &KSet) -> Result<MetricTable> {
    let (e, _) = forward(params, &data.features, false)?;
    evaluate(&e, &data.labels, ks)
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: f64,
    pub val: Option<MetricTable>,
    pub elapsed_ms: f64,
}

/// Accumulated wall-clock per stage, in milliseconds.
#[derive(Debug, Clone, Default)]
pub struct StageTimes {
    pub sample_ms: f64,
    pub step_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    /// Validation metrics of the untrained encoder.
    pub initial_val: Option<MetricTable>,
    pub expanded_batch: usize,
    pub times: StageTimes,
}

impl TrainReport {
    pub fn final_val(&self) -> Option<&MetricTable> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.val.as_ref())
            .or(self.initial_val.as_ref())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Equality of everything except wall-clock measurements.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.initial_val == other.initial_val
            && self.expanded_batch == other.expanded_batch
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.iteration == b.iteration && a.loss.to_bits() == b.loss.to_bits() && a.val == b.val)
    }
}

/// Everything `train_loop` needs checked before the first iteration.
pub fn check_setup(train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let index = filter_small_classes(&DatasetIndex::from_labels(&train.labels), cfg.samples_per_class)
        .map_err(|e| Error::Config(format!("training data: {e}")))?;
    check_batch_shape(&index, cfg.batch_size, cfg.samples_per_class)
        .map_err(|e| Error::Config(format!("training data: {e}")))?;
    if let Some(v) = val {
        if v.dim() != train.dim() {
            return Err(Error::Config(format!(
                "validation data has {} features, training data {}",
                v.dim(),
                train.dim()
            )));
        }
    }
    Ok(index)
}

/// Trains a freshly initialised encoder. Initialisation and training draw
/// from independent streams derived from `cfg.seed`.
pub fn train_loop(train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<(EncoderParams, TrainReport)> {
    check_setup(train, val, cfg)?;
    let params = EncoderParams::init(cfg.encoder, train.dim(), cfg.embed_dim, &mut seeded_rng(cfg.seed))?;
    train_from(params, train, val, cfg)
}

/// Runs the training loop from given parameters.
pub fn train_from(
    mut params: EncoderParams,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    let index = check_setup(train, val, cfg)?;
    if params.input_dim != train.dim() {
        return Err(Error::Config(format!(
            "encoder expects {} features, training data has {}",
            params.input_dim,
            train.dim()
        )));
    }
    let eval_ks = cfg.eval_ks();
    let mut rng = seeded_rng(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut times = StageTimes::default();
    let start = Instant::now();

    let t = Instant::now();
    let initial_val = val.map(|v| evaluate_encoder(&params, v, &eval_ks)).transpose()?;
    times.eval_ms += t.elapsed().as_secs_f64() * 1e3;

    let expanded_batch = if cfg.simix {
        crate::simix::extended_batch_size(cfg.batch_size, cfg.samples_per_class)
    } else {
        cfg.batch_size
    };
    let mut records = Vec::with_capacity(cfg.iterations as usize);
    for it in 1..=cfg.iterations {
        let t = Instant::now();
        let batch = class_balanced_batch(&index, cfg.batch_size, cfg.samples_per_class, &mut rng)?;
        let x = train.features.select_rows(&batch);
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        times.sample_ms += t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        adam.lr = cfg.lr_at(it);
        let loss = train_step_two_pass(&mut params, &mut adam, &x, &labels, cfg, &mut rng)?;
        times.step_ms += t.elapsed().as_secs_f64() * 1e3;
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged(it));
        }

        let val_metrics = match val {
            Some(v) if it % cfg.eval_every == 0 || it == cfg.iterations => {
                let t = Instant::now();
                let m = evaluate_encoder(&params, v, &eval_ks)?;
                times.eval_ms += t.elapsed().as_secs_f64() * 1e3;
                Some(m)
            }
            _ => None,
        };
        records.push(IterationRecord {
            iteration: it,
            loss,
            val: val_metrics,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((
        params,
        TrainReport {
            records,
            initial_val,
            expanded_batch,
            times,
        },
    ))
}
