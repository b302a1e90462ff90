//! Embedding head: a linear map or a one-hidden-layer tanh MLP followed by
//! L2 normalisation, with hand-written backprop and an Adam optimiser.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::numerics::{dot, norm, Matrix};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// `linear` or `mlp:<hidden width>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "linear" {
            return Ok(Architecture::Linear);
        }
        if let Some(h) = s.strip_prefix("mlp:") {
            let hidden: usize = h
                .parse()
                .map_err(|_| Error::BadParam(format!("bad hidden width in {s:?}")))?;
            if hidden == 0 {
                return Err(Error::BadParam("hidden width must be >= 1".into()));
            }
            return Ok(Architecture::Mlp { hidden });
        }
        Err(Error::BadParam(format!(
            "unknown encoder {s:?} (expected linear or mlp:<hidden>)"
        )))
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    fn xavier(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::from_vec(output, input, data).expect("shape"),
            bias: vec![0.0; output],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let out = self.weight.rows();
        let rows: Vec<f64> = (0..x.rows())
            .into_par_iter()
            .flat_map_iter(|i| {
                let xi = x.row(i);
                (0..out).map(move |o| dot(self.weight.row(o), xi) + self.bias[o])
            })
            .collect();
        Matrix::from_vec(x.rows(), out, rows).expect("shape")
    }

    /// Accumulates `∂/∂W = δᵀ x`, `∂/∂b = Σ δ` into `grad`, rows in order.
    fn accumulate(grad: &mut Dense, delta: &Matrix, input: &Matrix) {
        for i in 0..delta.rows() {
            let di = delta.row(i);
            let xi = input.row(i);
            for (o, &g) in di.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                for (w, &x) in grad.weight.row_mut(o).iter_mut().zip(xi) {
                    *w += g * x;
                }
            }
        }
    }

    /// `δ W`: gradient w.r.t. the layer input.
    fn back(&self, delta: &Matrix) -> Matrix {
        let input = self.weight.cols();
        let mut out = Matrix::zeros(delta.rows(), input);
        for i in 0..delta.rows() {
            let row = out.row_mut(i);
            for (o, &g) in delta.row(i).iter().enumerate() {
                for (r, &w) in row.iter_mut().zip(self.weight.row(o)) {
                    *r += g * w;
                }
            }
        }
        out
    }
}

/// Encoder weights; also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Dense>,
}

impl EncoderParams {
    pub fn init(arch: Architecture, input_dim: usize, output_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_dims(input_dim, output_dim)?;
        let layers = match arch {
            Architecture::Linear => vec![Dense::xavier(input_dim, output_dim, rng)],
            Architecture::Mlp { hidden } => vec![
                Dense::xavier(input_dim, hidden, rng),
                Dense::xavier(hidden, output_dim, rng),
            ],
        };
        Ok(Self {
            arch,
            input_dim,
            output_dim,
            layers,
        })
    }

    pub fn zeros(arch: Architecture, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::check_dims(input_dim, output_dim)?;
        let layers = match arch {
            Architecture::Linear => vec![Dense::zeros(input_dim, output_dim)],
            Architecture::Mlp { hidden } => vec![
                Dense::zeros(input_dim, hidden),
                Dense::zeros(hidden, output_dim),
            ],
        };
        Ok(Self {
            arch,
            input_dim,
            output_dim,
            layers,
        })
    }

    fn check_dims(input_dim: usize, output_dim: usize) -> Result<()> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::BadParam("encoder dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch, self.input_dim, self.output_dim).expect("valid dims")
    }

    /// Parameter tensors in a fixed order: per layer, weights then bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// All parameters flattened in [`blocks`](Self::blocks) order.
    pub fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.arch == other.arch && self.input_dim == other.input_dim && self.output_dim == other.output_dim
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("parameter sets differ in shape".into()));
        }
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

/// Intermediate values kept by a retaining forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// tanh outputs of the hidden layer (MLP only).
    hidden: Option<Matrix>,
    /// Output before normalisation.
    pre_norm: Matrix,
}

/// Embeds the rows of `x`. With `retain = false` nothing but the embeddings
/// is kept.
pub fn forward(params: &EncoderParams, x: &Matrix, retain: bool) -> Result<(Matrix, Option<Activations>)> {
    if x.cols() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            got: x.cols(),
        });
    }
    let (hidden, pre_norm) = match params.arch {
        Architecture::Linear => (None, params.layers[0].apply(x)),
        Architecture::Mlp { .. } => {
            let mut h = params.layers[0].apply(x);
            h.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            let y = params.layers[1].apply(&h);
            (Some(h), y)
        }
    };
    let embeddings = crate::numerics::normalize_rows(&pre_norm)?;
    let acts = retain.then_some(Activations { hidden, pre_norm });
    Ok((embeddings, acts))
}

/// Gradient of `⟨grad_e, E(x)⟩` w.r.t. every parameter.
pub fn backward(
    params: &EncoderParams,
    x: &Matrix,
    acts: Option<&Activations>,
    grad_e: &Matrix,
) -> Result<EncoderParams> {
    let acts = acts.ok_or(Error::ActivationsMissing)?;
    let n = x.rows();
    if grad_e.rows() != n || grad_e.cols() != params.output_dim || acts.pre_norm.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "embedding gradient is {}x{}, expected {n}x{}",
            grad_e.rows(),
            grad_e.cols(),
            params.output_dim
        )));
    }
    // through e = y/|y|: dy = (g − e (e·g)) / |y|
    let mut dy = Matrix::zeros(n, params.output_dim);
    for i in 0..n {
        let y = acts.pre_norm.row(i);
        let len = norm(y);
        let g = grad_e.row(i);
        let eg = dot(y, g) / len;
        for ((d, &yi), &gi) in dy.row_mut(i).iter_mut().zip(y).zip(g) {
            *d = (gi - yi / len * eg) / len;
        }
    }
    let mut grads = params.zeros_like();
    match params.arch {
        Architecture::Linear => Dense::accumulate(&mut grads.layers[0], &dy, x),
        Architecture::Mlp { .. } => {
            let h = acts.hidden.as_ref().ok_or(Error::ActivationsMissing)?;
            Dense::accumulate(&mut grads.layers[1], &dy, h);
            let mut dh = params.layers[1].back(&dy);
            for (d, &hv) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *d *= 1.0 - hv * hv;
            }
            Dense::accumulate(&mut grads.layers[0], &dh, x);
        }
    }
    Ok(grads)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `params`; betas 0.9 / 0.999, eps 1e-8.
    pub fn new(params: &EncoderParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update of `params` with `grads`.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) -> Result<()> {
        let gb = grads.blocks();
        let shapes_ok = params.same_shape(grads)
            && gb.len() == self.first.len()
            && gb.iter().zip(&self.first).all(|(g, m)| g.len() == m.len());
        if !shapes_ok {
            return Err(Error::ShapeMismatch("gradient does not match optimiser state".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(gb)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut EncoderParams, grads: &EncoderParams) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parse_architecture() {
        assert_eq!("linear".parse::<Architecture>().unwrap(), Architecture::Linear);
        assert_eq!("mlp:16".parse::<Architecture>().unwrap(), Architecture::Mlp { hidden: 16 });
        assert!("mlp:0".parse::<Architecture>().is_err());
        assert!("cnn".parse::<Architecture>().is_err());
        assert_eq!(Architecture::Mlp { hidden: 3 }.to_string(), "mlp:3");
    }

    #[test]
    fn identity_linear_encoder_passes_unit_rows_through() {
        let mut p = EncoderParams::zeros(Architecture::Linear, 3, 3).unwrap();
        for i in 0..3 {
            p.layers[0].weight.set(i, i, 1.0);
        }
        let x = Matrix::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let (e, acts) = forward(&p, &x, false).unwrap();
        assert_eq!(e, x);
        assert!(acts.is_none());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = seeded_rng(4);
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 7 }] {
            let p = EncoderParams::init(arch, 5, 4, &mut rng).unwrap();
            let x = random_matrix(20, 5, &mut rng);
            let (e, acts) = forward(&p, &x, true).unwrap();
            assert!(acts.is_some());
            for r in e.iter_rows() {
                assert!((norm(r) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = EncoderParams::init(Architecture::Linear, 5, 4, &mut seeded_rng(0)).unwrap();
        assert!(matches!(
            forward(&p, &Matrix::zeros(2, 3), false),
            Err(Error::DimensionMismatch { expected: 5, got: 3 })
        ));
    }

    #[test]
    fn backward_needs_activations() {
        let mut rng = seeded_rng(1);
        let p = EncoderParams::init(Architecture::Linear, 3, 2, &mut rng).unwrap();
        let x = random_matrix(2, 3, &mut rng);
        assert!(matches!(
            backward(&p, &x, None, &Matrix::zeros(2, 2)),
            Err(Error::ActivationsMissing)
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let mut rng = seeded_rng(2);
        let p = EncoderParams::init(Architecture::Mlp { hidden: 4 }, 3, 2, &mut rng).unwrap();
        let x = random_matrix(5, 3, &mut rng);
        let (_, acts) = forward(&p, &x, true).unwrap();
        let g = backward(&p, &x, acts.as_ref(), &Matrix::zeros(5, 2)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalisation_jacobian_kills_radial_direction() {
        // an upstream gradient along e itself produces no pre-norm gradient
        let mut rng = seeded_rng(3);
        let p = EncoderParams::init(Architecture::Linear, 4, 3, &mut rng).unwrap();
        let x = random_matrix(1, 4, &mut rng);
        let (e, acts) = forward(&p, &x, true).unwrap();
        let g = backward(&p, &x, acts.as_ref(), &e).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() < 1e-12));
    }

    fn check_gradient(arch: Architecture, n: usize, seed: u64) {
        let mut rng = seeded_rng(seed);
        let p = EncoderParams::init(arch, 4, 3, &mut rng).unwrap();
        let x = random_matrix(n, 4, &mut rng);
        let w = random_matrix(n, 3, &mut rng);
        let objective = |p: &EncoderParams| {
            let (e, _) = forward(p, &x, false).unwrap();
            dot(e.as_slice(), w.as_slice())
        };
        let (_, acts) = forward(&p, &x, true).unwrap();
        let analytic = backward(&p, &x, acts.as_ref(), &w).unwrap().flat();
        let h = 1e-6;
        let base = p.flat();
        for (idx, &an) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let mut k = idx;
            for (bp, bm) in plus.blocks_mut().into_iter().zip(minus.blocks_mut()) {
                if k < bp.len() {
                    bp[k] = base[idx] + h;
                    bm[k] = base[idx] - h;
                    break;
                }
                k -= bp.len();
            }
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "{arch} param {idx}: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradient(Architecture::Linear, 1, 10);
        check_gradient(Architecture::Linear, 6, 11);
        check_gradient(Architecture::Mlp { hidden: 5 }, 6, 12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut rng = seeded_rng(6);
        let mut p = EncoderParams::init(Architecture::Linear, 3, 2, &mut rng).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut s, &mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = EncoderParams::zeros(Architecture::Linear, 2, 1).unwrap();
        let mut g = p.zeros_like();
        g.layers[0].weight.as_mut_slice().copy_from_slice(&[0.3, -2.0]);
        g.layers[0].bias[0] = 1e-3;
        let mut s = AdamState::new(&p, 0.01);
        for _ in 0..200 {
            let before = p.flat();
            s.step(&mut p, &g).unwrap();
            let after = p.flat();
            for ((b, a), gi) in before.iter().zip(&after).zip(g.flat()) {
                let want = 0.01 * gi / (gi.abs() + 1e-8);
                assert!(((b - a) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = EncoderParams::zeros(Architecture::Linear, 2, 1).unwrap();
        let g = EncoderParams::zeros(Architecture::Linear, 3, 1).unwrap();
        let mut s = AdamState::new(&p, 0.01);
        assert!(matches!(s.step(&mut p, &g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = seeded_rng(77);
            let mut p = EncoderParams::init(Architecture::Mlp { hidden: 6 }, 4, 3, &mut rng).unwrap();
            let mut s = AdamState::new(&p, 0.05);
            let x = random_matrix(8, 4, &mut rng);
            let w = random_matrix(8, 3, &mut rng);
            for _ in 0..10 {
                let (_, acts) = forward(&p, &x, true).unwrap();
                let g = backward(&p, &x, acts.as_ref(), &w).unwrap();
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
