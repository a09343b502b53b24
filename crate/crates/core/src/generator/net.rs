//! Dense feed-forward networks with manual backpropagation, Adam updates,
//! and the input-gradient machinery needed for the critic's gradient
//! penalty.
//!
//! Everything is f64 and batch-major: a batch is a `B x d` matrix, one row
//! per sample. Hidden layers share one activation; the output layer is
//! linear.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BlockKind, OutBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if pre > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    /// `(d_out, d_in)`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Multilayer perceptron: hidden activations on all layers but the last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
}

/// Intermediate state of a forward pass, consumed by the backward passes.
pub struct ForwardCache {
    /// `acts[l]` is the input to layer `l`; `acts[0]` is the batch input.
    pub acts: Vec<DMatrix<f64>>,
    /// Pre-activations per layer.
    pub pre: Vec<DMatrix<f64>>,
}

/// Per-layer parameter gradients.
pub struct Grads {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Grads {
        Grads {
            w: mlp
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            b: mlp.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }
}

impl Mlp {
    /// He-style initialization scaled to fan-in; biases start at zero.
    pub fn new(dims: &[usize], hidden: Activation, rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let scale = (2.0 / d_in as f64).sqrt();
            let w = DMatrix::from_fn(d_out, d_in, |_, _| {
                // Box-Muller keeps us off rand_distr here so the stream is
                // easy to reason about.
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            });
            layers.push(Dense {
                w,
                b: DVector::zeros(d_out),
            });
        }
        Mlp { layers, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite())
        })
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            acts.push(a.clone());
            let mut z = &a * layer.w.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.b.transpose();
            }
            pre.push(z.clone());
            a = if l + 1 < n_layers {
                z.map(|v| self.hidden.apply(v))
            } else {
                z
            };
        }
        (a, ForwardCache { acts, pre })
    }

    /// Backpropagates `grad_out` (gradient of a scalar loss w.r.t. the
    /// output) to parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> (Grads, DMatrix<f64>) {
        let n_layers = self.layers.len();
        let mut grads = Grads::zeros_like(self);
        let mut delta = grad_out.clone();
        for l in (0..n_layers).rev() {
            grads.w[l] = delta.transpose() * &cache.acts[l];
            grads.b[l] = DVector::from_fn(delta.ncols(), |j, _| delta.column(j).sum());
            let d_act = &delta * &self.layers[l].w;
            if l > 0 {
                delta = d_act.zip_map(&cache.pre[l - 1], |g, z| g * self.hidden.derivative(z));
            } else {
                delta = d_act;
            }
        }
        (grads, delta)
    }

    /// For a scalar-output network: per-sample gradient of the output with
    /// respect to the input, plus the mask-gated chain `s[l] = d out / d pre_l`
    /// needed by [`Mlp::penalty_param_grads`].
    pub fn input_gradient(&self, cache: &ForwardCache) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n_layers = self.layers.len();
        assert_eq!(self.output_dim(), 1, "input_gradient expects a scalar output");
        let batch = cache.acts[0].nrows();
        let mut s_chain = vec![DMatrix::zeros(0, 0); n_layers];
        s_chain[n_layers - 1] = DMatrix::from_element(batch, 1, 1.0);
        for l in (1..n_layers).rev() {
            let t = &s_chain[l] * &self.layers[l].w;
            s_chain[l - 1] =
                t.zip_map(&cache.pre[l - 1], |g, z| g * self.hidden.derivative(z));
        }
        let g = &s_chain[0] * &self.layers[0].w;
        (g, s_chain)
    }

    /// Parameter gradients of a scalar functional `P = sum_i p(g_i)` of the
    /// per-sample input gradients `g_i`, given `u_i = dP/dg_i`. Activation
    /// masks are treated as locally constant, which is exact almost
    /// everywhere for piecewise-linear activations.
    pub fn penalty_param_grads(
        &self,
        cache: &ForwardCache,
        s_chain: &[DMatrix<f64>],
        u: &DMatrix<f64>,
    ) -> Grads {
        let n_layers = self.layers.len();
        let mut grads = Grads::zeros_like(self);
        let mut h = u.clone();
        for l in 0..n_layers {
            grads.w[l] = s_chain[l].transpose() * &h;
            // Bias gradients vanish: biases only move the (frozen) masks.
            if l + 1 < n_layers {
                let t = &h * self.layers[l].w.transpose();
                h = t.zip_map(&cache.pre[l], |g, z| g * self.hidden.derivative(z));
            }
        }
        grads
    }
}

/// Adam optimizer state for one network.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m_w: mlp
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            v_w: mlp
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            m_b: mlp.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
            v_b: mlp.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for l in 0..mlp.layers.len() {
            for ((w, m), (v, g)) in mlp.layers[l]
                .w
                .iter_mut()
                .zip(self.m_w[l].iter_mut())
                .zip(self.v_w[l].iter_mut().zip(grads.w[l].iter()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
            for ((b, m), (v, g)) in mlp.layers[l]
                .b
                .iter_mut()
                .zip(self.m_b[l].iter_mut())
                .zip(self.v_b[l].iter_mut().zip(grads.b[l].iter()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *b -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Applies the generator's output structure: tanh on alpha cells, softmax
/// within one-hot blocks.
pub fn apply_output_activations(raw: &DMatrix<f64>, blocks: &[OutBlock]) -> DMatrix<f64> {
    let mut out = raw.clone();
    for i in 0..raw.nrows() {
        for block in blocks {
            match block.kind {
                BlockKind::Alpha => {
                    out[(i, block.offset)] = raw[(i, block.offset)].tanh();
                }
                BlockKind::OneHot => {
                    let m = (0..block.len)
                        .map(|j| raw[(i, block.offset + j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..block.len {
                        let e = (raw[(i, block.offset + j)] - m).exp();
                        out[(i, block.offset + j)] = e;
                        total += e;
                    }
                    for j in 0..block.len {
                        out[(i, block.offset + j)] /= total;
                    }
                }
            }
        }
    }
    out
}

/// Backward pass through [`apply_output_activations`].
pub fn output_activation_backward(
    activated: &DMatrix<f64>,
    blocks: &[OutBlock],
    grad_out: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut grad = grad_out.clone();
    for i in 0..activated.nrows() {
        for block in blocks {
            match block.kind {
                BlockKind::Alpha => {
                    let a = activated[(i, block.offset)];
                    grad[(i, block.offset)] = grad_out[(i, block.offset)] * (1.0 - a * a);
                }
                BlockKind::OneHot => {
                    let dot: f64 = (0..block.len)
                        .map(|j| {
                            grad_out[(i, block.offset + j)] * activated[(i, block.offset + j)]
                        })
                        .sum();
                    for j in 0..block.len {
                        let p = activated[(i, block.offset + j)];
                        grad[(i, block.offset + j)] =
                            p * (grad_out[(i, block.offset + j)] - dot);
                    }
                }
            }
        }
    }
    grad
}
