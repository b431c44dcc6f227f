//! Small real-valued networks with hand-written backward passes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// A bundle of trainable tensors that an optimizer can walk in a fixed order.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for dst in self.slices_mut() {
            for d in dst.iter_mut() {
                *d *= factor;
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl ParamSet for DMatrix<f64> {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> DMatrix<f64> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Plain fixed-step gradient descent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let n = params.n_params();
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                    self.t = 0;
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let mut idx = 0;
                for (dst, g) in params.slices_mut().into_iter().zip(grads.slices()) {
                    for (p, &g) in dst.iter_mut().zip(g) {
                        let m = &mut self.m[idx];
                        let v = &mut self.v[idx];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Two-layer perceptron `W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Activations kept for the backward pass, one column per sample.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub hidden: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl ParamSet for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

impl Mlp {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, d_in),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(d_out, hidden),
            b2: DVector::zeros(d_out),
        }
    }

    pub fn random<R: Rng>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(hidden, d_in, d_in, hidden, rng),
            b1: DVector::zeros(hidden),
            w2: xavier(d_out, hidden, hidden, d_out, rng),
            b2: DVector::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Forward pass on a batch laid out as columns.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<MlpCache> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        let mut hidden = &self.w1 * x;
        for mut col in hidden.column_iter_mut() {
            col += &self.b1;
            col.apply(|v| *v = tanh(*v));
        }
        let mut logits = &self.w2 * &hidden;
        for mut col in logits.column_iter_mut() {
            col += &self.b2;
        }
        Ok(MlpCache { hidden, logits })
    }

    /// Gradients for the parameters and the inputs given `dL/dlogits`.
    pub fn backward(&self, x: &DMatrix<f64>, cache: &MlpCache, d_logits: &DMatrix<f64>) -> (Mlp, DMatrix<f64>) {
        let w2 = d_logits * cache.hidden.transpose();
        let b2 = DVector::from_iterator(d_logits.nrows(), d_logits.row_iter().map(|r| r.sum()));
        let mut d_pre = self.w2.transpose() * d_logits;
        d_pre.zip_apply(&cache.hidden, |d, h| *d *= 1.0 - h * h);
        let w1 = &d_pre * x.transpose();
        let b1 = DVector::from_iterator(d_pre.nrows(), d_pre.row_iter().map(|r| r.sum()));
        let dx = self.w1.transpose() * &d_pre;
        (Mlp { w1, b1, w2, b2 }, dx)
    }
}

/// Hyperbolic tangent built on `exp`, about twice as fast as `f64::tanh`
/// with comparable relative accuracy.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a < 0.02 {
        let e = (-2.0 * a).exp_m1();
        -e / (2.0 + e)
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    t.copysign(x)
}

/// `(p_plus, p_minus)` from a pair of logits.
pub fn softmax2(plus: f64, minus: f64) -> (f64, f64) {
    let m = plus.max(minus);
    let a = (plus - m).exp();
    let b = (minus - m).exp();
    let s = a + b;
    (a / s, b / s)
}

/// Weighted binary cross-entropy over logits laid out as rows `[plus; minus]`.
///
/// Labels are `+1` / `-1`. The loss is normalized by the number of samples
/// with nonzero weight. Returns the loss and its gradient w.r.t. the logits.
pub fn weighted_cross_entropy(logits: &DMatrix<f64>, labels: &[i8], weights: &[f64]) -> (f64, DMatrix<f64>) {
    let n = logits.ncols();
    debug_assert_eq!(labels.len(), n);
    debug_assert_eq!(weights.len(), n);
    let active = weights.iter().filter(|&&w| w != 0.0).count();
    let mut grad = DMatrix::zeros(2, n);
    if active == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / active as f64;
    let mut loss = 0.0;
    for j in 0..n {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let (lp, lm) = (logits[(0, j)], logits[(1, j)]);
        let m = lp.max(lm);
        let lse = m + ((lp - m).exp() + (lm - m).exp()).ln();
        let (pp, pm) = softmax2(lp, lm);
        let (target, tp, tm) = if labels[j] > 0 { (lp, 1.0, 0.0) } else { (lm, 0.0, 1.0) };
        loss += w * norm * (lse - target);
        grad[(0, j)] = w * norm * (pp - tp);
        grad[(1, j)] = w * norm * (pm - tm);
    }
    (loss, grad)
}
