//! Structure-embedded binary classification for √M-PAM detection.
//!
//! Every real dimension `n` of the lifted transmit vector is detected by
//! one shared binary classifier. Shifting the received vector by `s·ĥ_n`
//! moves the decision boundary so a single ±1 decision answers "is
//! `x_n > -s`?", and the likelihood ratios of the shifts `2k` for
//! `k = -K..K` chain into a full posterior over the PAM alphabet.
//!
//! The classifier has one hidden layer shared by every dimension and every
//! shift, and a pair of `(plus, minus)` logits per dimension: rows `2n` and
//! `2n + 1` of its output answer for dimension `n`. `ĥ_n` is column `n` of
//! the learned PE matrix.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{twod_mha_backward_cached, twod_mha_forward_cached, TwoDMhaParams};
use crate::error::{Error, Result};
use crate::linalg::solve_hpd;
use crate::nn::{softmax2, tanh, weighted_cross_entropy, Mlp, Optimizer, OptimizerKind, ParamSet};
use crate::seed::rng_from;

/// Logit differences are clipped to this magnitude before assembly.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub ebno_min_db: f64,
    pub ebno_max_db: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            epochs: 1000,
            ebno_min_db: 0.0,
            ebno_max_db: 15.0,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructNetConfig {
    pub hidden: usize,
    pub eta: f64,
    pub lr_clf: f64,
    pub lr_pe: f64,
    pub lr_mha: f64,
    pub pilot_epochs: usize,
    pub df_epochs: usize,
    pub optimizer: OptimizerKind,
    /// Ridge of the PE least-squares initialization.
    pub pe_ridge: f64,
    pub pretrain: PretrainConfig,
}

impl Default for StructNetConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            eta: 0.5,
            lr_clf: 0.01,
            lr_pe: 0.005,
            lr_mha: 0.01,
            pilot_epochs: 20,
            df_epochs: 3,
            optimizer: OptimizerKind::Sgd,
            pe_ridge: 1e-3,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructNetParams {
    /// `D x 2N_t`; column `n` is `ĥ_n`.
    pub pe: DMatrix<f64>,
    pub clf: Mlp,
}

impl StructNetParams {
    pub fn new(pe: DMatrix<f64>, clf: Mlp) -> Result<Self> {
        if clf.input_dim() != pe.nrows() || clf.output_dim() != 2 * pe.ncols() {
            return Err(Error::shape(format!(
                "classifier takes {} inputs and {} outputs, PE is {}x{}",
                clf.input_dim(),
                clf.output_dim(),
                pe.nrows(),
                pe.ncols()
            )));
        }
        Ok(Self { pe, clf })
    }

    pub fn input_dim(&self) -> usize {
        self.pe.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.pe.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySample {
    pub input: DVector<f64>,
    pub label: i8,
    pub shift: i32,
    pub dim_index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    /// Probabilities over the PAM levels in ascending order.
    pub probs: Vec<f64>,
    pub argmax: i32,
    pub confidence: f64,
}

fn check_level(level: i32, k: i32) -> Result<()> {
    let top = 2 * k + 1;
    if level.abs() > top || (level - top) % 2 != 0 {
        return Err(Error::shape(format!("{level} is not a PAM level for K={k}")));
    }
    Ok(())
}

/// Shifts of the positive and negative sample built from a PAM label.
pub fn sample_shifts(pam_label: i32) -> (i32, i32) {
    (-pam_label + 1, -pam_label - 1)
}

/// Positive `(+1, s = -x + 1)` and negative `(-1, s = -x - 1)` samples.
pub fn construct_binary_samples(
    pam_label: i32,
    k: i32,
    y: &DVector<f64>,
    dim_index: usize,
) -> Result<(BinarySample, BinarySample)> {
    check_level(pam_label, k)?;
    let (sp, sm) = sample_shifts(pam_label);
    let mk = |label: i8, shift: i32| BinarySample {
        input: y.clone(),
        label,
        shift,
        dim_index,
        weight: 1.0,
    };
    Ok((mk(1, sp), mk(-1, sm)))
}

/// How many of the two samples built from `assumed` carry the wrong label
/// when the transmitted level is `truth`.
pub fn mislabeled_count(truth: i32, assumed: i32, k: i32) -> Result<usize> {
    check_level(truth, k)?;
    check_level(assumed, k)?;
    let (sp, sm) = sample_shifts(assumed);
    let wrong_plus = truth + sp < 0;
    let wrong_minus = truth + sm > 0;
    Ok(wrong_plus as usize + wrong_minus as usize)
}

/// `y + s·pe[:, n]`.
pub fn shift(y: &DVector<f64>, s: f64, pe: &DMatrix<f64>, n: usize) -> DVector<f64> {
    y + pe.column(n) * s
}

/// `(p_plus, p_minus)` of the classifier head `n` on a shifted input.
pub fn binary_forward(clf: &Mlp, input: &DVector<f64>, n: usize) -> Result<(f64, f64)> {
    if 2 * n + 1 >= clf.output_dim() {
        return Err(Error::shape(format!("classifier has no head for dimension {n}")));
    }
    let x = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
    let c = clf.forward(&x)?;
    Ok(softmax2(c.logits[(2 * n, 0)], c.logits[(2 * n + 1, 0)]))
}

/// Weighted cross-entropy where sample `j` is scored by head `dims[j]`.
fn head_cross_entropy(logits: &DMatrix<f64>, dims: &[usize], labels: &[i8], weights: &[f64]) -> (f64, DMatrix<f64>) {
    let b = dims.len();
    let picked = DMatrix::from_fn(2, b, |r, j| logits[(2 * dims[j] + r, j)]);
    let (loss, g) = weighted_cross_entropy(&picked, labels, weights);
    let mut full = DMatrix::zeros(logits.nrows(), b);
    for (j, &n) in dims.iter().enumerate() {
        full[(2 * n, j)] = g[(0, j)];
        full[(2 * n + 1, j)] = g[(1, j)];
    }
    (loss, full)
}

/// Chains clamped log-likelihood ratios into a normalized posterior.
///
/// `log_ratio[j]` is `log L(k)` for `k = -K + j`.
pub fn posterior_from_log_ratios(log_ratio: &[f64]) -> ClassPosterior {
    let n_ratio = log_ratio.len();
    let k = (n_ratio as i32 - 1) / 2;
    let mut logp = vec![0.0; n_ratio + 1];
    for i in 1..=n_ratio {
        // class -2K-1+2i is class -2k+1 with k = K - i + 1
        let kk = k - i as i32 + 1;
        let j = (kk + k) as usize;
        logp[i] = logp[i - 1] + log_ratio[j].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    }
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logp.iter().map(|l| (l - m).exp()).sum();
    let probs: Vec<f64> = logp.iter().map(|l| (l - m - z.ln()).exp()).collect();
    let (best, &confidence) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    ClassPosterior {
        probs,
        argmax: -2 * k - 1 + 2 * best as i32,
        confidence,
    }
}

/// Posteriors for every column of `y` and every dimension, indexed
/// `col * n_dims + n`.
pub fn posteriors(params: &StructNetParams, y: &DMatrix<f64>, k: i32) -> Result<Vec<ClassPosterior>> {
    let d = params.input_dim();
    let nd = params.n_dims();
    if y.nrows() != d {
        return Err(Error::shape(format!("structnet expects {d} rows, got {}", y.nrows())));
    }
    let n_shift = (2 * k + 1) as usize;
    let cols = y.ncols();
    let clf = &params.clf;
    if clf.output_dim() < 2 * nd {
        return Err(Error::shape("classifier has fewer heads than dimensions"));
    }
    let hd = clf.hidden_dim();
    let mut pre_y = &clf.w1 * y;
    for mut col in pre_y.column_iter_mut() {
        col += &clf.b1;
    }
    let dir = &clf.w1 * &params.pe;
    let w2_diff: Vec<Vec<f64>> = (0..nd)
        .map(|n| (0..hd).map(|i| clf.w2[(2 * n, i)] - clf.w2[(2 * n + 1, i)]).collect())
        .collect();
    let mut out = Vec::with_capacity(cols * nd);
    let mut ratios = vec![0.0; n_shift];
    for c in 0..cols {
        for n in 0..nd {
            let py = pre_y.column(c);
            let dn = dir.column(n);
            for (j, r) in ratios.iter_mut().enumerate() {
                let s = 2.0 * (j as f64 - k as f64);
                let mut diff = clf.b2[2 * n] - clf.b2[2 * n + 1];
                for ((p, d), w) in py.iter().zip(dn.iter()).zip(&w2_diff[n]) {
                    diff += w * tanh(p + s * d);
                }
                *r = diff;
            }
            out.push(posterior_from_log_ratios(&ratios));
        }
    }
    Ok(out)
}

pub fn assemble_class_posterior(params: &StructNetParams, y: &DVector<f64>, n: usize, k: i32) -> Result<ClassPosterior> {
    if n >= params.n_dims() {
        return Err(Error::shape(format!("dimension {n} out of range")));
    }
    let y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let mut all = posteriors(params, &y, k)?;
    Ok(all.swap_remove(n))
}

/// `q(x) = x` if `x >= eta`, else 0.
pub fn attention_weight(confidence: f64, eta: f64) -> f64 {
    if confidence >= eta {
        confidence
    } else {
        0.0
    }
}

/// Loss and gradients of the weighted binary cross-entropy.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub clf: Mlp,
    pub pe: DMatrix<f64>,
    /// Gradient w.r.t. the unshifted inputs.
    pub y: DMatrix<f64>,
    pub n_samples: usize,
}

/// Builds both binary samples for every `(column, dim)` with nonzero weight
/// and evaluates the attention-weighted cross-entropy.
///
/// `labels` and `weights` are `n_dims x cols`. The first layer is applied
/// once per column and once per PE direction, and only the two logits of
/// the sample's own head are formed.
pub fn loss_and_grad(
    params: &StructNetParams,
    y: &DMatrix<f64>,
    labels: &DMatrix<i32>,
    weights: &DMatrix<f64>,
) -> Result<LossGrad> {
    let d = params.input_dim();
    let nd = params.n_dims();
    let cols = y.ncols();
    if y.nrows() != d || labels.shape() != (nd, cols) || weights.shape() != (nd, cols) {
        return Err(Error::shape("structnet batch shapes disagree"));
    }
    let clf = &params.clf;
    let hd = clf.hidden_dim();
    let active = weights.iter().filter(|w| **w != 0.0).count();
    let mut g_clf = clf.zeros_like();
    let mut a_sum = DMatrix::zeros(hd, cols);
    let mut b_sum = DMatrix::zeros(hd, nd);
    let n_samples = 2 * active;
    if active == 0 {
        return Ok(LossGrad {
            loss: 0.0,
            clf: g_clf,
            pe: DMatrix::zeros(d, nd),
            y: DMatrix::zeros(d, cols),
            n_samples,
        });
    }
    let norm = 1.0 / n_samples as f64;
    let mut pre_y = &clf.w1 * y;
    for mut col in pre_y.column_iter_mut() {
        col += &clf.b1;
    }
    let dir = &clf.w1 * &params.pe;
    // head rows copied out of the column-major W2
    let w2_rows: Vec<Vec<f64>> = (0..2 * nd).map(|r| clf.w2.row(r).iter().copied().collect()).collect();
    let mut gw2_rows = vec![vec![0.0; hd]; 2 * nd];
    let mut h = vec![0.0; hd];
    let mut loss = 0.0;
    for c in 0..cols {
        let py = pre_y.column(c);
        let py = py.as_slice();
        for n in 0..nd {
            let w = weights[(n, c)];
            if w == 0.0 {
                continue;
            }
            let dn = dir.column(n);
            let dn = dn.as_slice();
            let (sp, sm) = sample_shifts(labels[(n, c)]);
            let (rp, rm) = (2 * n, 2 * n + 1);
            for (s, label) in [(sp, 1i8), (sm, -1i8)] {
                let s = s as f64;
                for ((hv, &p), &d) in h.iter_mut().zip(py).zip(dn) {
                    *hv = tanh(p + s * d);
                }
                let (wp, wm) = (&w2_rows[rp], &w2_rows[rm]);
                let mut lp = clf.b2[rp];
                let mut lm = clf.b2[rm];
                for ((hv, a), b) in h.iter().zip(wp).zip(wm) {
                    lp += a * hv;
                    lm += b * hv;
                }
                let m = lp.max(lm);
                let lse = m + ((lp - m).exp() + (lm - m).exp()).ln();
                let (pp, pm) = softmax2(lp, lm);
                let (target, tp, tm) = if label > 0 { (lp, 1.0, 0.0) } else { (lm, 0.0, 1.0) };
                loss += w * norm * (lse - target);
                let gp = w * norm * (pp - tp);
                let gm = w * norm * (pm - tm);
                g_clf.b2[rp] += gp;
                g_clf.b2[rm] += gm;
                for (g, hv) in gw2_rows[rp].iter_mut().zip(&h) {
                    *g += gp * hv;
                }
                for (g, hv) in gw2_rows[rm].iter_mut().zip(&h) {
                    *g += gm * hv;
                }
                let mut ac = a_sum.column_mut(c);
                let ac = ac.as_mut_slice();
                for i in 0..hd {
                    let hv = h[i];
                    let dpre = (gp * wp[i] + gm * wm[i]) * (1.0 - hv * hv);
                    ac[i] += dpre;
                    h[i] = s * dpre;
                }
                let mut bn = b_sum.column_mut(n);
                for (b, v) in bn.as_mut_slice().iter_mut().zip(&h) {
                    *b += v;
                }
            }
        }
    }
    for (r, row) in gw2_rows.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            g_clf.w2[(r, i)] = *v;
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("structnet", format!("loss is {loss}")));
    }
    // every sample input is y_c + s pe_n
    g_clf.w1 = &a_sum * y.transpose() + &b_sum * params.pe.transpose();
    g_clf.b1 = DVector::from_iterator(hd, a_sum.row_iter().map(|r| r.sum()));
    let w1t = clf.w1.transpose();
    Ok(LossGrad {
        loss,
        clf: g_clf,
        pe: &w1t * b_sum,
        y: w1t * a_sum,
        n_samples,
    })
}

/// Regularized LS fit `pe = Y X^T (X X^T + ridge I)^{-1}` of outputs `y`
/// against transmitted PAM values `x`.
pub fn init_pe_lmmse(y: &DMatrix<f64>, x: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if y.ncols() == 0 || y.ncols() != x.ncols() {
        return Err(Error::shape(format!(
            "PE fit needs matching nonzero pilot counts, got {} and {}",
            y.ncols(),
            x.ncols()
        )));
    }
    let n = x.nrows();
    let solve = |ridge: f64| {
        let mut g = x * x.transpose();
        for i in 0..n {
            g[(i, i)] += ridge;
        }
        // G PE^T = X Y^T
        solve_hpd(g, &(x * y.transpose())).map(|t| t.transpose())
    };
    solve(ridge)
        .or_else(|| solve(ridge.max(1e-6) * 1e3))
        .ok_or_else(|| Error::numerical("PE init", "pilot normal matrix is singular"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub clf: bool,
    pub pe: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { clf: true, pe: true };
    pub const CLASSIFIER: Trainable = Trainable { clf: true, pe: false };
}

/// Alternating optimization: even epochs step the classifier, odd epochs
/// step the PE. A frozen part turns its epochs into no-ops.
fn alternate(
    params: &mut StructNetParams,
    y: &DMatrix<f64>,
    labels: &DMatrix<i32>,
    weights: &DMatrix<f64>,
    epochs: usize,
    cfg: &StructNetConfig,
    train: Trainable,
) -> Result<Vec<f64>> {
    let mut opt_clf = Optimizer::new(cfg.optimizer, cfg.lr_clf);
    let mut opt_pe = Optimizer::new(cfg.optimizer, cfg.lr_pe);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let clf_turn = epoch % 2 == 0;
        if (clf_turn && !train.clf) || (!clf_turn && !train.pe) {
            continue;
        }
        let g = loss_and_grad(params, y, labels, weights)?;
        losses.push(g.loss);
        if clf_turn {
            opt_clf.step(&mut params.clf, &g.clf);
        } else {
            opt_pe.step(&mut params.pe, &g.pe);
        }
        if !params.clf.is_finite() || !params.pe.is_finite() {
            return Err(Error::numerical("structnet", format!("non-finite parameters at epoch {epoch}")));
        }
    }
    Ok(losses)
}

/// Pilot training with unit sample weights. Returns the per-step losses.
pub fn train_pilot(
    params: &mut StructNetParams,
    y: &DMatrix<f64>,
    labels: &DMatrix<i32>,
    cfg: &StructNetConfig,
    train: Trainable,
) -> Result<Vec<f64>> {
    let w = DMatrix::from_element(labels.nrows(), labels.ncols(), 1.0);
    alternate(params, y, labels, &w, cfg.pilot_epochs, cfg, train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub losses: Vec<f64>,
    /// Samples that passed the confidence threshold.
    pub active: usize,
}

/// Decision-feedback fine-tuning on detected labels weighted by `q(confidence)`.
pub fn finetune_df(
    params: &mut StructNetParams,
    y: &DMatrix<f64>,
    detected: &DMatrix<i32>,
    confidences: &DMatrix<f64>,
    cfg: &StructNetConfig,
    train: Trainable,
) -> Result<FinetuneOutcome> {
    let w = confidences.map(|c| attention_weight(c, cfg.eta));
    let active = w.iter().filter(|v| **v != 0.0).count();
    if active == 0 {
        return Ok(FinetuneOutcome {
            losses: Vec::new(),
            active,
        });
    }
    let losses = alternate(params, y, detected, &w, cfg.df_epochs, cfg, train)?;
    Ok(FinetuneOutcome { losses, active })
}

/// Per-subcarrier feature columns of a group, built from the per-stream
/// grids `N_p x 2N_sc`. Column `p * len + (sc - start)` holds
/// `[re of every stream; im of every stream]`.
pub fn grids_to_features(grids: &[DMatrix<f64>], start: usize, len: usize) -> DMatrix<f64> {
    let nt = grids.len();
    let n_p = grids[0].nrows();
    let mut y = DMatrix::zeros(2 * nt, n_p * len);
    for (t, g) in grids.iter().enumerate() {
        for p in 0..n_p {
            for j in 0..len {
                let sc = start + j;
                y[(t, p * len + j)] = g[(p, 2 * sc)];
                y[(nt + t, p * len + j)] = g[(p, 2 * sc + 1)];
            }
        }
    }
    y
}

fn scatter_feature_grad(dy: &DMatrix<f64>, grads: &mut [DMatrix<f64>], start: usize, len: usize) {
    let nt = grads.len();
    let n_p = grads[0].nrows();
    for (t, g) in grads.iter_mut().enumerate() {
        for p in 0..n_p {
            for j in 0..len {
                let sc = start + j;
                g[(p, 2 * sc)] += dy[(t, p * len + j)];
                g[(p, 2 * sc + 1)] += dy[(nt + t, p * len + j)];
            }
        }
    }
}

/// One subcarrier group: `[start, start + len)` and its labels laid out as
/// in [`grids_to_features`].
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub start: usize,
    pub len: usize,
    pub labels: DMatrix<i32>,
}

/// Joint pilot training of the 2D MHA and the per-group StructNets.
///
/// The StructNets consume the MHA output. Classifier epochs also step the
/// MHA, whose gradient is summed over streams and groups.
pub fn train_pilot_with_mha(
    params: &mut [StructNetParams],
    mha: &mut TwoDMhaParams,
    grids: &[DMatrix<f64>],
    groups: &[GroupBatch],
    cfg: &StructNetConfig,
    train: Trainable,
) -> Result<Vec<f64>> {
    if params.len() != groups.len() {
        return Err(Error::shape("one StructNet per group is required"));
    }
    let mut opt_mha = Optimizer::new(cfg.optimizer, cfg.lr_mha);
    let mut opt_clf: Vec<Optimizer> = groups.iter().map(|_| Optimizer::new(cfg.optimizer, cfg.lr_clf)).collect();
    let mut opt_pe: Vec<Optimizer> = groups.iter().map(|_| Optimizer::new(cfg.optimizer, cfg.lr_pe)).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.pilot_epochs {
        let clf_turn = epoch % 2 == 0;
        if !clf_turn && !train.pe {
            continue;
        }
        let caches = grids
            .iter()
            .map(|g| twod_mha_forward_cached(g, mha))
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<DMatrix<f64>> = caches.iter().map(|c| c.output.clone()).collect();
        let mut d_out: Vec<DMatrix<f64>> = outputs.iter().map(|o| DMatrix::zeros(o.nrows(), o.ncols())).collect();
        let mut total = 0.0;
        for (gi, group) in groups.iter().enumerate() {
            let y = grids_to_features(&outputs, group.start, group.len);
            let w = DMatrix::from_element(group.labels.nrows(), group.labels.ncols(), 1.0);
            let g = loss_and_grad(&params[gi], &y, &group.labels, &w)?;
            total += g.loss;
            if clf_turn {
                if train.clf {
                    opt_clf[gi].step(&mut params[gi].clf, &g.clf);
                }
                scatter_feature_grad(&g.y, &mut d_out, group.start, group.len);
            } else {
                opt_pe[gi].step(&mut params[gi].pe, &g.pe);
            }
        }
        losses.push(total);
        if clf_turn {
            let mut acc = mha.zeros_like();
            for ((grid, cache), up) in grids.iter().zip(&caches).zip(&d_out) {
                let (g, _) = twod_mha_backward_cached(grid, mha, cache, up);
                acc.add_scaled(&g, 1.0);
            }
            opt_mha.step(mha, &acc);
            if !mha.is_finite() {
                return Err(Error::numerical("attention", format!("non-finite parameters at epoch {epoch}")));
            }
        }
    }
    Ok(losses)
}

/// Offline classifier training on artificial identity-channel data.
///
/// Column `j` trains head `j % dims`: its own coordinate is a sign from
/// `{±1}` and every other coordinate a PAM level of the target
/// constellation, matching what the head sees after the shifting process.
/// The noise of each column is drawn at an Eb/No uniform over the
/// configured range, with Eb taken from the constellation in lattice units.
pub fn offline_pretrain(dims: usize, hidden: usize, mod_order: usize, cfg: &PretrainConfig, seed: u64) -> Result<Mlp> {
    let c = crate::txchain::Constellation::new(mod_order)?;
    let mut rng = rng_from(seed, &[crate::seed::stage::PRETRAIN]);
    let mut clf = Mlp::random(dims, hidden, 2 * dims, &mut rng);
    let batch = artificial_batch(dims, c.order(), cfg, cfg.samples, &mut rng);
    let weights = vec![1.0; batch.labels.len()];
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    for _ in 0..cfg.epochs {
        let cache = clf.forward(&batch.x)?;
        let (loss, d) = head_cross_entropy(&cache.logits, &batch.heads, &batch.labels, &weights);
        if !loss.is_finite() {
            return Err(Error::numerical("pretrain", format!("loss is {loss}")));
        }
        let (g, _) = clf.backward(&batch.x, &cache, &d);
        opt.step(&mut clf, &g);
    }
    Ok(clf)
}

/// Artificial binary samples, one column per sample.
#[derive(Debug, Clone)]
pub struct ArtificialBatch {
    pub x: DMatrix<f64>,
    /// Head scoring each column.
    pub heads: Vec<usize>,
    pub labels: Vec<i8>,
}

pub fn artificial_batch<R: Rng>(
    dims: usize,
    mod_order: usize,
    cfg: &PretrainConfig,
    count: usize,
    rng: &mut R,
) -> ArtificialBatch {
    let m = mod_order as f64;
    let side = m.sqrt().round() as i32;
    // lattice energy per complex symbol over bits gives Eb
    let eb = 2.0 * (m - 1.0) / 3.0 / m.log2();
    let mut x = DMatrix::zeros(dims, count);
    let mut heads = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for j in 0..count {
        let ebno_db = rng.random_range(cfg.ebno_min_db..=cfg.ebno_max_db);
        let sigma = (eb / 10f64.powf(ebno_db / 10.0) / 2.0).sqrt();
        let head = j % dims;
        let label: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
        for i in 0..dims {
            let clean = if i == head {
                label as f64
            } else {
                (2 * rng.random_range(0..side) - side + 1) as f64
            };
            let g: f64 = rng.sample(StandardNormal);
            x[(i, j)] = clean + sigma * g;
        }
        heads.push(head);
        labels.push(label);
    }
    ArtificialBatch { x, heads, labels }
}

type PretrainKey = (usize, usize, usize, u64, usize, usize);

/// Pretrained classifier shared by every subframe with the same setup.
pub fn pretrained_classifier(
    dims: usize,
    hidden: usize,
    mod_order: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Arc<Mlp>> {
    static CACHE: OnceLock<Mutex<HashMap<PretrainKey, Arc<Mlp>>>> = OnceLock::new();
    let key = (dims, hidden, mod_order, seed, cfg.samples, cfg.epochs);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Ok(m.clone());
    }
    // trained outside the lock; a racing duplicate is identical and harmless
    let m = Arc::new(offline_pretrain(dims, hidden, mod_order, cfg, seed)?);
    cache.lock().unwrap().entry(key).or_insert_with(|| m.clone());
    Ok(m)
}
