//! Small-MIMO experiments on block-static Gaussian channels.
//!
//! A complex 2x2 channel is lifted to its 4x4 real form and carries
//! unit-power 4-PAM on every real dimension (16-QAM per antenna). Eb/No is
//! the received energy per bit over N0 with per-dimension noise variance
//! `N0 / 2 = N_t / (4 Eb/No)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Mlp, Optimizer, OptimizerKind, ParamSet};
use crate::pipeline::median;
use crate::seed::{rng_from, SimRng};
use crate::structnet::{init_pe_lmmse, loss_and_grad, mislabeled_count, posteriors, StructNetParams, Trainable};
use crate::txchain::{real_channel_form, C64};

pub const TOY_NT: usize = 2;
pub const TOY_NR: usize = 2;
/// Real dimensions of the lifted system.
pub const TOY_DIMS: usize = 2 * TOY_NT;
pub const PAM_LEVELS: [i32; 4] = [-3, -1, 1, 3];
const TOY_K: i32 = 1;
pub const CHANNEL_DRAW_GUARD: usize = 1_000_000;

mod path {
    pub const CHANNEL: u64 = 11;
    pub const TRAIN: u64 = 12;
    pub const TEST: u64 = 13;
    pub const INIT: u64 = 14;
    pub const SHUFFLE: u64 = 15;
    pub const CORRUPT: u64 = 16;
}

/// Lattice-to-unit-power factor of 4-PAM.
pub fn pam_scale() -> f64 {
    1.0 / 5f64.sqrt()
}

/// Per-dimension noise variance at `ebno_db`.
pub fn toy_noise_var(ebno_db: f64) -> f64 {
    TOY_NT as f64 / (4.0 * 10f64.powf(ebno_db / 10.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_channels: usize,
    pub n_lmmse: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub cond_max: f64,
    pub hidden: usize,
    /// Alternating classifier / PE epochs.
    pub epochs: usize,
    pub batch: usize,
    pub lr_clf: f64,
    pub lr_pe: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_channels: 100,
            n_lmmse: 4,
            n_train: 996,
            n_test: 3000,
            cond_max: 1.5,
            hidden: 128,
            epochs: 12,
            batch: 83,
            lr_clf: 2e-2,
            lr_pe: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyChannel {
    pub h: DMatrix<C64>,
    /// Real form `2N_r x 2N_t`.
    pub h_real: DMatrix<f64>,
    pub cond: f64,
    /// Draws needed to accept, including the accepted one.
    pub draws: usize,
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Rejection-samples CN(0, 1) 2x2 channels until the condition number is
/// below `cond_max`.
pub fn toy_channel_sample(seed: u64, cond_max: f64) -> Result<ToyChannel> {
    let mut rng = rng_from(seed, &[path::CHANNEL]);
    let s = 0.5f64.sqrt();
    for draw in 1..=CHANNEL_DRAW_GUARD {
        let h = DMatrix::from_fn(TOY_NR, TOY_NT, |_, _| {
            C64::new(rng.sample::<f64, _>(StandardNormal) * s, rng.sample::<f64, _>(StandardNormal) * s)
        });
        let h_real = real_channel_form(&h);
        let cond = condition_number(&h_real);
        if cond < cond_max {
            return Ok(ToyChannel { h, h_real, cond, draws: draw });
        }
    }
    Err(Error::numerical(
        "toy channel",
        format!("no channel with condition number below {cond_max} in {CHANNEL_DRAW_GUARD} draws"),
    ))
}

/// PAM labels `TOY_DIMS x n` and their noisy observations.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub labels: DMatrix<i32>,
    pub y: DMatrix<f64>,
}

pub fn toy_batch(h_real: &DMatrix<f64>, n: usize, noise_var: f64, rng: &mut SimRng) -> ToyBatch {
    let labels = DMatrix::from_fn(TOY_DIMS, n, |_, _| PAM_LEVELS[rng.random_range(0..4)]);
    let sigma = noise_var.sqrt();
    let mut y = h_real * labels.map(|v| v as f64 * pam_scale());
    for v in y.iter_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    ToyBatch { labels, y }
}

/// Replaces a uniformly chosen `fraction` of the labels by a level drawn
/// uniformly from the other three.
pub fn corrupt_labels(labels: &DMatrix<i32>, fraction: f64, rng: &mut SimRng) -> Result<DMatrix<i32>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} is outside [0, 1]")));
    }
    let n = labels.len();
    let n_bad = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = labels.clone();
    for &i in &idx[..n_bad] {
        let truth = labels[i];
        let others: Vec<i32> = PAM_LEVELS.iter().copied().filter(|&l| l != truth).collect();
        out[i] = others[rng.random_range(0..others.len())];
    }
    Ok(out)
}

/// Fraction of binary samples built from `assumed` that carry a wrong label.
pub fn binary_corruption(truth: &DMatrix<i32>, assumed: &DMatrix<i32>) -> Result<f64> {
    let mut wrong = 0;
    for (&t, &a) in truth.iter().zip(assumed.iter()) {
        wrong += mislabeled_count(t, a, TOY_K)?;
    }
    Ok(wrong as f64 / (2 * truth.len()).max(1) as f64)
}

fn minibatches(n: usize, batch: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Adam on shuffled minibatches with the classifier and the PE updated in
/// alternating epochs (classifier first). A frozen part's epochs are no-ops,
/// so every method gets the same number of classifier steps.
pub fn train_structnet(
    params: &mut StructNetParams,
    batch: &ToyBatch,
    labels: &DMatrix<i32>,
    cfg: &ToyConfig,
    train: Trainable,
    rng: &mut SimRng,
) -> Result<()> {
    let mut opt_clf = Optimizer::new(OptimizerKind::adam(), cfg.lr_clf);
    let mut opt_pe = Optimizer::new(OptimizerKind::adam(), cfg.lr_pe);
    let n = labels.ncols();
    for epoch in 0..cfg.epochs {
        let clf_turn = epoch % 2 == 0;
        let order = minibatches(n, cfg.batch, rng);
        if (clf_turn && !train.clf) || (!clf_turn && !train.pe) {
            continue;
        }
        for cols in order {
            let y = batch.y.select_columns(&cols);
            let l = labels.select_columns(&cols);
            let w = DMatrix::from_element(TOY_DIMS, cols.len(), 1.0);
            let g = loss_and_grad(params, &y, &l, &w)?;
            if clf_turn {
                opt_clf.step(&mut params.clf, &g.clf);
            } else {
                opt_pe.step(&mut params.pe, &g.pe);
            }
        }
    }
    if !params.clf.is_finite() || !params.pe.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("toy structnet", "non-finite parameters"));
    }
    Ok(())
}

/// Fraction of PAM decisions that differ from the labels.
pub fn structnet_ser(params: &StructNetParams, test: &ToyBatch) -> Result<f64> {
    let post = posteriors(params, &test.y, TOY_K)?;
    let wrong = post
        .iter()
        .enumerate()
        .filter(|(i, p)| p.argmax != test.labels[(i % TOY_DIMS, i / TOY_DIMS)])
        .count();
    Ok(wrong as f64 / post.len() as f64)
}

/// Plain classifier with one four-way softmax head per real dimension on a
/// shared tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FourClassMlp {
    pub mlp: Mlp,
}

impl FourClassMlp {
    pub fn new(hidden: usize, rng: &mut SimRng) -> Self {
        Self {
            mlp: Mlp::random(TOY_DIMS, hidden, 4 * TOY_DIMS, rng),
        }
    }

    /// Mean cross-entropy and its gradient w.r.t. the logits.
    fn loss(logits: &DMatrix<f64>, labels: &DMatrix<i32>) -> (f64, DMatrix<f64>) {
        let cols = logits.ncols();
        let norm = 1.0 / (cols * TOY_DIMS) as f64;
        let mut grad = DMatrix::zeros(logits.nrows(), cols);
        let mut loss = 0.0;
        for j in 0..cols {
            for n in 0..TOY_DIMS {
                let z: Vec<f64> = (0..4).map(|c| logits[(4 * n + c, j)]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let target = level_index(labels[(n, j)]);
                loss += norm * (m + s.ln() - z[target]);
                for c in 0..4 {
                    let p = (z[c] - m).exp() / s;
                    grad[(4 * n + c, j)] = norm * (p - (c == target) as u8 as f64);
                }
            }
        }
        (loss, grad)
    }

    pub fn train(&mut self, batch: &ToyBatch, labels: &DMatrix<i32>, cfg: &ToyConfig, rng: &mut SimRng) -> Result<()> {
        let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr_clf);
        for _ in 0..cfg.epochs {
            for cols in minibatches(labels.ncols(), cfg.batch, rng) {
                let x = batch.y.select_columns(&cols);
                let cache = self.mlp.forward(&x)?;
                let (loss, d) = Self::loss(&cache.logits, &labels.select_columns(&cols));
                if !loss.is_finite() {
                    return Err(Error::numerical("four-class mlp", format!("loss is {loss}")));
                }
                let (g, _) = self.mlp.backward(&x, &cache, &d);
                opt.step(&mut self.mlp, &g);
            }
        }
        Ok(())
    }

    pub fn predict(&self, y: &DMatrix<f64>) -> Result<DMatrix<i32>> {
        let logits = self.mlp.forward(y)?.logits;
        Ok(DMatrix::from_fn(TOY_DIMS, y.ncols(), |n, j| {
            let best = (0..4)
                .max_by(|&a, &b| logits[(4 * n + a, j)].partial_cmp(&logits[(4 * n + b, j)]).unwrap())
                .unwrap();
            PAM_LEVELS[best]
        }))
    }

    pub fn ser(&self, test: &ToyBatch) -> Result<f64> {
        let pred = self.predict(&test.y)?;
        let wrong = pred.iter().zip(test.labels.iter()).filter(|(a, b)| a != b).count();
        Ok(wrong as f64 / pred.len() as f64)
    }
}

fn level_index(level: i32) -> usize {
    ((level + 3) / 2) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToyMethod {
    AdnnGt,
    AdnnLmmse,
    StructNet,
    FourClassMlp,
}

impl ToyMethod {
    pub fn name(self) -> &'static str {
        match self {
            ToyMethod::AdnnGt => "ADNN-GT",
            ToyMethod::AdnnLmmse => "ADNN-LMMSE",
            ToyMethod::StructNet => "StructNet",
            ToyMethod::FourClassMlp => "FourClassMlp",
        }
    }
}

/// SERs of one channel realization under one label corruption level.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrial {
    pub ser: Vec<(ToyMethod, f64)>,
    /// Measured fraction of wrong binary labels.
    pub binary_corruption: f64,
    pub pam_corruption: f64,
}

impl ToyTrial {
    pub fn get(&self, m: ToyMethod) -> Option<f64> {
        self.ser.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }
}

/// Trains every requested method on one channel. All methods share the
/// training batch, the corrupted labels and the classifier initialization.
pub fn toy_trial(
    cfg: &ToyConfig,
    ebno_db: f64,
    corruption: f64,
    methods: &[ToyMethod],
    seed: u64,
) -> Result<ToyTrial> {
    let ch = toy_channel_sample(seed, cfg.cond_max)?;
    let nv = toy_noise_var(ebno_db);
    let mut rng = rng_from(seed, &[path::TRAIN]);
    let pilots = toy_batch(&ch.h_real, cfg.n_lmmse, nv, &mut rng);
    let train = toy_batch(&ch.h_real, cfg.n_train, nv, &mut rng);
    let test = toy_batch(&ch.h_real, cfg.n_test, nv, &mut rng_from(seed, &[path::TEST]));
    let labels = corrupt_labels(&train.labels, corruption, &mut rng_from(seed, &[path::CORRUPT]))?;
    let bin = binary_corruption(&train.labels, &labels)?;

    // lattice-unit channel prior variance of each entry is 1/(2*5)
    let prior = pam_scale().powi(2) / 2.0;
    let pe_lmmse = init_pe_lmmse(&pilots.y, &pilots.labels.map(|v| v as f64), nv / prior)?;
    let pe_true = &ch.h_real * pam_scale();
    let init = Mlp::random(TOY_DIMS, cfg.hidden, 2 * TOY_DIMS, &mut rng_from(seed, &[path::INIT]));

    let mut ser = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut shuffle = rng_from(seed, &[path::SHUFFLE]);
        let v = match m {
            ToyMethod::FourClassMlp => {
                let mut net = FourClassMlp::new(cfg.hidden, &mut rng_from(seed, &[path::INIT]));
                net.train(&train, &labels, cfg, &mut shuffle)?;
                net.ser(&test)?
            }
            _ => {
                let (pe, t) = match m {
                    ToyMethod::AdnnGt => (pe_true.clone(), Trainable::CLASSIFIER),
                    ToyMethod::AdnnLmmse => (pe_lmmse.clone(), Trainable::CLASSIFIER),
                    _ => (pe_lmmse.clone(), Trainable::ALL),
                };
                let mut p = StructNetParams::new(pe, init.clone())?;
                train_structnet(&mut p, &train, &labels, cfg, t, &mut shuffle)?;
                structnet_ser(&p, &test)?
            }
        };
        ser.push((m, v));
    }
    Ok(ToyTrial {
        ser,
        binary_corruption: bin,
        pam_corruption: corruption,
    })
}

/// Median SER per method at one operating point, plus every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRow {
    pub ebno_db: f64,
    pub corruption: f64,
    pub median_ser: Vec<(ToyMethod, f64)>,
    pub trials: Vec<ToyTrial>,
}

impl ToyRow {
    pub fn median(&self, m: ToyMethod) -> Option<f64> {
        self.median_ser.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }

    pub fn max_binary_corruption(&self) -> f64 {
        self.trials.iter().map(|t| t.binary_corruption).fold(0.0, f64::max)
    }
}

fn run_row(cfg: &ToyConfig, ebno: f64, corruption: f64, methods: &[ToyMethod], seeds: &[u64]) -> Result<ToyRow> {
    let trials = seeds
        .par_iter()
        .map(|&s| toy_trial(cfg, ebno, corruption, methods, s))
        .collect::<Result<Vec<_>>>()?;
    let median_ser = methods
        .iter()
        .map(|&m| (m, median(&trials.iter().filter_map(|t| t.get(m)).collect::<Vec<_>>())))
        .collect();
    Ok(ToyRow {
        ebno_db: ebno,
        corruption,
        median_ser,
        trials,
    })
}

/// One channel per seed, ADNN-GT / ADNN-LMMSE / StructNet at every Eb/No.
pub fn toy_experiment_a(cfg: &ToyConfig, ebno_list: &[f64], seeds: &[u64]) -> Result<Vec<ToyRow>> {
    let methods = [ToyMethod::AdnnGt, ToyMethod::AdnnLmmse, ToyMethod::StructNet];
    ebno_list.iter().map(|&e| run_row(cfg, e, 0.0, &methods, seeds)).collect()
}

pub const TOY_B_EBNO_DB: f64 = 5.0;

/// Every method at 5 dB for each PAM-label corruption fraction.
pub fn toy_experiment_b(cfg: &ToyConfig, corrupt_fractions: &[f64], seeds: &[u64]) -> Result<Vec<ToyRow>> {
    let methods = [
        ToyMethod::StructNet,
        ToyMethod::FourClassMlp,
        ToyMethod::AdnnGt,
        ToyMethod::AdnnLmmse,
    ];
    corrupt_fractions
        .iter()
        .map(|&f| run_row(cfg, TOY_B_EBNO_DB, f, &methods, seeds))
        .collect()
}

/// Seeds `base, base + 1, ...` for `n` channels.
pub fn seed_range(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Lifted channel columns, for callers that need the shift directions.
pub fn shift_directions(ch: &ToyChannel) -> Vec<DVector<f64>> {
    (0..TOY_DIMS).map(|n| ch.h_real.column(n) * pam_scale()).collect()
}
