//! Time/frequency self-attention over the real-valued frequency grid.
//!
//! For one transmit stream the grid `I` is `N_p x 2N_sc`: rows are OFDM
//! symbols, columns interleave real and imaginary parts per subcarrier.
//! The time block attends across rows of `I`; the frequency block attends
//! across rows of the permuted grid `Ĩ` (`N_sc x 2N_p`). Both heads are
//! concatenated, projected back to `2N_sc` features and added to `I`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{xavier, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl ParamSet for AttentionBlockParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.w_q.as_slice(), self.w_k.as_slice(), self.w_v.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_q.as_mut_slice(),
            self.w_k.as_mut_slice(),
            self.w_v.as_mut_slice(),
        ]
    }
}

impl AttentionBlockParams {
    pub fn zeros(input_dim: usize, key_dim: usize) -> Self {
        Self {
            w_q: DMatrix::zeros(input_dim, key_dim),
            w_k: DMatrix::zeros(input_dim, key_dim),
            w_v: DMatrix::zeros(input_dim, input_dim),
        }
    }

    pub fn random<R: Rng>(input_dim: usize, key_dim: usize, rng: &mut R) -> Self {
        Self {
            w_q: xavier(input_dim, key_dim, input_dim, key_dim, rng),
            w_k: xavier(input_dim, key_dim, input_dim, key_dim, rng),
            w_v: xavier(input_dim, input_dim, input_dim, input_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.ncols()
    }

    fn check(&self) -> Result<()> {
        let d = self.input_dim();
        if self.w_k.shape() != self.w_q.shape() || self.w_v.shape() != (d, d) {
            return Err(Error::shape("attention block weights are inconsistent"));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

struct HeadCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn head_forward(u: &DMatrix<f64>, p: &AttentionBlockParams) -> Result<HeadCache> {
    p.check()?;
    if u.ncols() != p.input_dim() {
        return Err(Error::shape(format!(
            "attention block expects {} features, got {}",
            p.input_dim(),
            u.ncols()
        )));
    }
    let q = u * &p.w_q;
    let k = u * &p.w_k;
    let v = u * &p.w_v;
    let scale = 1.0 / (p.key_dim().max(1) as f64).sqrt();
    let attn = softmax_rows(&((&q * k.transpose()) * scale));
    let out = &attn * &v;
    Ok(HeadCache { q, k, v, attn, out })
}

/// Returns parameter gradients and the gradient w.r.t. `u`.
fn head_backward(
    u: &DMatrix<f64>,
    p: &AttentionBlockParams,
    c: &HeadCache,
    d_out: &DMatrix<f64>,
) -> (AttentionBlockParams, DMatrix<f64>) {
    let scale = 1.0 / (p.key_dim().max(1) as f64).sqrt();
    let d_attn = d_out * c.v.transpose();
    let d_v = c.attn.transpose() * d_out;
    // softmax Jacobian applied row by row
    let mut d_s = d_attn.component_mul(&c.attn);
    for (i, mut row) in d_s.row_iter_mut().enumerate() {
        let dot = row.sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v -= c.attn[(i, j)] * dot;
        }
    }
    d_s *= scale;
    let d_q = &d_s * &c.k;
    let d_k = d_s.transpose() * &c.q;
    let ut = u.transpose();
    let grads = AttentionBlockParams {
        w_q: &ut * &d_q,
        w_k: &ut * &d_k,
        w_v: &ut * &d_v,
    };
    let d_u = d_q * p.w_q.transpose() + d_k * p.w_k.transpose() + d_v * p.w_v.transpose();
    (grads, d_u)
}

/// `softmax(Q K^T / sqrt(N_k)) V` with `Q = U W_q`, `K = U W_k`, `V = U W_v`.
pub fn attention_head(u: &DMatrix<f64>, p: &AttentionBlockParams) -> Result<DMatrix<f64>> {
    Ok(head_forward(u, p)?.out)
}

/// Attention matrix of one block, exposed for normalization checks.
pub fn attention_matrix(u: &DMatrix<f64>, p: &AttentionBlockParams) -> Result<DMatrix<f64>> {
    Ok(head_forward(u, p)?.attn)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoDMhaParams {
    pub time_block: AttentionBlockParams,
    pub freq_block: AttentionBlockParams,
    /// `4N_sc x 2N_sc` projection of the concatenated heads.
    pub w_o: DMatrix<f64>,
}

impl ParamSet for TwoDMhaParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.time_block.slices();
        s.extend(self.freq_block.slices());
        s.push(self.w_o.as_slice());
        s
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.time_block.slices_mut();
        s.extend(self.freq_block.slices_mut());
        s.push(self.w_o.as_mut_slice());
        s
    }
}

impl TwoDMhaParams {
    pub fn zeros(n_p: usize, n_sc: usize, key_time: usize, key_freq: usize) -> Self {
        Self {
            time_block: AttentionBlockParams::zeros(2 * n_sc, key_time),
            freq_block: AttentionBlockParams::zeros(2 * n_p, key_freq),
            w_o: DMatrix::zeros(4 * n_sc, 2 * n_sc),
        }
    }

    /// Random blocks and a zero projection, so the module starts as the identity.
    pub fn init<R: Rng>(n_p: usize, n_sc: usize, key_time: usize, key_freq: usize, rng: &mut R) -> Self {
        Self {
            time_block: AttentionBlockParams::random(2 * n_sc, key_time, rng),
            freq_block: AttentionBlockParams::random(2 * n_p, key_freq, rng),
            w_o: DMatrix::zeros(4 * n_sc, 2 * n_sc),
        }
    }

    pub fn random<R: Rng>(n_p: usize, n_sc: usize, key_time: usize, key_freq: usize, rng: &mut R) -> Self {
        let mut p = Self::init(n_p, n_sc, key_time, key_freq, rng);
        p.w_o = xavier(4 * n_sc, 2 * n_sc, 4 * n_sc, 2 * n_sc, rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            time_block: AttentionBlockParams::zeros(self.time_block.input_dim(), self.time_block.key_dim()),
            freq_block: AttentionBlockParams::zeros(self.freq_block.input_dim(), self.freq_block.key_dim()),
            w_o: DMatrix::zeros(self.w_o.nrows(), self.w_o.ncols()),
        }
    }

    pub fn n_sc(&self) -> usize {
        self.time_block.input_dim() / 2
    }

    pub fn n_p(&self) -> usize {
        self.freq_block.input_dim() / 2
    }
}

/// `Ĩ[sc, 2p + c] = I[p, 2sc + c]`.
pub fn permute_to_freq(i: &DMatrix<f64>) -> DMatrix<f64> {
    let n_p = i.nrows();
    let n_sc = i.ncols() / 2;
    DMatrix::from_fn(n_sc, 2 * n_p, |sc, col| i[(col / 2, 2 * sc + col % 2)])
}

/// Inverse of [`permute_to_freq`].
pub fn permute_to_time(t: &DMatrix<f64>) -> DMatrix<f64> {
    let n_sc = t.nrows();
    let n_p = t.ncols() / 2;
    DMatrix::from_fn(n_p, 2 * n_sc, |p, col| t[(col / 2, 2 * p + col % 2)])
}

pub struct MhaCache {
    time: HeadCache,
    freq: HeadCache,
    freq_in: DMatrix<f64>,
    concat: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl MhaCache {
    pub fn time_attention(&self) -> &DMatrix<f64> {
        &self.time.attn
    }

    pub fn freq_attention(&self) -> &DMatrix<f64> {
        &self.freq.attn
    }
}

fn check_grid(i: &DMatrix<f64>, p: &TwoDMhaParams) -> Result<()> {
    if i.nrows() != p.n_p() || i.ncols() != 2 * p.n_sc() || p.w_o.shape() != (4 * p.n_sc(), 2 * p.n_sc()) {
        return Err(Error::shape(format!(
            "mha configured for {}x{}, got grid {}x{}",
            p.n_p(),
            2 * p.n_sc(),
            i.nrows(),
            i.ncols()
        )));
    }
    Ok(())
}

pub fn twod_mha_forward_cached(i: &DMatrix<f64>, p: &TwoDMhaParams) -> Result<MhaCache> {
    check_grid(i, p)?;
    let time = head_forward(i, &p.time_block)?;
    let freq_in = permute_to_freq(i);
    let freq = head_forward(&freq_in, &p.freq_block)?;
    let freq_back = permute_to_time(&freq.out);
    let w = i.ncols();
    let mut concat = DMatrix::zeros(i.nrows(), 2 * w);
    concat.columns_mut(0, w).copy_from(&time.out);
    concat.columns_mut(w, w).copy_from(&freq_back);
    let output = i + &concat * &p.w_o;
    Ok(MhaCache {
        time,
        freq,
        freq_in,
        concat,
        output,
    })
}

pub fn twod_mha_forward(i: &DMatrix<f64>, p: &TwoDMhaParams) -> Result<DMatrix<f64>> {
    Ok(twod_mha_forward_cached(i, p)?.output)
}

/// Reverse-mode gradients of `<upstream, forward(I)>`.
pub fn twod_mha_backward_cached(
    i: &DMatrix<f64>,
    p: &TwoDMhaParams,
    cache: &MhaCache,
    upstream: &DMatrix<f64>,
) -> (TwoDMhaParams, DMatrix<f64>) {
    let w = i.ncols();
    let w_o = cache.concat.transpose() * upstream;
    let d_concat = upstream * p.w_o.transpose();
    let d_time = d_concat.columns(0, w).into_owned();
    let d_freq = permute_to_freq(&d_concat.columns(w, w).into_owned());
    let (g_time, du_time) = head_backward(i, &p.time_block, &cache.time, &d_time);
    let (g_freq, du_freq) = head_backward(&cache.freq_in, &p.freq_block, &cache.freq, &d_freq);
    let d_input = upstream + du_time + permute_to_time(&du_freq);
    (
        TwoDMhaParams {
            time_block: g_time,
            freq_block: g_freq,
            w_o,
        },
        d_input,
    )
}

pub fn twod_mha_backward(
    i: &DMatrix<f64>,
    p: &TwoDMhaParams,
    upstream: &DMatrix<f64>,
) -> Result<(TwoDMhaParams, DMatrix<f64>)> {
    let cache = twod_mha_forward_cached(i, p)?;
    Ok(twod_mha_backward_cached(i, p, &cache, upstream))
}
