//! Complex-valued echo-state network used as the time-domain equalizer.
//!
//! The reservoir weights are drawn once and never trained. The readout is
//! fitted on pilots with a ridge-regularized least-squares solve and then
//! tracked across data symbols with forgetting-factor RLS.
//!
//! States do not depend on the readout, so a whole subframe trajectory can
//! be computed once and re-read with different readouts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gram, solve_hpd};
use crate::seed::rng_from;
use crate::txchain::{ComplexGrid, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirConfig {
    pub n_neurons: usize,
    pub window_len: usize,
    pub spectral_radius: f64,
    pub input_scale: f64,
    /// Ridge used for the pilot least-squares fit.
    pub ridge: f64,
    /// Output at sample `m` estimates the transmit sample `m - delay`.
    pub delay: usize,
    pub rls_alpha: f64,
    pub rls_init: RlsInit,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            n_neurons: 16,
            window_len: 32,
            spectral_radius: 0.9,
            input_scale: 0.5,
            ridge: 1e-2,
            delay: 8,
            rls_alpha: 0.9995,
            rls_init: RlsInit::PilotCorrelation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RlsInit {
    /// Continue from the pilot-phase correlation matrix.
    PilotCorrelation,
    /// Start from `delta^-1 I`.
    ScaledIdentity(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirModel {
    w_in: DMatrix<C64>,
    w_res: DMatrix<C64>,
    pub w_out: DMatrix<C64>,
    n_inputs: usize,
    window_len: usize,
    seed: u64,
}

fn uniform_c<R: Rng>(rng: &mut R, half_width: f64) -> C64 {
    C64::new(
        rng.random_range(-half_width..half_width),
        rng.random_range(-half_width..half_width),
    )
}

/// Spectral radius from the complex Schur form.
pub fn spectral_radius(m: &DMatrix<C64>) -> f64 {
    let (_, t) = m.clone().schur().unpack();
    (0..t.nrows()).map(|i| t[(i, i)].norm()).fold(0.0, f64::max)
}

pub fn init_reservoir(
    n_in: usize,
    n_out: usize,
    n_neurons: usize,
    window_len: usize,
    spectral_radius_target: f64,
    input_scale: f64,
    seed: u64,
) -> Result<ReservoirModel> {
    if n_neurons == 0 || n_in == 0 || window_len == 0 {
        return Err(Error::Config(
            "reservoir needs at least one neuron, input and window slot".into(),
        ));
    }
    let mut rng = rng_from(seed, &[]);
    let win_dim = n_in * window_len;
    let in_width = input_scale / (win_dim as f64).sqrt();
    let w_in = DMatrix::from_fn(n_neurons, win_dim, |_, _| uniform_c(&mut rng, in_width));
    let raw = DMatrix::from_fn(n_neurons, n_neurons, |_, _| uniform_c(&mut rng, 1.0));
    let rho = spectral_radius(&raw);
    let w_res = if rho > 0.0 {
        raw * C64::new(spectral_radius_target / rho, 0.0)
    } else {
        raw
    };
    Ok(ReservoirModel {
        w_in,
        w_res,
        w_out: DMatrix::zeros(n_out, n_neurons + win_dim),
        n_inputs: n_in,
        window_len,
        seed,
    })
}

fn tanh_split(v: C64) -> C64 {
    C64::new(v.re.tanh(), v.im.tanh())
}

impl ReservoirModel {
    pub fn from_config(n_in: usize, n_out: usize, cfg: &ReservoirConfig, seed: u64) -> Result<Self> {
        init_reservoir(
            n_in,
            n_out,
            cfg.n_neurons,
            cfg.window_len,
            cfg.spectral_radius,
            cfg.input_scale,
            seed,
        )
    }

    pub fn n_neurons(&self) -> usize {
        self.w_res.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w_in(&self) -> &DMatrix<C64> {
        &self.w_in
    }

    pub fn w_res(&self) -> &DMatrix<C64> {
        &self.w_res
    }

    /// Length of `z(m) = [s(m); u(m)]`.
    pub fn feature_dim(&self) -> usize {
        self.n_neurons() + self.n_inputs * self.window_len
    }

    /// Trajectory `Z`, one column `[s(m); u(m)]` per input sample, where
    /// `u(m)` stacks the current and `window_len - 1` previous inputs.
    pub fn run_states(&self, input: &ComplexGrid) -> Result<ComplexGrid> {
        if input.nrows() != self.n_inputs {
            return Err(Error::shape(format!(
                "reservoir expects {} input rows, got {}",
                self.n_inputs,
                input.nrows()
            )));
        }
        let nn = self.n_neurons();
        let len = input.ncols();
        let mut z = ComplexGrid::zeros(self.feature_dim(), len);
        let mut state = DVector::<C64>::zeros(nn);
        let mut window = DVector::<C64>::zeros(self.n_inputs * self.window_len);
        for m in 0..len {
            // shift the window down by one input and insert the newest sample
            let d = self.n_inputs;
            for i in (d..window.len()).rev() {
                window[i] = window[i - d];
            }
            for r in 0..d {
                window[r] = input[(r, m)];
            }
            let pre = &self.w_res * &state + &self.w_in * &window;
            state = pre.map(tanh_split);
            z.view_mut((0, m), (nn, 1)).copy_from(&state);
            z.view_mut((nn, m), (window.len(), 1)).copy_from(&window);
        }
        Ok(z)
    }

    /// Linear readout of a trajectory.
    pub fn readout(&self, z: &ComplexGrid) -> ComplexGrid {
        &self.w_out * z
    }
}

/// Readout of the raw input through a fresh trajectory.
pub fn rc_forward(model: &ReservoirModel, input: &ComplexGrid) -> Result<ComplexGrid> {
    Ok(model.readout(&model.run_states(input)?))
}

/// Ridge least squares `argmin ||W Z - O||_F^2 + ridge ||W||_F^2`.
///
/// Returns the weights and the training residual `||W Z - O||_F^2`.
pub fn train_ls(z: &ComplexGrid, targets: &ComplexGrid, ridge: f64) -> Result<(DMatrix<C64>, f64)> {
    if z.ncols() != targets.ncols() {
        return Err(Error::shape(format!(
            "trajectory has {} columns, targets have {}",
            z.ncols(),
            targets.ncols()
        )));
    }
    let g = gram(z, ridge);
    // G W^H = Z O^H
    let rhs = z * targets.adjoint();
    let w_h = solve_hpd(g, &rhs)
        .ok_or_else(|| Error::numerical("reservoir LS", "normal matrix is not positive definite"))?;
    let w = w_h.adjoint();
    let residual = (&w * z - targets).norm_squared();
    Ok((w, residual))
}

/// Inverse weighted correlation and forgetting factor of an RLS recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub phi_inv: DMatrix<C64>,
    pub alpha: f64,
}

impl RlsState {
    pub fn scaled_identity(dim: usize, delta: f64, alpha: f64) -> Self {
        Self {
            phi_inv: DMatrix::from_diagonal_element(dim, dim, C64::new(1.0 / delta, 0.0)),
            alpha,
        }
    }

    /// `(Z Z^H + ridge I)^{-1}`, continuing the statistics of a batch fit.
    pub fn from_correlation(z: &ComplexGrid, ridge: f64, alpha: f64) -> Result<Self> {
        let g = gram(z, ridge);
        let n = g.nrows();
        let phi_inv = solve_hpd(g, &DMatrix::identity(n, n))
            .ok_or_else(|| Error::numerical("RLS init", "pilot correlation is singular"))?;
        // exact Hermitian symmetry keeps the rank-one updates symmetric
        let phi_inv = (&phi_inv + phi_inv.adjoint()) * C64::new(0.5, 0.0);
        Ok(Self { phi_inv, alpha })
    }
}

/// One RLS update of `w_out` on the pair `(z, target)`.
pub fn rls_step(
    w_out: &mut DMatrix<C64>,
    rls: &mut RlsState,
    z: &DVector<C64>,
    target: &DVector<C64>,
) -> Result<()> {
    let pz = &rls.phi_inv * z;
    let denom = rls.alpha + z.dotc(&pz).re;
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::numerical("RLS", format!("gain denominator {denom}")));
    }
    let err = target - &*w_out * z;
    // v = Phi^-1 z / denom; W += e v^H
    let v = &pz / C64::new(denom, 0.0);
    w_out.ger(C64::new(1.0, 0.0), &err, &v.conjugate(), C64::new(1.0, 0.0));
    // Phi^-1 <- (Phi^-1 - v (Phi^-1 z)^H) / alpha, written as Hermitian
    // pairs: with alpha < 1 any skew part grows by 1/alpha per step.
    let inv_alpha = 1.0 / rls.alpha;
    let n = rls.phi_inv.nrows();
    let p = &mut rls.phi_inv;
    for j in 0..n {
        let pj = pz[j].conj();
        for i in 0..j {
            let upper = (p[(i, j)] - v[i] * pj) * inv_alpha;
            let lower = (p[(j, i)] - v[j] * pz[i].conj()) * inv_alpha;
            let cell = (upper + lower.conj()) * 0.5;
            p[(i, j)] = cell;
            p[(j, i)] = cell.conj();
        }
        p[(j, j)] = C64::new((p[(j, j)].re - (v[j] * pj).re) * inv_alpha, 0.0);
    }
    if w_out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("RLS", "non-finite output weights"));
    }
    Ok(())
}
