//! Classical receivers: pilot-based channel estimation, decision-directed
//! tracking, LMMSE detection, brute-force ML and sphere decoding.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_hpd;
use crate::reservoir::{rls_step, RlsState};
use crate::txchain::{real_channel_form, ComplexGrid, Constellation, PilotMode, PilotRecord, SubframeSpec, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsiSource {
    PilotOnly,
    Interpolated,
    DecisionDirected,
    Oracle,
}

/// Channel matrices (`n_r x n_t`) per OFDM symbol and subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiEstimate {
    pub h_hat: Vec<Vec<DMatrix<C64>>>,
    pub source: CsiSource,
}

impl CsiEstimate {
    pub fn at(&self, symbol: usize, sc: usize) -> &DMatrix<C64> {
        &self.h_hat[symbol][sc]
    }

    /// Mean squared entry error against `truth` over the listed symbols.
    pub fn mse(&self, truth: &[Vec<DMatrix<C64>>], symbols: &[usize]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for &n in symbols {
            for (a, b) in self.h_hat[n].iter().zip(&truth[n]) {
                acc += (a - b).norm_squared();
                count += a.len();
            }
        }
        acc / count.max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.h_hat.iter().flatten().all(|h| h.iter().all(|v| v.is_finite()))
    }
}

/// Pilot-only estimates anchored at OFDM symbol times.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotAnchors {
    pub times: Vec<f64>,
    /// Per anchor, one `n_r x n_t` matrix per subcarrier.
    pub estimates: Vec<Vec<DMatrix<C64>>>,
}

/// Pilot-based estimates. Orthogonal pilots give one anchor per pilot
/// symbol; random full pilots are stacked per subcarrier into one anchor.
pub fn estimate_pilot_anchors(
    rx: &[ComplexGrid],
    pilots: &PilotRecord,
    spec: &SubframeSpec,
    noise_var: f64,
) -> Result<PilotAnchors> {
    if rx.len() != spec.n_total || pilots.symbols.len() != spec.n_total {
        return Err(Error::shape("received grid and pilot record must span the subframe"));
    }
    match spec.pilot_mode {
        PilotMode::OrthogonalEmpty => per_symbol_anchors(rx, pilots, spec, noise_var),
        PilotMode::RandomFull => joint_anchor(rx, pilots, spec, noise_var),
    }
}

fn joint_anchor(rx: &[ComplexGrid], pilots: &PilotRecord, spec: &SubframeSpec, noise_var: f64) -> Result<PilotAnchors> {
    let psyms = spec.pilot_symbols();
    let (n_t, n_r) = (spec.n_t, spec.n_r);
    let mut per_sc = Vec::with_capacity(spec.n_sc);
    let mut time_acc = 0.0;
    let mut time_count = 0usize;
    for sc in 0..spec.n_sc {
        let cols: Vec<usize> = psyms.iter().copied().filter(|&n| spec.is_pilot(n, sc)).collect();
        let x = DMatrix::from_fn(n_t, cols.len(), |t, j| pilots.value(cols[j], t, sc));
        let y = DMatrix::from_fn(n_r, cols.len(), |r, j| rx[cols[j]][(r, sc)]);
        let mut g = &x * x.adjoint();
        let min_eig = g.clone().symmetric_eigenvalues().min();
        let trace: f64 = (0..n_t).map(|i| g[(i, i)].re).sum();
        if cols.len() < n_t || min_eig <= 1e-9 * trace.max(f64::MIN_POSITIVE) {
            return Err(Error::RankDeficient { subcarrier: sc });
        }
        for i in 0..n_t {
            g[(i, i)] += C64::new(noise_var, 0.0);
        }
        // G H^H = X Y^H
        let hh = solve_hpd(g, &(&x * y.adjoint())).ok_or(Error::RankDeficient { subcarrier: sc })?;
        per_sc.push(hh.adjoint());
        time_acc += cols.iter().sum::<usize>() as f64;
        time_count += cols.len();
    }
    Ok(PilotAnchors {
        times: vec![time_acc / time_count.max(1) as f64],
        estimates: vec![per_sc],
    })
}

/// Orthogonal pilots: each antenna is seen on its own subcarriers, and a
/// ridge fit of `n_cp` delay taps interpolates it across frequency.
fn per_symbol_anchors(rx: &[ComplexGrid], pilots: &PilotRecord, spec: &SubframeSpec, noise_var: f64) -> Result<PilotAnchors> {
    let (n_t, n_r, n_sc) = (spec.n_t, spec.n_r, spec.n_sc);
    let mut times = Vec::new();
    let mut estimates = Vec::new();
    for n in spec.pilot_symbols() {
        let mut per_sc = vec![DMatrix::<C64>::zeros(n_r, n_t); n_sc];
        for t in 0..n_t {
            let obs: Vec<usize> = (0..n_sc)
                .filter(|&sc| spec.is_pilot(n, sc) && spec.pilot_owner(n, sc) == t)
                .collect();
            if obs.is_empty() {
                return Err(Error::RankDeficient { subcarrier: 0 });
            }
            let taps = spec.n_cp.max(1).min(obs.len());
            let a = DMatrix::from_fn(obs.len(), taps, |i, l| {
                let sc = obs[i];
                pilots.value(n, t, sc) * C64::from_polar(1.0, -2.0 * PI * (sc * l) as f64 / n_sc as f64)
            });
            let b = DMatrix::from_fn(obs.len(), n_r, |i, r| rx[n][(r, obs[i])]);
            let mut g = a.adjoint() * &a;
            for i in 0..taps {
                g[(i, i)] += C64::new(noise_var.max(1e-12), 0.0);
            }
            let h_taps = solve_hpd(g, &(a.adjoint() * b)).ok_or(Error::RankDeficient { subcarrier: obs[0] })?;
            for (sc, m) in per_sc.iter_mut().enumerate() {
                for r in 0..n_r {
                    m[(r, t)] = (0..taps)
                        .map(|l| h_taps[(l, r)] * C64::from_polar(1.0, -2.0 * PI * (sc * l) as f64 / n_sc as f64))
                        .sum();
                }
            }
        }
        times.push(n as f64);
        estimates.push(per_sc);
    }
    Ok(PilotAnchors { times, estimates })
}

/// Pilot-only CSI: the anchors averaged and held over the whole subframe.
pub fn lmmse_channel_estimate(
    rx: &[ComplexGrid],
    pilots: &PilotRecord,
    spec: &SubframeSpec,
    noise_var: f64,
) -> Result<CsiEstimate> {
    let anchors = estimate_pilot_anchors(rx, pilots, spec, noise_var)?;
    let n_a = anchors.estimates.len() as f64;
    let mean: Vec<DMatrix<C64>> = (0..spec.n_sc)
        .map(|sc| anchors.estimates.iter().map(|e| &e[sc]).sum::<DMatrix<C64>>() / C64::new(n_a, 0.0))
        .collect();
    Ok(CsiEstimate {
        h_hat: vec![mean; spec.n_total],
        source: CsiSource::PilotOnly,
    })
}

/// Least-squares straight line through the anchors per entry, evaluated at
/// every symbol. One anchor gives a constant.
pub fn interpolate_csi(anchors: &PilotAnchors, n_total: usize) -> CsiEstimate {
    let n_a = anchors.times.len();
    let t_mean = anchors.times.iter().sum::<f64>() / n_a as f64;
    let var: f64 = anchors.times.iter().map(|t| (t - t_mean).powi(2)).sum();
    let n_sc = anchors.estimates[0].len();
    let mut h_hat = vec![Vec::with_capacity(n_sc); n_total];
    for sc in 0..n_sc {
        let mean = anchors.estimates.iter().map(|e| &e[sc]).sum::<DMatrix<C64>>() / C64::new(n_a as f64, 0.0);
        let slope = if var > 0.0 {
            anchors
                .times
                .iter()
                .zip(&anchors.estimates)
                .map(|(t, e)| (&e[sc] - &mean) * C64::new(t - t_mean, 0.0))
                .sum::<DMatrix<C64>>()
                / C64::new(var, 0.0)
        } else {
            DMatrix::zeros(mean.nrows(), mean.ncols())
        };
        for (n, row) in h_hat.iter_mut().enumerate() {
            row.push(&mean + &slope * C64::new(n as f64 - t_mean, 0.0));
        }
    }
    CsiEstimate {
        h_hat,
        source: CsiSource::Interpolated,
    }
}

/// Moving average over `2 * half_width + 1` adjacent subcarriers.
pub fn smooth_frequency(csi: &mut CsiEstimate, half_width: usize) {
    if half_width == 0 {
        return;
    }
    for row in csi.h_hat.iter_mut() {
        let n_sc = row.len();
        let orig = row.clone();
        for (sc, m) in row.iter_mut().enumerate() {
            let lo = sc.saturating_sub(half_width);
            let hi = (sc + half_width).min(n_sc - 1);
            *m = orig[lo..=hi].iter().sum::<DMatrix<C64>>() / C64::new((hi - lo + 1) as f64, 0.0);
        }
    }
}

/// Per-subcarrier RLS on `y = H x + w` with detected symbols as regressors.
/// All receive rows share one inverse correlation matrix.
#[derive(Debug, Clone)]
pub struct DdRlsTracker {
    h: Vec<DMatrix<C64>>,
    rls: Vec<RlsState>,
}

impl DdRlsTracker {
    pub fn new(init: &[DMatrix<C64>], alpha: f64, delta: f64) -> Self {
        let n_t = init[0].ncols();
        Self {
            h: init.to_vec(),
            rls: init.iter().map(|_| RlsState::scaled_identity(n_t, delta, alpha)).collect(),
        }
    }

    pub fn current(&self) -> &[DMatrix<C64>] {
        &self.h
    }

    pub fn update(&mut self, sc: usize, y: &DVector<C64>, x_hat: &DVector<C64>) -> Result<()> {
        rls_step(&mut self.h[sc], &mut self.rls[sc], x_hat, y)
    }
}

/// Runs the tracker over the listed data symbols using the supplied
/// decisions. The estimate stored for symbol `n` is the one available
/// before symbol `n` was observed.
pub fn dd_rls_csi(
    rx: &[ComplexGrid],
    detected: &[(usize, ComplexGrid)],
    pilot_csi: &CsiEstimate,
    alpha: f64,
    delta: f64,
) -> Result<CsiEstimate> {
    let n_total = pilot_csi.h_hat.len();
    let first = detected.first().map(|d| d.0).unwrap_or(0);
    let mut tracker = DdRlsTracker::new(&pilot_csi.h_hat[first], alpha, delta);
    let mut h_hat = pilot_csi.h_hat.clone();
    for (n, x) in detected {
        h_hat[*n] = tracker.current().to_vec();
        for sc in 0..x.ncols() {
            let y = rx[*n].column(sc).into_owned();
            tracker.update(sc, &y, &x.column(sc).into_owned())?;
        }
    }
    // symbols after the last decision keep the latest estimate
    if let Some((last, _)) = detected.last() {
        for row in h_hat.iter_mut().take(n_total).skip(last + 1) {
            *row = tracker.current().to_vec();
        }
    }
    Ok(CsiEstimate {
        h_hat,
        source: CsiSource::DecisionDirected,
    })
}

/// Linear estimate `(H^H H + noise_var I)^{-1} H^H y` before slicing.
pub fn lmmse_equalize(y: &DVector<C64>, h: &DMatrix<C64>, noise_var: f64) -> DVector<C64> {
    if noise_var > 0.0 {
        let mut g = h.adjoint() * h;
        for i in 0..g.nrows() {
            g[(i, i)] += C64::new(noise_var, 0.0);
        }
        let rhs = DMatrix::from_column_slice(h.ncols(), 1, (h.adjoint() * y).as_slice());
        if let Some(x) = solve_hpd(g, &rhs) {
            return x.column(0).into_owned();
        }
    }
    let pinv = h.clone().pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(h.ncols(), h.nrows()));
    pinv * y
}

pub fn lmmse_detect(y: &DVector<C64>, h: &DMatrix<C64>, noise_var: f64, c: &Constellation) -> Vec<C64> {
    lmmse_equalize(y, h, noise_var).iter().map(|&v| c.nearest(v)).collect()
}

pub const ML_GUARD: u128 = 1_000_000;

/// Exhaustive `argmin ||y - H x||^2` over all `M^{n_t}` candidates.
pub fn ml_detect_bruteforce(y: &DVector<C64>, h: &DMatrix<C64>, c: &Constellation) -> Result<Vec<C64>> {
    let n_t = h.ncols();
    let m = c.order();
    let size = (m as u128).checked_pow(n_t as u32).unwrap_or(u128::MAX);
    if size > ML_GUARD {
        return Err(Error::SearchSpace { size, guard: ML_GUARD });
    }
    let s = c.scale();
    let levels = c.pam_levels();
    let side = c.side();
    let points: Vec<C64> = (0..m)
        .map(|i| C64::new(levels[i % side] as f64, levels[i / side] as f64) * s)
        .collect();
    let mut idx = vec![0usize; n_t];
    let mut best = f64::INFINITY;
    let mut best_x = vec![points[0]; n_t];
    let mut x = vec![points[0]; n_t];
    loop {
        for t in 0..n_t {
            x[t] = points[idx[t]];
        }
        let mut d = 0.0;
        for r in 0..h.nrows() {
            let mut acc = y[r];
            for t in 0..n_t {
                acc -= h[(r, t)] * x[t];
            }
            d += acc.norm_sqr();
        }
        if d < best {
            best = d;
            best_x.copy_from_slice(&x);
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == n_t {
                return Ok(best_x);
            }
            idx[t] += 1;
            if idx[t] < m {
                break;
            }
            idx[t] = 0;
            t += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusPolicy {
    /// Start unbounded; the first leaf reached is the Babai point.
    Infinite,
    /// Start from a fixed squared radius, restarting unbounded if empty.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdResult {
    pub symbols: Vec<C64>,
    /// Tree nodes visited (partial candidates whose metric was evaluated).
    pub nodes: u64,
    /// True when the lifted channel was rank deficient and brute force was used.
    pub fell_back: bool,
}

/// Exact ML via depth-first search on the real-valued lifted system with
/// Schnorr–Euchner ordering and radius shrinking.
pub fn sphere_decode(y: &DVector<C64>, h: &DMatrix<C64>, c: &Constellation, policy: RadiusPolicy) -> Result<SdResult> {
    let n_t = h.ncols();
    let s = c.scale();
    let hr = real_channel_form(h) * s;
    let n = 2 * n_t;
    let yr = DVector::from_iterator(2 * y.len(), y.iter().map(|v| v.re).chain(y.iter().map(|v| v.im)));
    let qr = hr.clone().qr();
    let r = qr.r();
    let rank_ok = hr.nrows() >= n && {
        let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        (0..n).all(|i| r[(i, i)].abs() > 1e-10 * diag_max.max(f64::MIN_POSITIVE))
    };
    if !rank_ok {
        eprintln!("warning: rank-deficient channel in sphere decoder, using brute force");
        let symbols = ml_detect_bruteforce(y, h, c)?;
        return Ok(SdResult {
            symbols,
            nodes: (c.order() as u64).saturating_pow(n_t as u32),
            fell_back: true,
        });
    }
    let z = qr.q().transpose() * &yr;
    let levels: Vec<f64> = c.pam_levels().iter().map(|&l| l as f64).collect();
    let mut search = Search {
        r: &r,
        z: &z,
        levels: &levels,
        n,
        x: vec![0.0; n],
        best: None,
        radius2: f64::INFINITY,
        nodes: 0,
    };
    if let RadiusPolicy::Fixed(r2) = policy {
        search.radius2 = r2;
        search.descend(n, 0.0);
        if search.best.is_none() {
            search.radius2 = f64::INFINITY;
        }
    }
    if search.best.is_none() {
        search.descend(n, 0.0);
    }
    let nodes = search.nodes;
    let best = search.best.expect("unbounded search always reaches a leaf");
    let symbols = (0..n_t).map(|t| C64::new(best[t], best[n_t + t]) * s).collect();
    Ok(SdResult {
        symbols,
        nodes,
        fell_back: false,
    })
}

struct Search<'a> {
    r: &'a DMatrix<f64>,
    z: &'a DVector<f64>,
    levels: &'a [f64],
    n: usize,
    x: Vec<f64>,
    best: Option<Vec<f64>>,
    radius2: f64,
    nodes: u64,
}

impl Search<'_> {
    /// Fixes dimension `level - 1` given dimensions `level..n`.
    fn descend(&mut self, level: usize, partial: f64) {
        let i = level - 1;
        let mut acc = self.z[i];
        for j in level..self.n {
            acc -= self.r[(i, j)] * self.x[j];
        }
        let rii = self.r[(i, i)];
        let center = acc / rii;
        // Schnorr–Euchner: visit levels by increasing distance to the center
        let mut order: Vec<f64> = self.levels.to_vec();
        order.sort_by(|a, b| (a - center).abs().partial_cmp(&(b - center).abs()).unwrap());
        for v in order {
            let d = partial + (rii * (center - v)).powi(2);
            self.nodes += 1;
            if d >= self.radius2 {
                // later candidates are farther still
                break;
            }
            self.x[i] = v;
            if i == 0 {
                self.radius2 = d;
                self.best = Some(self.x.clone());
            } else {
                self.descend(i, d);
            }
        }
    }
}
