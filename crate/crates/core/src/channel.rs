//! Time-varying multipath MIMO channel, Rapp power-amplifier model and
//! AWGN.
//!
//! The fading generator is a tapped delay line whose taps are independent
//! sum-of-sinusoids (Clarke) processes; every tap's autocorrelation tends to
//! `J0(2 pi f_d tau)` across realizations.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{rng_from, SimRng};
use crate::txchain::{ComplexGrid, SubframeSpec, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    /// One i.i.d. complex Gaussian draw per tap, constant over the subframe.
    BlockStaticGaussian,
    /// Rayleigh taps with a Jakes Doppler spectrum.
    TdlJakes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProfile {
    pub power_delay_profile: Vec<f64>,
    pub doppler_hz: f64,
    pub sample_rate_hz: f64,
    pub model: ChannelModel,
    pub n_sinusoids: usize,
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Maximum Doppler shift for a terminal moving at `speed_kmh`.
pub fn doppler_from_speed(speed_kmh: f64, carrier_hz: f64) -> f64 {
    speed_kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT
}

impl ChannelProfile {
    /// Exponential power-delay profile whose last tap sits `decay_db` below
    /// the first; powers sum to one.
    pub fn exponential(
        n_taps: usize,
        decay_db: f64,
        doppler_hz: f64,
        sample_rate_hz: f64,
        model: ChannelModel,
    ) -> Self {
        let raw: Vec<f64> = (0..n_taps)
            .map(|l| {
                if n_taps == 1 {
                    1.0
                } else {
                    10f64.powf(-decay_db * l as f64 / (n_taps - 1) as f64 / 10.0)
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Self {
            power_delay_profile: raw.into_iter().map(|p| p / total).collect(),
            doppler_hz,
            sample_rate_hz,
            model,
            n_sinusoids: 32,
        }
    }

    /// Single-tap block-static Rayleigh channel.
    pub fn flat_static() -> Self {
        Self::exponential(1, 0.0, 0.0, 1.0, ChannelModel::BlockStaticGaussian)
    }

    pub fn n_taps(&self) -> usize {
        self.power_delay_profile.len()
    }

    pub fn validate(&self, n_cp: usize) -> Result<()> {
        let l = self.n_taps();
        if l == 0 {
            return Err(Error::Config("channel needs at least one tap".into()));
        }
        if l > n_cp.max(1) {
            return Err(Error::Config(format!(
                "channel has {l} taps but the cyclic prefix is only {n_cp} samples"
            )));
        }
        if self.power_delay_profile.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("tap powers must be finite and nonnegative".into()));
        }
        let total: f64 = self.power_delay_profile.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("tap powers sum to {total}, expected 1")));
        }
        if self.doppler_hz < 0.0 || self.sample_rate_hz <= 0.0 {
            return Err(Error::Config("doppler must be >= 0 and sample rate > 0".into()));
        }
        if self.model == ChannelModel::TdlJakes && self.n_sinusoids == 0 {
            return Err(Error::Config("Jakes synthesis needs at least one sinusoid".into()));
        }
        Ok(())
    }
}

/// Tap gains indexed by (rx, tx, tap, sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub n_r: usize,
    pub n_t: usize,
    pub n_taps: usize,
    pub n_samples: usize,
    pub seed: u64,
    taps: Vec<C64>,
}

impl ChannelRealization {
    fn offset(&self, rx: usize, tx: usize, tap: usize) -> usize {
        ((rx * self.n_t + tx) * self.n_taps + tap) * self.n_samples
    }

    pub fn tap(&self, rx: usize, tx: usize, tap: usize, sample: usize) -> C64 {
        self.taps[self.offset(rx, tx, tap) + sample]
    }

    /// Time series of one tap.
    pub fn tap_series(&self, rx: usize, tx: usize, tap: usize) -> &[C64] {
        let o = self.offset(rx, tx, tap);
        &self.taps[o..o + self.n_samples]
    }

    /// Static channel from explicit per-(rx, tx) impulse responses.
    pub fn from_static_taps(h: &[Vec<Vec<C64>>], n_samples: usize) -> Self {
        let n_r = h.len();
        let n_t = h[0].len();
        let n_taps = h[0][0].len();
        let mut taps = Vec::with_capacity(n_r * n_t * n_taps * n_samples);
        for row in h {
            for resp in row {
                for &g in resp {
                    taps.extend(std::iter::repeat_n(g, n_samples));
                }
            }
        }
        Self {
            n_r,
            n_t,
            n_taps,
            n_samples,
            seed: 0,
            taps,
        }
    }

    pub fn is_static(&self) -> bool {
        self.taps
            .chunks(self.n_samples)
            .all(|s| s.iter().all(|&v| v == s[0]))
    }

    /// Per-subcarrier frequency response (`n_r x n_t` each) at `sample`.
    pub fn freq_response_at(&self, sample: usize, n_sc: usize) -> Vec<DMatrix<C64>> {
        (0..n_sc)
            .map(|k| {
                DMatrix::from_fn(self.n_r, self.n_t, |r, t| {
                    (0..self.n_taps)
                        .map(|l| {
                            self.tap(r, t, l, sample)
                                * C64::from_polar(1.0, -2.0 * PI * (k * l) as f64 / n_sc as f64)
                        })
                        .sum()
                })
            })
            .collect()
    }
}

fn complex_normal(rng: &mut SimRng, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// Draws a channel realization covering `n_samples` samples.
pub fn generate_taps(
    profile: &ChannelProfile,
    n_r: usize,
    n_t: usize,
    n_samples: usize,
    seed: u64,
) -> ChannelRealization {
    let n_taps = profile.n_taps();
    let mut rng = rng_from(seed, &[]);
    let mut taps = Vec::with_capacity(n_r * n_t * n_taps * n_samples);
    let norm_doppler = profile.doppler_hz / profile.sample_rate_hz;
    for _ in 0..n_r * n_t {
        for &power in &profile.power_delay_profile {
            match profile.model {
                ChannelModel::BlockStaticGaussian => {
                    let g = complex_normal(&mut rng, power);
                    taps.extend(std::iter::repeat_n(g, n_samples));
                }
                ChannelModel::TdlJakes => {
                    let n = profile.n_sinusoids;
                    let amp = (power / n as f64).sqrt();
                    let mut phasors = Vec::with_capacity(n);
                    let mut steps = Vec::with_capacity(n);
                    for _ in 0..n {
                        let aoa = rng.random_range(0.0..2.0 * PI);
                        let phase = rng.random_range(0.0..2.0 * PI);
                        phasors.push(C64::from_polar(amp, phase));
                        steps.push(C64::from_polar(1.0, 2.0 * PI * norm_doppler * aoa.cos()));
                    }
                    for m in 0..n_samples {
                        // renormalize to stop the recurrence drifting in magnitude
                        if m > 0 && m % 1024 == 0 {
                            for p in phasors.iter_mut() {
                                *p = C64::from_polar(amp, p.arg());
                            }
                        }
                        taps.push(phasors.iter().sum());
                        for (p, s) in phasors.iter_mut().zip(&steps) {
                            *p *= s;
                        }
                    }
                }
            }
        }
    }
    ChannelRealization {
        n_r,
        n_t,
        n_taps,
        n_samples,
        seed,
        taps,
    }
}

/// Channel realization sized for one subframe of `spec`.
pub fn generate_channel(
    profile: &ChannelProfile,
    spec: &SubframeSpec,
    seed: u64,
) -> Result<ChannelRealization> {
    profile.validate(spec.n_cp)?;
    Ok(generate_taps(profile, spec.n_r, spec.n_t, spec.n_samples(), seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaConfig {
    pub enabled: bool,
    pub x_sat: f64,
    pub rho: f64,
    pub ibo_db: f64,
    /// Use the outer exponent `rho / 2` instead of the conventional `1 / (2 rho)`.
    pub literal_exponent: bool,
}

impl Default for PaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            x_sat: 1.0,
            rho: 3.0,
            ibo_db: 6.5,
            literal_exponent: false,
        }
    }
}

impl PaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.x_sat <= 0.0 || self.rho <= 0.0 {
            return Err(Error::Config("PA needs x_sat > 0 and rho > 0".into()));
        }
        Ok(())
    }

    /// Amplitude gain that places a signal of `mean_power` at the configured
    /// input back-off.
    pub fn input_gain(&self, mean_power: f64) -> f64 {
        (self.x_sat * self.x_sat / (mean_power * 10f64.powf(self.ibo_db / 10.0))).sqrt()
    }
}

/// Input back-off in dB for a given mean input power.
pub fn ibo_db(x_sat: f64, mean_power: f64) -> f64 {
    10.0 * (x_sat * x_sat / mean_power).log10()
}

/// Rapp AM/AM saturation; phase is preserved.
pub fn rapp_pa(x: C64, cfg: &PaConfig) -> C64 {
    let r = x.norm();
    if r == 0.0 {
        return x;
    }
    let ratio = (r / cfg.x_sat).powf(2.0 * cfg.rho);
    let exponent = if cfg.literal_exponent {
        0.5 * cfg.rho
    } else {
        0.5 / cfg.rho
    };
    x / (1.0 + ratio).powf(exponent)
}

/// `y_r(m) = sum_t sum_l h_{r,t,l}(m) g(x_t(m-l)) + w(m)`.
///
/// With the PA enabled the transmit signal is scaled to the configured
/// back-off, amplified, and scaled back, so the nominal power is unchanged.
pub fn apply_channel(
    x_time: &ComplexGrid,
    ch: &ChannelRealization,
    pa: &PaConfig,
    noise_var: f64,
    rng: &mut SimRng,
) -> Result<ComplexGrid> {
    let (n_t, len) = x_time.shape();
    if n_t != ch.n_t {
        return Err(Error::shape(format!(
            "signal has {n_t} transmit rows, channel expects {}",
            ch.n_t
        )));
    }
    if len > ch.n_samples {
        return Err(Error::shape(format!(
            "signal of {len} samples exceeds the channel span of {}",
            ch.n_samples
        )));
    }
    let x = if pa.enabled {
        pa.validate()?;
        let mean_power = x_time.iter().map(|v| v.norm_sqr()).sum::<f64>() / (n_t * len) as f64;
        let gain = pa.input_gain(mean_power.max(f64::MIN_POSITIVE));
        x_time.map(|v| rapp_pa(v * gain, pa) / gain)
    } else {
        x_time.clone()
    };
    let mut y = ComplexGrid::zeros(ch.n_r, len);
    for r in 0..ch.n_r {
        for t in 0..n_t {
            for l in 0..ch.n_taps {
                let series = ch.tap_series(r, t, l);
                for m in l..len {
                    y[(r, m)] += series[m] * x[(t, m - l)];
                }
            }
        }
    }
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_normal(rng, noise_var);
        }
    }
    Ok(y)
}

/// Received signal power per antenna, including the cyclic-prefix overhead.
pub fn signal_power(spec: &SubframeSpec) -> f64 {
    spec.n_t as f64 * spec.symbol_len() as f64 / spec.n_sc as f64
}

/// Complex noise variance per receive sample for a target Eb/No.
pub fn noise_var_from_ebno(ebno_db: f64, mod_order: usize, spec: &SubframeSpec) -> f64 {
    let bits = (mod_order as f64).log2();
    signal_power(spec) / (bits * 10f64.powf(ebno_db / 10.0))
}

/// Per-subcarrier response at the midpoint of OFDM symbol `symbol`.
pub fn true_freq_response(
    ch: &ChannelRealization,
    symbol: usize,
    spec: &SubframeSpec,
) -> Result<Vec<DMatrix<C64>>> {
    let sample = symbol * spec.symbol_len() + spec.symbol_len() / 2;
    if sample >= ch.n_samples {
        return Err(Error::shape(format!(
            "symbol {symbol} lies outside the channel span"
        )));
    }
    Ok(ch.freq_response_at(sample, spec.n_sc))
}
