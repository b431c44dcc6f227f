//! Transmit chain: gray-coded QAM, pilot/data resource grids, OFDM
//! modulation and the complex-to-real lifting used by the real-valued
//! frequency-domain networks.
//!
//! Constellations are kept in two coordinate systems. The *lattice* view
//! places every axis on the odd integers `{-(side-1), ..., side-1}` (the
//! PAM alphabet). The *unit* view multiplies the lattice by
//! [`Constellation::scale`] so the average symbol power is one; the unit
//! view is what goes on the air.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::seed::SimRng;

pub type C64 = Complex64;

/// Antenna x sample (or antenna x subcarrier) grid of complex samples.
pub type ComplexGrid = DMatrix<C64>;

/// Square M-QAM constellation with per-axis reflected-binary gray labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constellation {
    order: usize,
    side: usize,
    bits_per_axis: usize,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        let side = (order as f64).sqrt().round() as usize;
        if order < 4 || side * side != order || !side.is_power_of_two() {
            return Err(Error::Config(format!(
                "mod_order must be a perfect square power of two >= 4, got {order}"
            )));
        }
        Ok(Self {
            order,
            side,
            bits_per_axis: side.trailing_zeros() as usize,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of PAM levels per real axis (sqrt(M)).
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    /// K in the PAM alphabet {-2K-1, ..., 2K+1}.
    pub fn k(&self) -> i32 {
        (self.side as i32 - 2) / 2
    }

    /// Lattice-to-unit-power factor.
    pub fn scale(&self) -> f64 {
        (1.5 / (self.order as f64 - 1.0)).sqrt()
    }

    /// PAM levels in ascending order.
    pub fn pam_levels(&self) -> Vec<i32> {
        let top = self.side as i32 - 1;
        (0..self.side as i32).map(|i| -top + 2 * i).collect()
    }

    pub fn contains_level(&self, level: i32) -> bool {
        let top = self.side as i32 - 1;
        level.abs() <= top && (level - top) % 2 == 0
    }

    /// Average lattice energy per real axis, (M-1)/3.
    pub fn lattice_axis_energy(&self) -> f64 {
        (self.order as f64 - 1.0) / 3.0
    }

    fn axis_level(&self, bits: &[u8]) -> i32 {
        let code = bits.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
        let mut index = code;
        let mut shift = code >> 1;
        while shift != 0 {
            index ^= shift;
            shift >>= 1;
        }
        (self.side as i32 - 1) - 2 * index as i32
    }

    fn axis_bits(&self, level: i32, out: &mut Vec<u8>) {
        let index = ((self.side as i32 - 1 - level) / 2) as usize;
        let code = index ^ (index >> 1);
        for b in (0..self.bits_per_axis).rev() {
            out.push(((code >> b) & 1) as u8);
        }
    }

    /// Lattice point for one symbol worth of bits (I bits first).
    pub fn lattice_point(&self, bits: &[u8]) -> (i32, i32) {
        let (i_bits, q_bits) = bits.split_at(self.bits_per_axis);
        (self.axis_level(i_bits), self.axis_level(q_bits))
    }

    pub fn point(&self, bits: &[u8]) -> C64 {
        let (i, q) = self.lattice_point(bits);
        C64::new(i as f64, q as f64) * self.scale()
    }

    /// Nearest PAM level to a real lattice-coordinate value.
    pub fn slice_level(&self, v: f64) -> i32 {
        let top = self.side as i32 - 1;
        let idx = ((v + top as f64) / 2.0).round().clamp(0.0, top as f64);
        -top + 2 * idx as i32
    }

    /// Nearest constellation point (unit power in, unit power out).
    pub fn nearest(&self, sym: C64) -> C64 {
        let s = self.scale();
        C64::new(
            self.slice_level(sym.re / s) as f64,
            self.slice_level(sym.im / s) as f64,
        ) * s
    }

    pub fn lattice_of(&self, sym: C64) -> (i32, i32) {
        let s = self.scale();
        (self.slice_level(sym.re / s), self.slice_level(sym.im / s))
    }

    pub fn bits_of_lattice(&self, re: i32, im: i32, out: &mut Vec<u8>) {
        self.axis_bits(re, out);
        self.axis_bits(im, out);
    }

    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> C64 {
        let levels = self.pam_levels();
        let i = levels[rng.random_range(0..self.side)];
        let q = levels[rng.random_range(0..self.side)];
        C64::new(i as f64, q as f64) * self.scale()
    }
}

pub fn map_bits_to_qam(bits: &[u8], order: usize) -> Result<Vec<C64>> {
    let c = Constellation::new(order)?;
    let bps = c.bits_per_symbol();
    if bits.len() % bps != 0 {
        return Err(Error::shape(format!(
            "{} bits is not a multiple of {bps}",
            bits.len()
        )));
    }
    Ok(bits.chunks(bps).map(|chunk| c.point(chunk)).collect())
}

/// Hard-decision demapping (nearest point, then gray labels).
pub fn demap_qam_to_bits(symbols: &[C64], order: usize) -> Result<Vec<u8>> {
    let c = Constellation::new(order)?;
    let mut out = Vec::with_capacity(symbols.len() * c.bits_per_symbol());
    for &s in symbols {
        let (i, q) = c.lattice_of(s);
        c.bits_of_lattice(i, q, &mut out);
    }
    Ok(out)
}

/// Stacks real parts over imaginary parts.
pub fn complex_to_real(v: &[C64]) -> Vec<f64> {
    v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect()
}

pub fn real_to_complex(v: &[f64]) -> Result<Vec<C64>> {
    if v.len() % 2 != 0 {
        return Err(Error::shape("real vector length must be even"));
    }
    let (re, im) = v.split_at(v.len() / 2);
    Ok(re.iter().zip(im).map(|(&r, &i)| C64::new(r, i)).collect())
}

/// `[[Re, -Im], [Im, Re]]` lifting of a complex matrix.
pub fn real_channel_form(h: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, c) = h.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let v = h[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// Real-valued PAM view of a block of transmitted symbols: one row per
/// real dimension (re rows over im rows), entries on the PAM lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PamView {
    pub values: DMatrix<f64>,
    pub k: i32,
}

impl PamView {
    pub fn from_symbols(grid: &ComplexGrid, constellation: &Constellation) -> Self {
        let (rows, cols) = grid.shape();
        let values = DMatrix::from_fn(2 * rows, cols, |i, j| {
            let (re, im) = constellation.lattice_of(grid[(i % rows, j)]);
            if i < rows {
                re as f64
            } else {
                im as f64
            }
        });
        Self {
            values,
            k: constellation.k(),
        }
    }

    pub fn is_valid(&self) -> bool {
        let top = 2 * self.k + 1;
        self.values
            .iter()
            .all(|&v| v.fract() == 0.0 && (v as i32).abs() <= top && (v as i32 - top) % 2 == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotPattern {
    /// The first `n_pilot` OFDM symbols carry pilots on every subcarrier.
    BlockLeading,
    /// 14-symbol slot: full pilot symbols 2 and 11, plus a tracking row on
    /// symbol 7 occupying two of every three subcarriers.
    Scattered5GLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotMode {
    /// Every antenna sends an independent random pilot on every pilot RE.
    RandomFull,
    /// Each pilot RE is owned by a single antenna; the others stay silent.
    OrthogonalEmpty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubframeSpec {
    pub n_t: usize,
    pub n_r: usize,
    pub n_sc: usize,
    pub n_cp: usize,
    pub n_total: usize,
    pub n_pilot: usize,
    pub mod_order: usize,
    pub pilot_pattern: PilotPattern,
    pub pilot_mode: PilotMode,
}

impl Default for SubframeSpec {
    fn default() -> Self {
        Self {
            n_t: 4,
            n_r: 4,
            n_sc: 512,
            n_cp: 32,
            n_total: 20,
            n_pilot: 4,
            mod_order: 16,
            pilot_pattern: PilotPattern::BlockLeading,
            pilot_mode: PilotMode::RandomFull,
        }
    }
}

pub const SCATTERED_SLOT_LEN: usize = 14;
const SCATTERED_FULL: [usize; 2] = [2, 11];
const SCATTERED_TRACKING: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolKind {
    FullPilot,
    PartialPilot,
    Data,
}

impl SubframeSpec {
    pub fn validate(&self) -> Result<()> {
        Constellation::new(self.mod_order)?;
        if self.n_t == 0 || self.n_r == 0 || self.n_sc == 0 {
            return Err(Error::Config("antenna and subcarrier counts must be positive".into()));
        }
        if self.n_pilot >= self.n_total {
            return Err(Error::Config(format!(
                "n_pilot ({}) must be smaller than n_total ({})",
                self.n_pilot, self.n_total
            )));
        }
        match self.pilot_pattern {
            PilotPattern::BlockLeading if self.n_pilot == 0 => {
                Err(Error::Config("block pilots need n_pilot >= 1".into()))
            }
            PilotPattern::Scattered5GLike if self.n_total != SCATTERED_SLOT_LEN => Err(
                Error::Config(format!("scattered pilots need n_total = {SCATTERED_SLOT_LEN}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn constellation(&self) -> Constellation {
        Constellation::new(self.mod_order).expect("validated modulation order")
    }

    pub fn symbol_len(&self) -> usize {
        self.n_sc + self.n_cp
    }

    pub fn n_samples(&self) -> usize {
        self.n_total * self.symbol_len()
    }

    pub fn symbol_kind(&self, symbol: usize) -> SymbolKind {
        match self.pilot_pattern {
            PilotPattern::BlockLeading if symbol < self.n_pilot => SymbolKind::FullPilot,
            PilotPattern::BlockLeading => SymbolKind::Data,
            PilotPattern::Scattered5GLike if SCATTERED_FULL.contains(&symbol) => {
                SymbolKind::FullPilot
            }
            PilotPattern::Scattered5GLike if symbol == SCATTERED_TRACKING => {
                SymbolKind::PartialPilot
            }
            PilotPattern::Scattered5GLike => SymbolKind::Data,
        }
    }

    pub fn is_pilot(&self, symbol: usize, sc: usize) -> bool {
        match self.symbol_kind(symbol) {
            SymbolKind::FullPilot => true,
            SymbolKind::PartialPilot => sc % 3 != 2,
            SymbolKind::Data => false,
        }
    }

    /// Antenna that owns a pilot RE under [`PilotMode::OrthogonalEmpty`].
    pub fn pilot_owner(&self, symbol: usize, sc: usize) -> usize {
        (sc + symbol) % self.n_t
    }

    /// Symbols that are pilots on every subcarrier, in time order.
    pub fn full_pilot_symbols(&self) -> Vec<usize> {
        (0..self.n_total)
            .filter(|&n| self.symbol_kind(n) == SymbolKind::FullPilot)
            .collect()
    }

    /// Symbols that carry at least one data RE, in time order.
    pub fn data_symbols(&self) -> Vec<usize> {
        (0..self.n_total)
            .filter(|&n| self.symbol_kind(n) != SymbolKind::FullPilot)
            .collect()
    }

    pub fn pilot_symbols(&self) -> Vec<usize> {
        (0..self.n_total)
            .filter(|&n| self.symbol_kind(n) != SymbolKind::Data)
            .collect()
    }

    /// Number of (symbol, subcarrier) positions carrying data.
    pub fn data_positions(&self) -> usize {
        (0..self.n_total)
            .map(|n| (0..self.n_sc).filter(|&k| !self.is_pilot(n, k)).count())
            .sum()
    }

    pub fn data_bits_len(&self) -> usize {
        self.data_positions() * self.n_t * self.constellation().bits_per_symbol()
    }

    /// Fraction of (symbol, subcarrier) positions reserved for pilots.
    pub fn pilot_overhead(&self) -> f64 {
        1.0 - self.data_positions() as f64 / (self.n_total * self.n_sc) as f64
    }
}

/// Ground-truth pilots kept at the receiver for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotRecord {
    /// Per OFDM symbol, `n_t x n_sc`; zero outside pilot REs.
    pub symbols: Vec<ComplexGrid>,
}

impl PilotRecord {
    pub fn value(&self, symbol: usize, tx: usize, sc: usize) -> C64 {
        self.symbols[symbol][(tx, sc)]
    }
}

/// One assembled subframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Subframe {
    pub spec: SubframeSpec,
    /// Per OFDM symbol, `n_t x n_sc` frequency-domain grid.
    pub freq: Vec<ComplexGrid>,
    pub pilots: PilotRecord,
    pub bits: Vec<u8>,
}

impl Subframe {
    /// Data symbols in bit-record order: symbol, subcarrier, antenna.
    pub fn data_symbols(&self) -> Vec<C64> {
        let spec = &self.spec;
        let mut out = Vec::new();
        for n in 0..spec.n_total {
            for k in 0..spec.n_sc {
                if !spec.is_pilot(n, k) {
                    out.extend((0..spec.n_t).map(|t| self.freq[n][(t, k)]));
                }
            }
        }
        out
    }

    pub fn time_domain(&self, modem: &OfdmModem) -> ComplexGrid {
        let spec = &self.spec;
        let len = spec.symbol_len();
        let mut out = ComplexGrid::zeros(spec.n_t, spec.n_samples());
        for (n, sym) in self.freq.iter().enumerate() {
            let t = modem.modulate(sym);
            out.columns_mut(n * len, len).copy_from(&t);
        }
        out
    }
}

pub fn assemble_subframe(spec: &SubframeSpec, data_bits: &[u8], rng: &mut SimRng) -> Result<Subframe> {
    spec.validate()?;
    let c = spec.constellation();
    let expected = spec.data_bits_len();
    if data_bits.len() != expected {
        return Err(Error::shape(format!(
            "expected {expected} data bits, got {}",
            data_bits.len()
        )));
    }
    let bps = c.bits_per_symbol();
    let mut chunks = data_bits.chunks(bps);
    let mut freq = Vec::with_capacity(spec.n_total);
    let mut pilot_syms = Vec::with_capacity(spec.n_total);
    for n in 0..spec.n_total {
        let mut grid = ComplexGrid::zeros(spec.n_t, spec.n_sc);
        let mut pilots = ComplexGrid::zeros(spec.n_t, spec.n_sc);
        for k in 0..spec.n_sc {
            if spec.is_pilot(n, k) {
                for t in 0..spec.n_t {
                    let v = match spec.pilot_mode {
                        PilotMode::RandomFull => c.random_point(rng),
                        PilotMode::OrthogonalEmpty if spec.pilot_owner(n, k) == t => {
                            c.random_point(rng)
                        }
                        PilotMode::OrthogonalEmpty => C64::new(0.0, 0.0),
                    };
                    grid[(t, k)] = v;
                    pilots[(t, k)] = v;
                }
            } else {
                for t in 0..spec.n_t {
                    grid[(t, k)] = c.point(chunks.next().expect("bit count checked"));
                }
            }
        }
        freq.push(grid);
        pilot_syms.push(pilots);
    }
    Ok(Subframe {
        spec: spec.clone(),
        freq,
        pilots: PilotRecord { symbols: pilot_syms },
        bits: data_bits.to_vec(),
    })
}

pub fn random_bits(n: usize, rng: &mut SimRng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// Unitary OFDM modulator/demodulator with cached FFT plans.
#[derive(Clone)]
pub struct OfdmModem {
    n_sc: usize,
    n_cp: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for OfdmModem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfdmModem")
            .field("n_sc", &self.n_sc)
            .field("n_cp", &self.n_cp)
            .finish()
    }
}

impl OfdmModem {
    pub fn new(n_sc: usize, n_cp: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_sc,
            n_cp,
            fft: planner.plan_fft_forward(n_sc),
            ifft: planner.plan_fft_inverse(n_sc),
        }
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn n_cp(&self) -> usize {
        self.n_cp
    }

    /// Unitary DFT of one row.
    pub fn dft(&self, v: &mut [C64]) {
        self.fft.process(v);
        let norm = 1.0 / (self.n_sc as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= norm);
    }

    pub fn idft(&self, v: &mut [C64]) {
        self.ifft.process(v);
        let norm = 1.0 / (self.n_sc as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= norm);
    }

    /// `rows x n_sc` frequency grid to `rows x (n_cp + n_sc)` time grid.
    pub fn modulate(&self, freq: &ComplexGrid) -> ComplexGrid {
        assert_eq!(freq.ncols(), self.n_sc, "frequency grid must have n_sc columns");
        let mut out = ComplexGrid::zeros(freq.nrows(), self.n_sc + self.n_cp);
        let mut buf = vec![C64::new(0.0, 0.0); self.n_sc];
        for r in 0..freq.nrows() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = freq[(r, k)];
            }
            self.idft(&mut buf);
            for j in 0..self.n_cp {
                out[(r, j)] = buf[self.n_sc - self.n_cp + j];
            }
            for (j, &b) in buf.iter().enumerate() {
                out[(r, self.n_cp + j)] = b;
            }
        }
        out
    }

    /// Drops the cyclic prefix and applies the unitary DFT.
    pub fn demodulate(&self, time: &ComplexGrid) -> ComplexGrid {
        assert_eq!(
            time.ncols(),
            self.n_sc + self.n_cp,
            "time grid must have n_sc + n_cp columns"
        );
        let mut out = ComplexGrid::zeros(time.nrows(), self.n_sc);
        let mut buf = vec![C64::new(0.0, 0.0); self.n_sc];
        for r in 0..time.nrows() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = time[(r, self.n_cp + k)];
            }
            self.dft(&mut buf);
            for (k, &b) in buf.iter().enumerate() {
                out[(r, k)] = b;
            }
        }
        out
    }

    /// Splits a concatenated time stream into per-symbol frequency grids.
    pub fn demodulate_stream(&self, stream: &ComplexGrid, n_symbols: usize) -> Vec<ComplexGrid> {
        let len = self.n_sc + self.n_cp;
        (0..n_symbols)
            .map(|n| self.demodulate(&stream.columns(n * len, len).into_owned()))
            .collect()
    }
}

pub fn ofdm_modulate(freq_symbol: &ComplexGrid, n_cp: usize) -> ComplexGrid {
    OfdmModem::new(freq_symbol.ncols(), n_cp).modulate(freq_symbol)
}

pub fn ofdm_demodulate(time_symbol: &ComplexGrid, n_cp: usize) -> ComplexGrid {
    OfdmModem::new(time_symbol.ncols() - n_cp, n_cp).demodulate(time_symbol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;
    use std::f64::consts::PI;

    fn rand_c(rng: &mut SimRng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    #[test]
    fn qpsk_zero_bits_map_to_first_quadrant() {
        let s = map_bits_to_qam(&[0, 0], 4).unwrap();
        let v = 1.0 / 2f64.sqrt();
        assert!((s[0] - C64::new(v, v)).norm() < 1e-15);
    }

    #[test]
    fn gray_adjacency_is_exhaustive() {
        for m in [4, 16, 64] {
            let c = Constellation::new(m).unwrap();
            let bps = c.bits_per_symbol();
            let points: Vec<(Vec<u8>, (i32, i32))> = (0..m)
                .map(|w| {
                    let bits: Vec<u8> = (0..bps).rev().map(|b| ((w >> b) & 1) as u8).collect();
                    let p = c.lattice_point(&bits);
                    (bits, p)
                })
                .collect();
            let mut pairs = 0;
            for (ba, pa) in &points {
                for (bb, pb) in &points {
                    let d = (pa.0 - pb.0).abs() + (pa.1 - pb.1).abs();
                    if d == 2 {
                        pairs += 1;
                        let diff = ba.iter().zip(bb).filter(|(x, y)| x != y).count();
                        assert_eq!(diff, 1, "M={m}: {pa:?} vs {pb:?}");
                    }
                }
            }
            // 2 * side * (side - 1) undirected edges, counted twice
            let side = c.side();
            assert_eq!(pairs, 4 * side * (side - 1));
        }
    }

    #[test]
    fn unit_average_power() {
        for m in [4, 16, 64] {
            let c = Constellation::new(m).unwrap();
            let bps = c.bits_per_symbol();
            let p: f64 = (0..m)
                .map(|w| {
                    let bits: Vec<u8> = (0..bps).rev().map(|b| ((w >> b) & 1) as u8).collect();
                    c.point(&bits).norm_sqr()
                })
                .sum::<f64>()
                / m as f64;
            assert!((p - 1.0).abs() < 1e-12, "M={m}: {p}");
        }
    }

    #[test]
    fn rejects_bad_orders_and_lengths() {
        assert!(Constellation::new(15).is_err());
        assert!(Constellation::new(8).is_err());
        assert!(Constellation::new(2).is_err());
        assert!(matches!(
            map_bits_to_qam(&[0, 1, 1], 4),
            Err(Error::InputShape(_))
        ));
    }

    #[test]
    fn complex_to_real_layout() {
        assert_eq!(complex_to_real(&[C64::new(1.0, 2.0)]), vec![1.0, 2.0]);
        assert_eq!(
            complex_to_real(&[C64::new(0.0, 1.0), C64::new(0.0, -1.0)]),
            vec![0.0, 0.0, 1.0, -1.0]
        );
        let v = vec![C64::new(0.5, -2.0), C64::new(3.0, 1.0)];
        assert_eq!(real_to_complex(&complex_to_real(&v)).unwrap(), v);
    }

    #[test]
    fn real_channel_form_scalars() {
        let one = real_channel_form(&DMatrix::from_element(1, 1, C64::new(1.0, 0.0)));
        assert_eq!(one, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let j = real_channel_form(&DMatrix::from_element(1, 1, C64::new(0.0, 1.0)));
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
    }

    #[test]
    fn lifting_commutes_with_products() {
        let mut rng = rng_from(3, &[]);
        for _ in 0..20 {
            let h = DMatrix::from_fn(3, 2, |_, _| rand_c(&mut rng));
            let g = DMatrix::from_fn(2, 4, |_, _| rand_c(&mut rng));
            let x: Vec<C64> = (0..2).map(|_| rand_c(&mut rng)).collect();
            let hx = &h * nalgebra::DVector::from_vec(x.clone());
            let lhs = complex_to_real(hx.as_slice());
            let rhs = real_channel_form(&h) * nalgebra::DVector::from_vec(complex_to_real(&x));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            let prod = real_channel_form(&(&h * &g));
            let split = real_channel_form(&h) * real_channel_form(&g);
            assert!((prod - split).norm() < 1e-12);
        }
    }

    #[test]
    fn block_layout_and_overheads() {
        let spec = SubframeSpec::default();
        assert_eq!(spec.full_pilot_symbols(), vec![0, 1, 2, 3]);
        assert_eq!(spec.data_symbols(), (4..20).collect::<Vec<_>>());
        assert!((spec.pilot_overhead() - 0.2).abs() < 1e-12);

        let scattered = SubframeSpec {
            n_total: 14,
            pilot_pattern: PilotPattern::Scattered5GLike,
            n_pilot: 2,
            n_sc: 12 * 8,
            ..SubframeSpec::default()
        };
        scattered.validate().unwrap();
        let o = scattered.pilot_overhead();
        assert!((o - 0.19).abs() < 0.01, "overhead {o}");
        assert!((o - spec.pilot_overhead()).abs() <= 0.02);
    }

    #[test]
    fn orthogonal_pilots_leave_other_antennas_silent() {
        let spec = SubframeSpec {
            n_sc: 16,
            n_cp: 4,
            pilot_mode: PilotMode::OrthogonalEmpty,
            ..SubframeSpec::default()
        };
        let mut rng = rng_from(1, &[]);
        let bits = random_bits(spec.data_bits_len(), &mut rng);
        let sf = assemble_subframe(&spec, &bits, &mut rng).unwrap();
        for n in spec.pilot_symbols() {
            for k in 0..spec.n_sc {
                let owner = spec.pilot_owner(n, k);
                for t in 0..spec.n_t {
                    let v = sf.freq[n][(t, k)];
                    assert_eq!(v.norm() > 0.0, t == owner);
                }
            }
        }
        assert_eq!(sf.data_symbols().len() * 4, bits.len());
        let decoded = demap_qam_to_bits(&sf.data_symbols(), spec.mod_order).unwrap();
        assert_eq!(decoded, bits);
    }

    #[test]
    fn assemble_rejects_wrong_bit_count() {
        let spec = SubframeSpec {
            n_sc: 8,
            ..SubframeSpec::default()
        };
        let mut rng = rng_from(0, &[]);
        assert!(assemble_subframe(&spec, &[0, 1], &mut rng).is_err());
    }

    #[test]
    fn ofdm_basics() {
        let zero = ComplexGrid::zeros(2, 16);
        assert!(ofdm_modulate(&zero, 4).iter().all(|c| c.norm() == 0.0));

        let mut tone = ComplexGrid::zeros(1, 16);
        tone[(0, 5)] = C64::new(1.0, 0.0);
        let t = ofdm_modulate(&tone, 4);
        let m0 = t[(0, 0)].norm();
        assert!(t.iter().all(|c| (c.norm() - m0).abs() < 1e-12));
        // cyclic prefix replicates the tail
        for j in 0..4 {
            assert!((t[(0, j)] - t[(0, 16 + j)]).norm() < 1e-15);
        }
    }

    #[test]
    fn cp_shift_gives_phase_ramp() {
        let n_sc = 32;
        let n_cp = 8;
        let d = 3;
        let mut rng = rng_from(9, &[]);
        let x = ComplexGrid::from_fn(1, n_sc, |_, _| rand_c(&mut rng));
        let t = ofdm_modulate(&x, n_cp);
        // delay by d: received window starts d samples earlier in the CP
        let mut shifted = ComplexGrid::zeros(1, n_sc + n_cp);
        for j in d..n_sc + n_cp {
            shifted[(0, j)] = t[(0, j - d)];
        }
        let y = ofdm_demodulate(&shifted, n_cp);
        for k in 0..n_sc {
            let ramp = C64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / n_sc as f64);
            assert!((y[(0, k)] - x[(0, k)] * ramp).norm() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn ofdm_round_trip(seed in any::<u64>(), rows in 1usize..4, log_n in 2u32..7) {
            let n_sc = 1usize << log_n;
            let mut rng = rng_from(seed, &[]);
            let x = ComplexGrid::from_fn(rows, n_sc, |_, _| rand_c(&mut rng));
            let back = ofdm_demodulate(&ofdm_modulate(&x, n_sc / 4), n_sc / 4);
            prop_assert!((&back - &x).norm() / x.norm() < 1e-10);
        }

        #[test]
        fn qam_round_trip(seed in any::<u64>(), m_idx in 0usize..3, n_sym in 1usize..13) {
            let m = [4, 16, 64][m_idx];
            let bps = Constellation::new(m).unwrap().bits_per_symbol();
            let mut rng = rng_from(seed, &[]);
            let bits = random_bits(n_sym * bps, &mut rng);
            let syms = map_bits_to_qam(&bits, m).unwrap();
            prop_assert_eq!(demap_qam_to_bits(&syms, m).unwrap(), bits);
        }
    }
}
