//! Per-subframe receivers and the Monte-Carlo driver.
//!
//! RC detectors equalize in time with a reservoir, then classify in
//! frequency with per-group StructNets, optionally refined by the 2D MHA on
//! pilots and by decision feedback on data. Conventional detectors estimate
//! CSI from pilots and run LMMSE, sphere or brute-force ML detection.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::attention::{twod_mha_forward, TwoDMhaParams};
use crate::baselines::{
    estimate_pilot_anchors, interpolate_csi, lmmse_channel_estimate, lmmse_detect, ml_detect_bruteforce,
    smooth_frequency, sphere_decode, CsiEstimate, CsiSource, DdRlsTracker, RadiusPolicy,
};
use crate::channel::{
    apply_channel, doppler_from_speed, generate_channel, noise_var_from_ebno, true_freq_response, ChannelModel,
    ChannelProfile, PaConfig,
};
use crate::error::{Error, Result};
use crate::reservoir::{rls_step, train_ls, ReservoirConfig, ReservoirModel, RlsInit, RlsState};
use crate::seed::{derive_seed, rng_from, stage};
use crate::structnet::{
    finetune_df, grids_to_features, init_pe_lmmse, posteriors, pretrained_classifier, train_pilot,
    train_pilot_with_mha, GroupBatch, StructNetConfig, StructNetParams, Trainable,
};
use crate::txchain::{
    assemble_subframe, random_bits, ComplexGrid, Constellation, OfdmModem, PilotMode, PilotRecord, Subframe,
    SubframeSpec, SymbolKind, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Pilot-trained RC and classifier, PE frozen at its LS fit, no feedback.
    RcStruct,
    /// Adds time-domain RLS feedback and classifier fine-tuning.
    RcStructDf,
    /// Also learns the PE layer.
    RcStructNetDf,
    /// Also trains the 2D MHA on pilots and uses it for the first data symbol.
    RcAttStructNetDf,
    Lmmse(CsiSource),
    SphereDecoder(CsiSource),
    /// Brute-force ML with true CSI.
    MlOracle,
}

impl Variant {
    pub fn is_rc(self) -> bool {
        matches!(
            self,
            Variant::RcStruct | Variant::RcStructDf | Variant::RcStructNetDf | Variant::RcAttStructNetDf
        )
    }

    fn uses_df(self) -> bool {
        matches!(self, Variant::RcStructDf | Variant::RcStructNetDf | Variant::RcAttStructNetDf)
    }

    fn uses_mha(self) -> bool {
        self == Variant::RcAttStructNetDf
    }

    fn trainable(self) -> Trainable {
        match self {
            Variant::RcStructNetDf | Variant::RcAttStructNetDf => Trainable::ALL,
            _ => Trainable::CLASSIFIER,
        }
    }

    pub fn csi_source(self) -> Option<CsiSource> {
        match self {
            Variant::Lmmse(s) | Variant::SphereDecoder(s) => Some(s),
            Variant::MlOracle => Some(CsiSource::Oracle),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Variant::RcStruct => "RcStruct".into(),
            Variant::RcStructDf => "RcStructDf".into(),
            Variant::RcStructNetDf => "RcStructNetDf".into(),
            Variant::RcAttStructNetDf => "RcAttStructNetDf".into(),
            Variant::Lmmse(s) => format!("Lmmse{{{}}}", csi_name(s)),
            Variant::SphereDecoder(s) => format!("SphereDecoder{{{}}}", csi_name(s)),
            Variant::MlOracle => "MlOracle".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let inner = |prefix: &str| -> Option<Result<CsiSource>> {
            let rest = s.strip_prefix(prefix)?;
            let src = rest.strip_prefix('{').and_then(|r| r.strip_suffix('}'));
            Some(src.ok_or_else(|| Error::Config(format!("expected {prefix}{{source}}, got {s}"))).and_then(parse_csi))
        };
        match s {
            "RcStruct" => Ok(Variant::RcStruct),
            "RcStructDf" => Ok(Variant::RcStructDf),
            "RcStructNetDf" => Ok(Variant::RcStructNetDf),
            "RcAttStructNetDf" => Ok(Variant::RcAttStructNetDf),
            "MlOracle" => Ok(Variant::MlOracle),
            _ => {
                if let Some(r) = inner("Lmmse") {
                    return Ok(Variant::Lmmse(r?));
                }
                if let Some(r) = inner("SphereDecoder") {
                    return Ok(Variant::SphereDecoder(r?));
                }
                Err(Error::Config(format!("unknown detector {s}")))
            }
        }
    }
}

fn csi_name(s: CsiSource) -> &'static str {
    match s {
        CsiSource::PilotOnly => "PilotOnly",
        CsiSource::Interpolated => "Interpolated",
        CsiSource::DecisionDirected => "DecisionDirected",
        CsiSource::Oracle => "Oracle",
    }
}

fn parse_csi(s: &str) -> Result<CsiSource> {
    match s {
        "PilotOnly" => Ok(CsiSource::PilotOnly),
        "Interpolated" => Ok(CsiSource::Interpolated),
        "DecisionDirected" => Ok(CsiSource::DecisionDirected),
        "Oracle" => Ok(CsiSource::Oracle),
        _ => Err(Error::Config(format!("unknown CSI source {s}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub key_time: usize,
    pub key_freq: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            key_time: 216,
            key_freq: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub reservoir: ReservoirConfig,
    pub attention: AttentionConfig,
    pub structnet: StructNetConfig,
    /// Subcarriers per StructNet.
    pub group_size: usize,
    /// Forgetting factor of the decision-directed CSI tracker.
    pub dd_alpha: f64,
    /// Prior weight of the pilot CSI in the decision-directed tracker.
    pub dd_delta: f64,
    /// Half width of the frequency moving average applied to baseline CSI.
    pub csi_smoothing: usize,
    /// Overrides the variant's default pilot mode.
    pub pilot_mode: Option<PilotMode>,
    /// Seed of the offline classifier pretraining, shared by all subframes.
    pub pretrain_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::new(Variant::RcAttStructNetDf)
    }
}

impl DetectorConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            reservoir: ReservoirConfig::default(),
            attention: AttentionConfig::default(),
            structnet: StructNetConfig::default(),
            group_size: 108,
            dd_alpha: 0.9,
            dd_delta: 4.0,
            csi_smoothing: 0,
            pilot_mode: None,
            pretrain_seed: 1,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    /// RC detectors train on random pilots from every antenna; conventional
    /// estimators use orthogonal pilots.
    pub fn pilot_mode(&self) -> PilotMode {
        self.pilot_mode.unwrap_or(if self.variant.is_rc() {
            PilotMode::RandomFull
        } else {
            PilotMode::OrthogonalEmpty
        })
    }

    pub fn validate(&self, spec: &SubframeSpec) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if !(self.dd_alpha > 0.0 && self.dd_alpha <= 1.0) || !(self.dd_delta > 0.0) {
            return Err(Error::Config("dd_alpha must lie in (0, 1] and dd_delta be positive".into()));
        }
        let r = &self.reservoir;
        if !(r.rls_alpha > 0.0 && r.rls_alpha <= 1.0) {
            return Err(Error::Config("rls_alpha must lie in (0, 1]".into()));
        }
        if r.n_neurons == 0 || r.window_len == 0 {
            return Err(Error::Config("reservoir needs neurons and a window".into()));
        }
        if self.variant.is_rc() {
            if r.delay > spec.n_cp {
                return Err(Error::Config(format!(
                    "reservoir delay {} exceeds the cyclic prefix {}",
                    r.delay, spec.n_cp
                )));
            }
            if self.pilot_mode() != PilotMode::RandomFull {
                return Err(Error::Config("RC detectors need random full pilots".into()));
            }
            if spec.full_pilot_symbols().is_empty() {
                return Err(Error::Config("RC detectors need at least one full pilot symbol".into()));
            }
        }
        Ok(())
    }
}

/// Receiver-side knowledge beyond the received grid.
#[derive(Debug, Clone, Copy)]
pub struct RxContext<'a> {
    pub noise_var: f64,
    /// Seeds reservoir and attention initialization.
    pub seed: u64,
    /// True per-symbol responses, needed by oracle detectors.
    pub oracle_csi: Option<&'a [Vec<DMatrix<C64>>]>,
}

pub const CONFIDENCE_BINS: usize = 10;

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub rc_pilot: f64,
    pub rc_df: f64,
    pub freq_pilot: f64,
    pub freq_detect: f64,
    pub freq_df: f64,
    pub csi: f64,
    pub detect: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.rc_pilot + self.rc_df + self.freq_pilot + self.freq_detect + self.freq_df + self.csi + self.detect
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.rc_pilot += o.rc_pilot;
        self.rc_df += o.rc_df;
        self.freq_pilot += o.freq_pilot;
        self.freq_detect += o.freq_detect;
        self.freq_df += o.freq_df;
        self.csi += o.csi;
        self.detect += o.detect;
    }
}

/// Decisions of one subframe. Equality ignores the timings.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub detector: String,
    /// Data bits in transmit order: symbol, subcarrier, antenna.
    pub detected_bits: Vec<u8>,
    pub detected_symbols: Vec<C64>,
    pub bits: usize,
    pub bit_errors: usize,
    pub symbols: usize,
    pub symbol_errors: usize,
    /// Confidence of every PAM decision, binned over `[0, 1]`.
    pub confidence_histogram: [u64; CONFIDENCE_BINS],
    /// Data symbols whose fine-tuning had no sample above the threshold.
    pub df_idle_symbols: usize,
    pub timings: StageTimings,
}

impl PartialEq for DetectionReport {
    fn eq(&self, o: &Self) -> bool {
        self.detector == o.detector
            && self.detected_bits == o.detected_bits
            && self.detected_symbols == o.detected_symbols
            && self.bits == o.bits
            && self.bit_errors == o.bit_errors
            && self.symbols == o.symbols
            && self.symbol_errors == o.symbol_errors
            && self.confidence_histogram == o.confidence_histogram
            && self.df_idle_symbols == o.df_idle_symbols
    }
}

impl DetectionReport {
    fn new(detector: String, bits: Vec<u8>, symbols: Vec<C64>) -> Self {
        Self {
            detector,
            bits: bits.len(),
            symbols: symbols.len(),
            detected_bits: bits,
            detected_symbols: symbols,
            bit_errors: 0,
            symbol_errors: 0,
            confidence_histogram: [0; CONFIDENCE_BINS],
            df_idle_symbols: 0,
            timings: StageTimings::default(),
        }
    }

    /// Counts errors against the transmitted subframe.
    pub fn score(&mut self, truth: &Subframe) -> Result<()> {
        if truth.bits.len() != self.detected_bits.len() {
            return Err(Error::shape(format!(
                "{} detected bits for {} transmitted",
                self.detected_bits.len(),
                truth.bits.len()
            )));
        }
        let bps = truth.spec.constellation().bits_per_symbol();
        self.bit_errors = truth.bits.iter().zip(&self.detected_bits).filter(|(a, b)| a != b).count();
        self.symbol_errors = truth
            .bits
            .chunks(bps)
            .zip(self.detected_bits.chunks(bps))
            .filter(|(a, b)| a != b)
            .count();
        Ok(())
    }

    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / self.bits.max(1) as f64
    }

    pub fn ser(&self) -> f64 {
        self.symbol_errors as f64 / self.symbols.max(1) as f64
    }
}

fn check_rx(rx: &ComplexGrid, pilots: &PilotRecord, spec: &SubframeSpec) -> Result<()> {
    spec.validate()?;
    if rx.nrows() != spec.n_r || rx.ncols() < spec.n_samples() {
        return Err(Error::shape(format!(
            "received grid is {}x{}, expected {}x{}",
            rx.nrows(),
            rx.ncols(),
            spec.n_r,
            spec.n_samples()
        )));
    }
    if pilots.symbols.len() != spec.n_total {
        return Err(Error::shape("pilot record does not span the subframe"));
    }
    Ok(())
}

/// Runs any configured detector on one received subframe.
pub fn detect_subframe(
    cfg: &DetectorConfig,
    rx: &ComplexGrid,
    pilots: &PilotRecord,
    spec: &SubframeSpec,
    ctx: &RxContext,
) -> Result<DetectionReport> {
    if !cfg.variant.is_rc() {
        return detect_subframe_conventional(cfg, rx, pilots, spec, ctx);
    }
    cfg.validate(spec)?;
    check_rx(rx, pilots, spec)?;
    RcReceiver::new(cfg, rx, pilots, spec, ctx)?.run()
}

/// PAM labels `n_dims x len` of a complex grid over `[start, start + len)`.
fn pam_labels(grid: &ComplexGrid, c: &Constellation, start: usize, len: usize) -> DMatrix<i32> {
    let nt = grid.nrows();
    let mut out = DMatrix::zeros(2 * nt, len);
    for j in 0..len {
        for t in 0..nt {
            let (re, im) = c.lattice_of(grid[(t, start + j)]);
            out[(t, j)] = re;
            out[(nt + t, j)] = im;
        }
    }
    out
}

/// Per-stream `1 x 2N_sc` rows `[re, im]` per subcarrier of a lattice grid.
fn stream_rows(grid: &ComplexGrid) -> Vec<DMatrix<f64>> {
    (0..grid.nrows())
        .map(|t| DMatrix::from_fn(1, 2 * grid.ncols(), |_, c| {
            let v = grid[(t, c / 2)];
            if c % 2 == 0 {
                v.re
            } else {
                v.im
            }
        }))
        .collect()
}

fn stack_rows(rows: &[&Vec<DMatrix<f64>>]) -> Vec<DMatrix<f64>> {
    let nt = rows[0].len();
    (0..nt)
        .map(|t| {
            let w = rows[0][t].ncols();
            DMatrix::from_fn(rows.len(), w, |p, c| rows[p][t][(0, c)])
        })
        .collect()
}

struct RcReceiver<'a> {
    cfg: &'a DetectorConfig,
    spec: &'a SubframeSpec,
    pilots: &'a PilotRecord,
    c: Constellation,
    modem: OfdmModem,
    model: ReservoirModel,
    /// Reservoir trajectory of the whole subframe.
    z: ComplexGrid,
    groups: Vec<(usize, usize)>,
    seed: u64,
    timings: StageTimings,
}

impl<'a> RcReceiver<'a> {
    fn new(
        cfg: &'a DetectorConfig,
        rx: &ComplexGrid,
        pilots: &'a PilotRecord,
        spec: &'a SubframeSpec,
        ctx: &RxContext,
    ) -> Result<Self> {
        let model = ReservoirModel::from_config(
            spec.n_r,
            spec.n_t,
            &cfg.reservoir,
            derive_seed(ctx.seed, &[stage::RESERVOIR]),
        )?;
        let z = model.run_states(&rx.columns(0, spec.n_samples()).into_owned())?;
        let groups = (0..spec.n_sc)
            .step_by(cfg.group_size)
            .map(|s| (s, cfg.group_size.min(spec.n_sc - s)))
            .collect();
        Ok(Self {
            cfg,
            spec,
            pilots,
            c: spec.constellation(),
            modem: OfdmModem::new(spec.n_sc, spec.n_cp),
            model,
            z,
            groups,
            seed: ctx.seed,
            timings: StageTimings::default(),
        })
    }

    /// Trajectory columns of symbol `n` whose targets lie inside the symbol,
    /// paired with the target sample offsets.
    fn training_columns(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let len = self.spec.symbol_len();
        let d = self.cfg.reservoir.delay;
        (d..len).map(move |m| (n * len + m, m - d))
    }

    /// Frequency-domain RC estimate of symbol `n` in lattice units. The
    /// readout at sample `m` estimates the transmit sample `m - delay`, so
    /// the symbol body is read from its own samples and rotated cyclically.
    fn freq_estimate(&self, n: usize) -> ComplexGrid {
        let s = self.spec;
        let start = n * s.symbol_len() + s.n_cp;
        let out = self.model.readout(&self.z.columns(start, s.n_sc).into_owned());
        let d = self.cfg.reservoir.delay;
        let inv_scale = 1.0 / self.c.scale();
        let mut grid = ComplexGrid::zeros(s.n_t, s.n_sc);
        let mut buf = vec![C64::new(0.0, 0.0); s.n_sc];
        for t in 0..s.n_t {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[(t, (j + d) % s.n_sc)];
            }
            self.modem.dft(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                grid[(t, j)] = b * inv_scale;
            }
        }
        grid
    }

    fn run(mut self) -> Result<DetectionReport> {
        let cfg = self.cfg;
        let spec = self.spec;
        let variant = cfg.variant;
        let n_t = spec.n_t;
        let k = self.c.k();
        let scale = self.c.scale();
        let full = spec.full_pilot_symbols();

        // pilot LS training of the readout
        let t0 = Instant::now();
        let cols: Vec<(usize, usize, usize)> = full
            .iter()
            .flat_map(|&n| self.training_columns(n).map(move |(col, off)| (n, col, off)))
            .collect();
        let tx_time: Vec<Option<ComplexGrid>> = (0..spec.n_total)
            .map(|n| full.contains(&n).then(|| self.modem.modulate(&self.pilots.symbols[n])))
            .collect();
        let zp = ComplexGrid::from_fn(self.z.nrows(), cols.len(), |i, j| self.z[(i, cols[j].1)]);
        let tp = ComplexGrid::from_fn(n_t, cols.len(), |t, j| {
            let (n, _, off) = cols[j];
            tx_time[n].as_ref().expect("pilot symbol")[(t, off)]
        });
        let (w, _) = train_ls(&zp, &tp, cfg.reservoir.ridge)?;
        self.model.w_out = w;
        let mut rls = if variant.uses_df() {
            Some(match cfg.reservoir.rls_init {
                RlsInit::PilotCorrelation => RlsState::from_correlation(&zp, cfg.reservoir.ridge, cfg.reservoir.rls_alpha)?,
                RlsInit::ScaledIdentity(delta) => {
                    RlsState::scaled_identity(self.model.feature_dim(), delta, cfg.reservoir.rls_alpha)
                }
            })
        } else {
            None
        };
        self.timings.rc_pilot += t0.elapsed().as_secs_f64();

        // frequency-domain pilot training
        let t0 = Instant::now();
        let pilot_rows: Vec<Vec<DMatrix<f64>>> = full.iter().map(|&n| stream_rows(&self.freq_estimate(n))).collect();
        let pilot_grids = stack_rows(&pilot_rows.iter().collect::<Vec<_>>());
        let clf = pretrained_classifier(2 * n_t, cfg.structnet.hidden, spec.mod_order, &cfg.structnet.pretrain, cfg.pretrain_seed)?;
        let mut batches = Vec::with_capacity(self.groups.len());
        let mut nets = Vec::with_capacity(self.groups.len());
        for &(start, glen) in &self.groups {
            let y = grids_to_features(&pilot_grids, start, glen);
            let mut labels = DMatrix::zeros(2 * n_t, full.len() * glen);
            for (p, &n) in full.iter().enumerate() {
                labels
                    .columns_mut(p * glen, glen)
                    .copy_from(&pam_labels(&self.pilots.symbols[n], &self.c, start, glen));
            }
            let x = labels.map(|v| v as f64);
            let pe = init_pe_lmmse(&y, &x, cfg.structnet.pe_ridge)?;
            nets.push(StructNetParams::new(pe, (*clf).clone())?);
            batches.push(GroupBatch {
                start,
                len: glen,
                labels,
            });
        }
        let train = variant.trainable();
        let mut mha = None;
        if variant.uses_mha() {
            let mut rng = rng_from(self.seed, &[stage::ATTENTION]);
            let mut p = TwoDMhaParams::init(full.len(), spec.n_sc, cfg.attention.key_time, cfg.attention.key_freq, &mut rng);
            train_pilot_with_mha(&mut nets, &mut p, &pilot_grids, &batches, &cfg.structnet, train)?;
            mha = Some(p);
        } else {
            for (net, b) in nets.iter_mut().zip(&batches) {
                let y = grids_to_features(&pilot_grids, b.start, b.len);
                train_pilot(net, &y, &b.labels, &cfg.structnet, train)?;
            }
        }
        self.timings.freq_pilot += t0.elapsed().as_secs_f64();

        // data symbols in time order
        let mut hist = [0u64; CONFIDENCE_BINS];
        let mut idle = 0;
        let data = spec.data_symbols();
        let mut symbol_labels = vec![None; spec.n_total];
        for (i, &n) in data.iter().enumerate() {
            let partial = spec.symbol_kind(n) == SymbolKind::PartialPilot;
            let est = self.freq_estimate(n);

            if let Some(rls) = rls.as_mut() {
                let t0 = Instant::now();
                let mut projected = est.map(|v| self.c.nearest(v * scale));
                if partial {
                    for sc in (0..spec.n_sc).filter(|&sc| spec.is_pilot(n, sc)) {
                        for t in 0..n_t {
                            projected[(t, sc)] = self.pilots.value(n, t, sc);
                        }
                    }
                }
                let target = self.modem.modulate(&projected);
                for (col, off) in self.training_columns(n) {
                    let zc = self.z.column(col).into_owned();
                    let tc = target.column(off).into_owned();
                    rls_step(&mut self.model.w_out, rls, &zc, &tc)?;
                }
                self.timings.rc_df += t0.elapsed().as_secs_f64();
            }

            let t0 = Instant::now();
            let raw_rows = stream_rows(&est);
            let rows = match &mha {
                Some(p) if i == 0 => {
                    // last N_p - 1 pilot rows followed by the current symbol
                    let keep = full.len() - 1;
                    let mut window: Vec<&Vec<DMatrix<f64>>> = pilot_rows[pilot_rows.len() - keep..].iter().collect();
                    window.push(&raw_rows);
                    let grids = stack_rows(&window);
                    let mut out = Vec::with_capacity(n_t);
                    for g in &grids {
                        let o = twod_mha_forward(g, p)?;
                        out.push(o.rows(o.nrows() - 1, 1).into_owned());
                    }
                    out
                }
                _ => raw_rows.clone(),
            };
            let mut labels = DMatrix::<i32>::zeros(2 * n_t, spec.n_sc);
            let mut conf = DMatrix::<f64>::zeros(2 * n_t, spec.n_sc);
            for (net, &(start, glen)) in nets.iter().zip(&self.groups) {
                let y = grids_to_features(&rows, start, glen);
                let post = posteriors(net, &y, k)?;
                for j in 0..glen {
                    for d in 0..2 * n_t {
                        let p = &post[j * 2 * n_t + d];
                        labels[(d, start + j)] = p.argmax;
                        conf[(d, start + j)] = p.confidence;
                    }
                }
            }
            for sc in 0..spec.n_sc {
                if spec.is_pilot(n, sc) {
                    let truth = pam_labels(&self.pilots.symbols[n], &self.c, sc, 1);
                    labels.column_mut(sc).copy_from(&truth.column(0));
                    conf.column_mut(sc).fill(1.0);
                } else {
                    for d in 0..2 * n_t {
                        let b = ((conf[(d, sc)] * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS - 1);
                        hist[b] += 1;
                    }
                }
            }
            self.timings.freq_detect += t0.elapsed().as_secs_f64();

            if variant.uses_df() {
                let t0 = Instant::now();
                let mut any = false;
                for (net, &(start, glen)) in nets.iter_mut().zip(&self.groups) {
                    let y = grids_to_features(&raw_rows, start, glen);
                    let out = finetune_df(
                        net,
                        &y,
                        &labels.columns(start, glen).into_owned(),
                        &conf.columns(start, glen).into_owned(),
                        &cfg.structnet,
                        train,
                    )?;
                    any |= out.active > 0;
                }
                idle += (!any) as usize;
                self.timings.freq_df += t0.elapsed().as_secs_f64();
            }
            symbol_labels[n] = Some(labels);
        }

        let mut bits = Vec::with_capacity(spec.data_bits_len());
        let mut symbols = Vec::new();
        for n in 0..spec.n_total {
            let Some(labels) = &symbol_labels[n] else { continue };
            for sc in (0..spec.n_sc).filter(|&sc| !spec.is_pilot(n, sc)) {
                for t in 0..n_t {
                    let (re, im) = (labels[(t, sc)], labels[(n_t + t, sc)]);
                    self.c.bits_of_lattice(re, im, &mut bits);
                    symbols.push(C64::new(re as f64, im as f64) * scale);
                }
            }
        }
        let mut report = DetectionReport::new(variant.name(), bits, symbols);
        report.confidence_histogram = hist;
        report.df_idle_symbols = idle;
        report.timings = self.timings;
        Ok(report)
    }
}

/// Channel estimation per the configured source followed by per-RE
/// LMMSE, sphere or brute-force detection.
pub fn detect_subframe_conventional(
    cfg: &DetectorConfig,
    rx: &ComplexGrid,
    pilots: &PilotRecord,
    spec: &SubframeSpec,
    ctx: &RxContext,
) -> Result<DetectionReport> {
    let source = cfg
        .variant
        .csi_source()
        .ok_or_else(|| Error::Config(format!("{} is not a conventional detector", cfg.variant.name())))?;
    cfg.validate(spec)?;
    check_rx(rx, pilots, spec)?;
    let c = spec.constellation();
    let modem = OfdmModem::new(spec.n_sc, spec.n_cp);
    let mut timings = StageTimings::default();
    let t0 = Instant::now();
    let rx_f = modem.demodulate_stream(&rx.columns(0, spec.n_samples()).into_owned(), spec.n_total);
    let mut csi = match source {
        CsiSource::PilotOnly | CsiSource::DecisionDirected => lmmse_channel_estimate(&rx_f, pilots, spec, ctx.noise_var)?,
        CsiSource::Interpolated => interpolate_csi(&estimate_pilot_anchors(&rx_f, pilots, spec, ctx.noise_var)?, spec.n_total),
        CsiSource::Oracle => CsiEstimate {
            h_hat: ctx
                .oracle_csi
                .ok_or_else(|| Error::Config("oracle CSI was not supplied".into()))?
                .to_vec(),
            source: CsiSource::Oracle,
        },
    };
    if source != CsiSource::Oracle {
        smooth_frequency(&mut csi, cfg.csi_smoothing);
    }
    if !csi.is_finite() {
        return Err(Error::numerical("channel estimation", "non-finite CSI"));
    }
    timings.csi += t0.elapsed().as_secs_f64();

    let mut tracker = (source == CsiSource::DecisionDirected).then(|| {
        let first = spec.data_symbols().first().copied().unwrap_or(0);
        DdRlsTracker::new(&csi.h_hat[first], cfg.dd_alpha, cfg.dd_delta)
    });
    let detect = |y: &DVector<C64>, h: &DMatrix<C64>| -> Result<Vec<C64>> {
        match cfg.variant {
            Variant::Lmmse(_) => Ok(lmmse_detect(y, h, ctx.noise_var, &c)),
            Variant::SphereDecoder(_) => Ok(sphere_decode(y, h, &c, RadiusPolicy::Infinite)?.symbols),
            _ => ml_detect_bruteforce(y, h, &c),
        }
    };
    let mut bits = Vec::with_capacity(spec.data_bits_len());
    let mut symbols = Vec::new();
    for n in spec.data_symbols() {
        let t0 = Instant::now();
        let mut decisions = ComplexGrid::zeros(spec.n_t, spec.n_sc);
        for sc in 0..spec.n_sc {
            if spec.is_pilot(n, sc) {
                for t in 0..spec.n_t {
                    decisions[(t, sc)] = pilots.value(n, t, sc);
                }
                continue;
            }
            let y = rx_f[n].column(sc).into_owned();
            let h = match &tracker {
                Some(tr) => &tr.current()[sc],
                None => csi.at(n, sc),
            };
            let x = detect(&y, h)?;
            for (t, v) in x.into_iter().enumerate() {
                decisions[(t, sc)] = v;
                let (re, im) = c.lattice_of(v);
                c.bits_of_lattice(re, im, &mut bits);
                symbols.push(v);
            }
        }
        timings.detect += t0.elapsed().as_secs_f64();
        if let Some(tr) = tracker.as_mut() {
            let t0 = Instant::now();
            for sc in 0..spec.n_sc {
                // empty orthogonal pilot REs carry no information on silent antennas
                let y = rx_f[n].column(sc).into_owned();
                tr.update(sc, &y, &decisions.column(sc).into_owned())?;
            }
            timings.csi += t0.elapsed().as_secs_f64();
        }
    }
    let mut report = DetectionReport::new(cfg.variant.name(), bits, symbols);
    report.timings = timings;
    Ok(report)
}

/// Link setup shared by every detector in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: SubframeSpec,
    pub profile: ChannelProfile,
    pub pa: PaConfig,
}

pub const DEFAULT_CARRIER_HZ: f64 = 3.5e9;
pub const DEFAULT_SPACING_HZ: f64 = 15e3;
pub const DEFAULT_SPEED_KMH: f64 = 30.0;

impl Scenario {
    /// Eight-tap (or `n_cp`-tap) exponential TDL decaying 20 dB, Jakes
    /// fading at 30 km/h and 3.5 GHz, 15 kHz spacing.
    pub fn default_tdl(spec: SubframeSpec) -> Self {
        let taps = 8.min(spec.n_cp.max(1));
        let profile = ChannelProfile::exponential(
            taps,
            20.0,
            doppler_from_speed(DEFAULT_SPEED_KMH, DEFAULT_CARRIER_HZ),
            spec.n_sc as f64 * DEFAULT_SPACING_HZ,
            ChannelModel::TdlJakes,
        );
        Self {
            spec,
            profile,
            pa: PaConfig::default(),
        }
    }
}

/// Transmits, propagates and detects subframe `index` of a run seeded by
/// `seed`. Every detector sees the same bits, channel and noise.
pub fn simulate_subframe(
    cfg: &DetectorConfig,
    scenario: &Scenario,
    ebno_db: f64,
    index: u64,
    seed: u64,
) -> Result<DetectionReport> {
    let spec = SubframeSpec {
        pilot_mode: cfg.pilot_mode(),
        ..scenario.spec.clone()
    };
    scenario.profile.validate(spec.n_cp)?;
    let sf_seed = derive_seed(seed, &[index]);
    let bits = random_bits(spec.data_bits_len(), &mut rng_from(sf_seed, &[stage::DATA]));
    let sf = assemble_subframe(&spec, &bits, &mut rng_from(sf_seed, &[stage::PILOTS]))?;
    let ch = generate_channel(&scenario.profile, &spec, derive_seed(sf_seed, &[stage::CHANNEL]))?;
    let noise_var = noise_var_from_ebno(ebno_db, spec.mod_order, &spec);
    let modem = OfdmModem::new(spec.n_sc, spec.n_cp);
    let y = apply_channel(
        &sf.time_domain(&modem),
        &ch,
        &scenario.pa,
        noise_var,
        &mut rng_from(sf_seed, &[stage::NOISE]),
    )?;
    let oracle = if cfg.variant.csi_source() == Some(CsiSource::Oracle) {
        Some(
            (0..spec.n_total)
                .map(|n| true_freq_response(&ch, n, &spec))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let ctx = RxContext {
        noise_var,
        seed: sf_seed,
        oracle_csi: oracle.as_deref(),
    };
    let mut report = detect_subframe(cfg, &y, &sf.pilots, &spec, &ctx)?;
    report.score(&sf)?;
    Ok(report)
}

/// Aggregate of one (detector, Eb/No) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub detector: String,
    pub ebno_db: f64,
    pub n_subframes: usize,
    pub bits: u64,
    pub bit_errors: u64,
    pub symbols: u64,
    pub symbol_errors: u64,
    pub excluded_subframes: usize,
    pub seconds: f64,
    pub timings: StageTimings,
    pub confidence_histogram: [u64; CONFIDENCE_BINS],
    /// Per-subframe BER in subframe order, `None` for excluded subframes.
    pub subframe_ber: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

impl CellResult {
    pub fn ber(&self) -> f64 {
        self.bit_errors as f64 / self.bits.max(1) as f64
    }

    pub fn ser(&self) -> f64 {
        self.symbol_errors as f64 / self.symbols.max(1) as f64
    }

    pub fn median_ber(&self) -> f64 {
        median(&self.subframe_ber.iter().flatten().copied().collect::<Vec<_>>())
    }

    fn from_reports(detector: String, ebno_db: f64, results: Vec<Result<DetectionReport>>, seconds: f64) -> Self {
        let mut cell = CellResult {
            detector,
            ebno_db,
            n_subframes: results.len(),
            bits: 0,
            bit_errors: 0,
            symbols: 0,
            symbol_errors: 0,
            excluded_subframes: 0,
            seconds,
            timings: StageTimings::default(),
            confidence_histogram: [0; CONFIDENCE_BINS],
            subframe_ber: Vec::with_capacity(results.len()),
            failures: Vec::new(),
        };
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(rep) => {
                    cell.bits += rep.bits as u64;
                    cell.bit_errors += rep.bit_errors as u64;
                    cell.symbols += rep.symbols as u64;
                    cell.symbol_errors += rep.symbol_errors as u64;
                    cell.timings.add(&rep.timings);
                    for (a, b) in cell.confidence_histogram.iter_mut().zip(rep.confidence_histogram) {
                        *a += b;
                    }
                    cell.subframe_ber.push(Some(rep.ber()));
                }
                Err(e) => {
                    cell.excluded_subframes += 1;
                    cell.subframe_ber.push(None);
                    cell.failures.push(format!("subframe {i}: {e}"));
                }
            }
        }
        cell
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Runs `n_subframes` independent subframes per Eb/No point.
///
/// Subframes execute on `parallelism` worker threads; counters are integer
/// sums so the result does not depend on scheduling. More than 1% failed
/// subframes in any cell fails the run.
pub fn run_montecarlo(
    cfg: &DetectorConfig,
    scenario: &Scenario,
    ebno_list: &[f64],
    n_subframes: usize,
    seed: u64,
    parallelism: usize,
    mut progress: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    if n_subframes == 0 {
        return Err(Error::Config("n_subframes must be at least 1".into()));
    }
    cfg.validate(&SubframeSpec {
        pilot_mode: cfg.pilot_mode(),
        ..scenario.spec.clone()
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut cells = Vec::with_capacity(ebno_list.len());
    for &ebno in ebno_list {
        let t0 = Instant::now();
        let results: Vec<Result<DetectionReport>> = pool.install(|| {
            (0..n_subframes as u64)
                .into_par_iter()
                .map(|i| simulate_subframe(cfg, scenario, ebno, i, seed))
                .collect()
        });
        let cell = CellResult::from_reports(cfg.variant.name(), ebno, results, t0.elapsed().as_secs_f64());
        if cell.excluded_subframes * 100 > n_subframes {
            return Err(Error::numerical(
                "montecarlo",
                format!(
                    "{} of {} subframes failed at {ebno} dB: {}",
                    cell.excluded_subframes,
                    n_subframes,
                    cell.failures.join("; ")
                ),
            ));
        }
        progress(&cell);
        cells.push(cell);
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txchain::PilotPattern;

    fn small_spec(m: usize) -> SubframeSpec {
        SubframeSpec {
            n_t: 2,
            n_r: 2,
            n_sc: 32,
            n_cp: 8,
            n_total: 8,
            n_pilot: 3,
            mod_order: m,
            pilot_pattern: PilotPattern::BlockLeading,
            pilot_mode: PilotMode::RandomFull,
        }
    }

    fn fast(variant: Variant) -> DetectorConfig {
        let mut cfg = DetectorConfig::new(variant);
        cfg.structnet.pretrain.epochs = 300;
        cfg.attention = AttentionConfig { key_time: 16, key_freq: 4 };
        cfg
    }

    fn flat_static(spec: SubframeSpec) -> Scenario {
        Scenario {
            spec,
            profile: ChannelProfile::flat_static(),
            pa: PaConfig::default(),
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::RcStruct,
            Variant::RcStructDf,
            Variant::RcStructNetDf,
            Variant::RcAttStructNetDf,
            Variant::Lmmse(CsiSource::Interpolated),
            Variant::SphereDecoder(CsiSource::DecisionDirected),
            Variant::MlOracle,
        ] {
            assert_eq!(Variant::parse(&v.name()).unwrap(), v);
        }
        assert!(Variant::parse("Lmmse{Magic}").is_err());
    }

    #[test]
    fn noiseless_flat_channel_is_error_free() {
        let sc = flat_static(small_spec(4));
        let r = simulate_subframe(&fast(Variant::RcAttStructNetDf), &sc, 200.0, 0, 3).unwrap();
        assert_eq!(r.bit_errors, 0, "{r:?}");
        assert_eq!(r.bits, sc.spec.data_bits_len());
    }

    #[test]
    fn reports_are_deterministic() {
        let sc = Scenario::default_tdl(small_spec(16));
        let cfg = fast(Variant::RcAttStructNetDf);
        let a = simulate_subframe(&cfg, &sc, 15.0, 2, 9).unwrap();
        let b = simulate_subframe(&cfg, &sc, 15.0, 2, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.bit_errors <= a.bits && a.symbol_errors <= a.symbols);
        assert_eq!(a.symbols * 4, a.bits);
    }

    #[test]
    fn pilots_never_enter_the_denominators() {
        let spec = SubframeSpec {
            n_total: 14,
            pilot_pattern: PilotPattern::Scattered5GLike,
            ..small_spec(4)
        };
        let sc = flat_static(spec.clone());
        for v in [Variant::RcStructDf, Variant::Lmmse(CsiSource::Interpolated)] {
            let r = simulate_subframe(&fast(v), &sc, 30.0, 0, 1).unwrap();
            assert_eq!(r.bits, spec.data_bits_len());
            assert_eq!(r.symbols, spec.data_positions() * spec.n_t);
        }
    }

    fn rc_link(spec: &SubframeSpec, seed: u64) -> (ComplexGrid, Subframe, f64) {
        let sc = Scenario::default_tdl(spec.clone());
        let bits = random_bits(spec.data_bits_len(), &mut rng_from(seed, &[1]));
        let sf = assemble_subframe(spec, &bits, &mut rng_from(seed, &[2])).unwrap();
        let ch = generate_channel(&sc.profile, spec, seed).unwrap();
        let nv = noise_var_from_ebno(18.0, spec.mod_order, spec);
        let modem = OfdmModem::new(spec.n_sc, spec.n_cp);
        let y = apply_channel(&sf.time_domain(&modem), &ch, &PaConfig::default(), nv, &mut rng_from(seed, &[3])).unwrap();
        (y, sf, nv)
    }

    #[test]
    fn decisions_are_causal() {
        let spec = small_spec(16);
        let (y, sf, nv) = rc_link(&spec, 21);
        for v in [Variant::RcAttStructNetDf, Variant::Lmmse(CsiSource::DecisionDirected)] {
            let cfg = fast(v);
            let spec = SubframeSpec {
                pilot_mode: cfg.pilot_mode(),
                ..spec.clone()
            };
            let (y, sf) = if v.is_rc() {
                (y.clone(), sf.clone())
            } else {
                let bits = sf.bits.clone();
                let sf = assemble_subframe(&spec, &bits, &mut rng_from(21, &[2])).unwrap();
                let sc = Scenario::default_tdl(spec.clone());
                let ch = generate_channel(&sc.profile, &spec, 21).unwrap();
                let modem = OfdmModem::new(spec.n_sc, spec.n_cp);
                let y = apply_channel(&sf.time_domain(&modem), &ch, &PaConfig::default(), nv, &mut rng_from(21, &[3])).unwrap();
                (y, sf)
            };
            let ctx = RxContext {
                noise_var: nv,
                seed: 5,
                oracle_csi: None,
            };
            let full = detect_subframe(&cfg, &y, &sf.pilots, &spec, &ctx).unwrap();
            let per_symbol = spec.n_sc * spec.n_t;
            for cut in [4, 6] {
                let tspec = SubframeSpec {
                    n_total: cut + 1,
                    ..spec.clone()
                };
                let ty = y.columns(0, tspec.n_samples()).into_owned();
                let tp = PilotRecord {
                    symbols: sf.pilots.symbols[..cut + 1].to_vec(),
                };
                let part = detect_subframe(&cfg, &ty, &tp, &tspec, &ctx).unwrap();
                let n_sym = (cut + 1 - spec.n_pilot) * per_symbol;
                assert_eq!(part.detected_symbols[..], full.detected_symbols[..n_sym], "{v:?} cut {cut}");
            }
        }
    }

    #[test]
    fn conventional_oracle_needs_truth() {
        let spec = SubframeSpec {
            pilot_mode: PilotMode::OrthogonalEmpty,
            ..small_spec(4)
        };
        let (y, sf, nv) = rc_link(&spec, 4);
        let ctx = RxContext {
            noise_var: nv,
            seed: 0,
            oracle_csi: None,
        };
        let cfg = DetectorConfig::new(Variant::Lmmse(CsiSource::Oracle));
        assert!(matches!(detect_subframe(&cfg, &y, &sf.pilots, &spec, &ctx), Err(Error::Config(_))));
    }

    #[test]
    fn rc_rejects_orthogonal_pilots_and_long_delay() {
        let spec = small_spec(4);
        let mut cfg = fast(Variant::RcStruct);
        cfg.pilot_mode = Some(PilotMode::OrthogonalEmpty);
        assert!(cfg.validate(&spec).is_err());
        let mut cfg = fast(Variant::RcStruct);
        cfg.reservoir.delay = 9;
        assert!(cfg.validate(&spec).is_err());
    }

    #[test]
    fn single_subframe_table_matches_direct_call() {
        let sc = Scenario::default_tdl(small_spec(4));
        let cfg = fast(Variant::RcStructDf);
        let cells = run_montecarlo(&cfg, &sc, &[10.0], 1, 17, 1, |_| {}).unwrap();
        let r = simulate_subframe(&cfg, &sc, 10.0, 0, 17).unwrap();
        let c = &cells[0];
        assert_eq!((c.bits, c.bit_errors), (r.bits as u64, r.bit_errors as u64));
        assert_eq!((c.symbols, c.symbol_errors), (r.symbols as u64, r.symbol_errors as u64));
        assert_eq!(c.excluded_subframes, 0);
        assert_eq!(c.ber(), r.ber());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
