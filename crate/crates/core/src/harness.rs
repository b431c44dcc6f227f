//! Command-line front end: experiment configuration, CSV output and the
//! subcommands that drive the experiments.
//!
//! Config files are flat `key = value` lines grouped under `[section]`
//! headers; `#` starts a comment. Every key has a default, so an empty file
//! is a valid configuration.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::CsiSource;
use crate::channel::{doppler_from_speed, ChannelModel, ChannelProfile, PaConfig};
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::pipeline::{run_montecarlo, CellResult, DetectorConfig, Scenario, Variant};
use crate::reservoir::RlsInit;
use crate::toylab::{seed_range, toy_experiment_a, toy_experiment_b, ToyConfig, ToyMethod, ToyRow};
use crate::txchain::{Constellation, PilotMode, PilotPattern, SubframeSpec, SCATTERED_SLOT_LEN};

pub const SEED_ENV: &str = "NEURORX_SEED";
pub const DEFAULT_SEED: u64 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const CSV_HEADER: &str =
    "detector,ebno_db,n_subframes,bits,bit_errors,ber,symbols,symbol_errors,ser,excluded_subframes,seconds,median_ber,ibo_db";
pub const TOY_CSV_HEADER: &str = "method,ebno_db,corruption,n_channels,median_ser,max_binary_corruption";
pub const BENCH_CSV_HEADER: &str = "detector,stage,seconds_per_subframe";

/// Channel description in user units; the sample rate follows from the
/// subcarrier count and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub model: ChannelModel,
    pub taps: usize,
    pub decay_db: f64,
    pub speed_kmh: f64,
    pub carrier_hz: f64,
    pub spacing_hz: f64,
    pub n_sinusoids: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            model: ChannelModel::TdlJakes,
            taps: 8,
            decay_db: 20.0,
            speed_kmh: crate::pipeline::DEFAULT_SPEED_KMH,
            carrier_hz: crate::pipeline::DEFAULT_CARRIER_HZ,
            spacing_hz: crate::pipeline::DEFAULT_SPACING_HZ,
            n_sinusoids: 32,
        }
    }
}

impl ChannelConfig {
    pub fn profile(&self, spec: &SubframeSpec) -> ChannelProfile {
        let mut p = ChannelProfile::exponential(
            self.taps,
            self.decay_db,
            doppler_from_speed(self.speed_kmh, self.carrier_hz),
            spec.n_sc as f64 * self.spacing_hz,
            self.model,
        );
        p.n_sinusoids = self.n_sinusoids;
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ebno_db: Vec<f64>,
    pub n_subframes: usize,
    pub detectors: Vec<Variant>,
    /// IBO axis of `pa-sweep`, in dB.
    pub ibo_db: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ebno_db: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0],
            n_subframes: 50,
            detectors: vec![
                Variant::RcAttStructNetDf,
                Variant::Lmmse(CsiSource::Interpolated),
                Variant::SphereDecoder(CsiSource::Interpolated),
                Variant::Lmmse(CsiSource::Oracle),
            ],
            ibo_db: vec![9.0, 7.0, 5.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRunConfig {
    pub toy: ToyConfig,
    pub ebno_db: Vec<f64>,
    pub corruption: Vec<f64>,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            ebno_db: vec![3.0, 5.0, 7.0, 9.0],
            corruption: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

/// Everything a run needs besides the seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub subframe: SubframeSpec,
    pub channel: ChannelConfig,
    pub pa: PaConfig,
    pub detector: DetectorConfig,
    pub run: RunConfig,
    pub toy: ToyRunConfig,
}

impl ExperimentConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            spec: self.subframe.clone(),
            profile: self.channel.profile(&self.subframe),
            pa: self.pa.clone(),
        }
    }

    pub fn detector_for(&self, v: Variant) -> DetectorConfig {
        self.detector.with_variant(v)
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| f(s.trim())).collect()
}

fn parse_optimizer(v: &str) -> std::result::Result<OptimizerKind, String> {
    match v {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        _ => Err(format!("expected sgd or adam, got `{v}`")),
    }
}

fn optimizer_name(o: &OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

fn list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn msg(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Applies one `key = value` line. Values are checked for type and for the
/// constraints that involve a single key.
fn set_key(c: &mut ExperimentConfig, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
    let u = |what| parse_num::<usize>(v, what);
    let fl = || parse_num::<f64>(v, "a number");
    let d = &mut c.detector;
    let toy = &mut c.toy.toy;
    match (section, key) {
        ("subframe", "n_t") => c.subframe.n_t = u("an integer")?,
        ("subframe", "n_r") => c.subframe.n_r = u("an integer")?,
        ("subframe", "n_sc") => c.subframe.n_sc = u("an integer")?,
        ("subframe", "n_cp") => c.subframe.n_cp = u("an integer")?,
        ("subframe", "n_total") => c.subframe.n_total = u("an integer")?,
        ("subframe", "n_pilot") => c.subframe.n_pilot = u("an integer")?,
        ("subframe", "mod_order") => {
            let m = u("an integer")?;
            Constellation::new(m).map_err(msg)?;
            c.subframe.mod_order = m;
        }
        ("subframe", "pilot_pattern") => {
            c.subframe.pilot_pattern = match v {
                "block_leading" => PilotPattern::BlockLeading,
                "scattered" => PilotPattern::Scattered5GLike,
                _ => return Err(format!("expected block_leading or scattered, got `{v}`")),
            }
        }

        ("channel", "model") => {
            c.channel.model = match v {
                "tdl_jakes" => ChannelModel::TdlJakes,
                "block_static" => ChannelModel::BlockStaticGaussian,
                _ => return Err(format!("expected tdl_jakes or block_static, got `{v}`")),
            }
        }
        ("channel", "taps") => c.channel.taps = u("an integer")?,
        ("channel", "decay_db") => c.channel.decay_db = fl()?,
        ("channel", "speed_kmh") => c.channel.speed_kmh = fl()?,
        ("channel", "carrier_hz") => c.channel.carrier_hz = fl()?,
        ("channel", "spacing_hz") => c.channel.spacing_hz = fl()?,
        ("channel", "n_sinusoids") => c.channel.n_sinusoids = u("an integer")?,

        ("pa", "enabled") => c.pa.enabled = parse_bool(v)?,
        ("pa", "x_sat") => c.pa.x_sat = fl()?,
        ("pa", "rho") => c.pa.rho = fl()?,
        ("pa", "ibo_db") => c.pa.ibo_db = fl()?,
        ("pa", "literal_exponent") => c.pa.literal_exponent = parse_bool(v)?,

        ("detector", "group_size") => d.group_size = u("an integer")?,
        ("detector", "dd_alpha") => d.dd_alpha = fl()?,
        ("detector", "dd_delta") => d.dd_delta = fl()?,
        ("detector", "csi_smoothing") => d.csi_smoothing = u("an integer")?,
        ("detector", "pretrain_seed") => d.pretrain_seed = parse_num(v, "an unsigned integer")?,
        ("detector", "pilot_mode") => {
            d.pilot_mode = match v {
                "auto" => None,
                "random_full" => Some(PilotMode::RandomFull),
                "orthogonal_empty" => Some(PilotMode::OrthogonalEmpty),
                _ => return Err(format!("expected auto, random_full or orthogonal_empty, got `{v}`")),
            }
        }

        ("reservoir", "n_neurons") => d.reservoir.n_neurons = u("an integer")?,
        ("reservoir", "window_len") => d.reservoir.window_len = u("an integer")?,
        ("reservoir", "spectral_radius") => d.reservoir.spectral_radius = fl()?,
        ("reservoir", "input_scale") => d.reservoir.input_scale = fl()?,
        ("reservoir", "ridge") => d.reservoir.ridge = fl()?,
        ("reservoir", "delay") => d.reservoir.delay = u("an integer")?,
        ("reservoir", "rls_alpha") => d.reservoir.rls_alpha = fl()?,
        ("reservoir", "rls_init") => {
            d.reservoir.rls_init = match v {
                "pilot" => RlsInit::PilotCorrelation,
                _ => match v.strip_prefix("identity:") {
                    Some(delta) => RlsInit::ScaledIdentity(parse_num(delta, "a number after identity:")?),
                    None => return Err(format!("expected pilot or identity:<delta>, got `{v}`")),
                },
            }
        }

        ("attention", "key_time") => d.attention.key_time = u("an integer")?,
        ("attention", "key_freq") => d.attention.key_freq = u("an integer")?,

        ("structnet", "hidden") => d.structnet.hidden = u("an integer")?,
        ("structnet", "eta") => d.structnet.eta = fl()?,
        ("structnet", "lr_clf") => d.structnet.lr_clf = fl()?,
        ("structnet", "lr_pe") => d.structnet.lr_pe = fl()?,
        ("structnet", "lr_mha") => d.structnet.lr_mha = fl()?,
        ("structnet", "pilot_epochs") => d.structnet.pilot_epochs = u("an integer")?,
        ("structnet", "df_epochs") => d.structnet.df_epochs = u("an integer")?,
        ("structnet", "optimizer") => d.structnet.optimizer = parse_optimizer(v)?,
        ("structnet", "pe_ridge") => d.structnet.pe_ridge = fl()?,

        ("pretrain", "samples") => d.structnet.pretrain.samples = u("an integer")?,
        ("pretrain", "epochs") => d.structnet.pretrain.epochs = u("an integer")?,
        ("pretrain", "ebno_min_db") => d.structnet.pretrain.ebno_min_db = fl()?,
        ("pretrain", "ebno_max_db") => d.structnet.pretrain.ebno_max_db = fl()?,
        ("pretrain", "lr") => d.structnet.pretrain.lr = fl()?,
        ("pretrain", "optimizer") => d.structnet.pretrain.optimizer = parse_optimizer(v)?,

        ("run", "ebno_db") => c.run.ebno_db = parse_list(v, |s| parse_num(s, "a number"))?,
        ("run", "n_subframes") => c.run.n_subframes = u("an integer")?,
        ("run", "detectors") => {
            c.run.detectors = parse_list(v, |s| Variant::parse(s).map_err(msg))?
        }
        ("run", "ibo_db") => c.run.ibo_db = parse_list(v, |s| parse_num(s, "a number"))?,

        ("toy", "n_channels") => toy.n_channels = u("an integer")?,
        ("toy", "n_lmmse") => toy.n_lmmse = u("an integer")?,
        ("toy", "n_train") => toy.n_train = u("an integer")?,
        ("toy", "n_test") => toy.n_test = u("an integer")?,
        ("toy", "cond_max") => toy.cond_max = fl()?,
        ("toy", "hidden") => toy.hidden = u("an integer")?,
        ("toy", "epochs") => toy.epochs = u("an integer")?,
        ("toy", "batch") => toy.batch = u("an integer")?,
        ("toy", "lr_clf") => toy.lr_clf = fl()?,
        ("toy", "lr_pe") => toy.lr_pe = fl()?,
        ("toy", "ebno_db") => c.toy.ebno_db = parse_list(v, |s| parse_num(s, "a number"))?,
        ("toy", "corruption") => c.toy.corruption = parse_list(v, |s| parse_num(s, "a number"))?,
        _ => {
            return Err(if section.is_empty() {
                format!("unknown key `{key}` outside any section")
            } else {
                format!("unknown key `{key}` in section [{section}]")
            })
        }
    }
    Ok(())
}

/// Checks the constraints that span several keys. The error names the keys
/// involved so the caller can point at the line that set them.
fn cross_check(c: &ExperimentConfig) -> std::result::Result<(), (&'static [&'static str], String)> {
    c.subframe
        .validate()
        .map_err(|e| (&["subframe.mod_order", "subframe.n_pilot", "subframe.n_total", "subframe.pilot_pattern"][..], msg(e)))?;
    if c.channel.taps > c.subframe.n_cp {
        return Err((
            &["channel.taps", "subframe.n_cp"],
            format!("channel length L = {} exceeds n_cp = {}", c.channel.taps, c.subframe.n_cp),
        ));
    }
    c.channel
        .profile(&c.subframe)
        .validate(c.subframe.n_cp)
        .map_err(|e| (&["channel.taps", "channel.n_sinusoids", "channel.speed_kmh"][..], msg(e)))?;
    c.pa.validate().map_err(|e| (&["pa.x_sat", "pa.rho"][..], msg(e)))?;
    for &v in &c.run.detectors {
        let d = c.detector_for(v);
        d.validate(&SubframeSpec {
            pilot_mode: d.pilot_mode(),
            ..c.subframe.clone()
        })
        .map_err(|e| (&["reservoir.delay", "detector.pilot_mode", "run.detectors"][..], format!("{}: {}", v.name(), msg(e))))?;
    }
    if c.run.n_subframes == 0 {
        return Err((&["run.n_subframes"], "n_subframes must be at least 1".into()));
    }
    let t = &c.toy.toy;
    if t.n_channels == 0 || t.n_train == 0 || t.n_test == 0 || t.n_lmmse == 0 || t.batch == 0 {
        return Err((
            &["toy.n_channels", "toy.n_train", "toy.n_test", "toy.n_lmmse", "toy.batch"],
            "toy sample counts must be positive".into(),
        ));
    }
    if c.toy.corruption.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err((&["toy.corruption"], "corruption fractions must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Parses and validates a config file.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    let mut section = String::new();
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[') {
            let name = s
                .strip_suffix(']')
                .ok_or_else(|| Error::ConfigLine { line: line_no, msg: format!("malformed section header `{line}`") })?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
            line: line_no,
            msg: format!("expected key = value, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        set_key(&mut c, &section, k, v).map_err(|msg| Error::ConfigLine { line: line_no, msg })?;
        lines.insert(format!("{section}.{k}"), line_no);
    }
    cross_check(&c).map_err(|(keys, msg)| match keys.iter().filter_map(|k| lines.get(*k)).max() {
        Some(&line) => Error::ConfigLine { line, msg },
        None => Error::Config(msg),
    })?;
    Ok(c)
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => parse_config(""),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?;
            parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Writes every key, so the output documents all defaults in effect.
pub fn serialize_config(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let s_ = &mut s;
    let mut kv = |k: &str, v: String| {
        writeln!(s_, "{k} = {v}").unwrap();
    };
    let d = &c.detector;
    let sf = &c.subframe;
    kv("[subframe]", String::new());
    kv("n_t", sf.n_t.to_string());
    kv("n_r", sf.n_r.to_string());
    kv("n_sc", sf.n_sc.to_string());
    kv("n_cp", sf.n_cp.to_string());
    kv("n_total", sf.n_total.to_string());
    kv("n_pilot", sf.n_pilot.to_string());
    kv("mod_order", sf.mod_order.to_string());
    kv(
        "pilot_pattern",
        match sf.pilot_pattern {
            PilotPattern::BlockLeading => "block_leading",
            PilotPattern::Scattered5GLike => "scattered",
        }
        .into(),
    );
    let ch = &c.channel;
    kv("[channel]", String::new());
    kv(
        "model",
        match ch.model {
            ChannelModel::TdlJakes => "tdl_jakes",
            ChannelModel::BlockStaticGaussian => "block_static",
        }
        .into(),
    );
    kv("taps", ch.taps.to_string());
    kv("decay_db", f(ch.decay_db));
    kv("speed_kmh", f(ch.speed_kmh));
    kv("carrier_hz", f(ch.carrier_hz));
    kv("spacing_hz", f(ch.spacing_hz));
    kv("n_sinusoids", ch.n_sinusoids.to_string());
    kv("[pa]", String::new());
    kv("enabled", c.pa.enabled.to_string());
    kv("x_sat", f(c.pa.x_sat));
    kv("rho", f(c.pa.rho));
    kv("ibo_db", f(c.pa.ibo_db));
    kv("literal_exponent", c.pa.literal_exponent.to_string());
    kv("[detector]", String::new());
    kv("group_size", d.group_size.to_string());
    kv("dd_alpha", f(d.dd_alpha));
    kv("dd_delta", f(d.dd_delta));
    kv("csi_smoothing", d.csi_smoothing.to_string());
    kv("pretrain_seed", d.pretrain_seed.to_string());
    kv(
        "pilot_mode",
        match d.pilot_mode {
            None => "auto",
            Some(PilotMode::RandomFull) => "random_full",
            Some(PilotMode::OrthogonalEmpty) => "orthogonal_empty",
        }
        .into(),
    );
    let r = &d.reservoir;
    kv("[reservoir]", String::new());
    kv("n_neurons", r.n_neurons.to_string());
    kv("window_len", r.window_len.to_string());
    kv("spectral_radius", f(r.spectral_radius));
    kv("input_scale", f(r.input_scale));
    kv("ridge", f(r.ridge));
    kv("delay", r.delay.to_string());
    kv("rls_alpha", f(r.rls_alpha));
    kv(
        "rls_init",
        match r.rls_init {
            RlsInit::PilotCorrelation => "pilot".into(),
            RlsInit::ScaledIdentity(delta) => format!("identity:{}", f(delta)),
        },
    );
    kv("[attention]", String::new());
    kv("key_time", d.attention.key_time.to_string());
    kv("key_freq", d.attention.key_freq.to_string());
    let sn = &d.structnet;
    kv("[structnet]", String::new());
    kv("hidden", sn.hidden.to_string());
    kv("eta", f(sn.eta));
    kv("lr_clf", f(sn.lr_clf));
    kv("lr_pe", f(sn.lr_pe));
    kv("lr_mha", f(sn.lr_mha));
    kv("pilot_epochs", sn.pilot_epochs.to_string());
    kv("df_epochs", sn.df_epochs.to_string());
    kv("optimizer", optimizer_name(&sn.optimizer).into());
    kv("pe_ridge", f(sn.pe_ridge));
    let p = &sn.pretrain;
    kv("[pretrain]", String::new());
    kv("samples", p.samples.to_string());
    kv("epochs", p.epochs.to_string());
    kv("ebno_min_db", f(p.ebno_min_db));
    kv("ebno_max_db", f(p.ebno_max_db));
    kv("lr", f(p.lr));
    kv("optimizer", optimizer_name(&p.optimizer).into());
    kv("[run]", String::new());
    kv("ebno_db", list(&c.run.ebno_db, |v| f(*v)));
    kv("n_subframes", c.run.n_subframes.to_string());
    kv("detectors", list(&c.run.detectors, |v| v.name()));
    kv("ibo_db", list(&c.run.ibo_db, |v| f(*v)));
    let t = &c.toy.toy;
    kv("[toy]", String::new());
    kv("n_channels", t.n_channels.to_string());
    kv("n_lmmse", t.n_lmmse.to_string());
    kv("n_train", t.n_train.to_string());
    kv("n_test", t.n_test.to_string());
    kv("cond_max", f(t.cond_max));
    kv("hidden", t.hidden.to_string());
    kv("epochs", t.epochs.to_string());
    kv("batch", t.batch.to_string());
    kv("lr_clf", f(t.lr_clf));
    kv("lr_pe", f(t.lr_pe));
    kv("ebno_db", list(&c.toy.ebno_db, |v| f(*v)));
    kv("corruption", list(&c.toy.corruption, |v| f(*v)));
    // section headers were written as `[name] = `
    s.lines()
        .map(|l| if l.starts_with('[') { l.trim_end_matches(" = ") } else { l })
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

/// Run provenance written as `#` lines above the CSV header.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub command: String,
    pub seed: u64,
    pub config: String,
}

impl RunMeta {
    fn write(&self, out: &mut String) {
        writeln!(out, "# neurorx {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(out, "# command = {}", self.command).unwrap();
        writeln!(out, "# seed = {}", self.seed).unwrap();
        for l in self.config.lines() {
            writeln!(out, "# {l}").unwrap();
        }
    }
}

/// A Monte-Carlo cell plus the PA back-off it ran at, if any.
#[derive(Debug, Clone)]
pub struct CsvRow<'a> {
    pub cell: &'a CellResult,
    pub ibo_db: Option<f64>,
}

fn write_new(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(text.as_bytes()).map_err(io)
}

/// Renders Monte-Carlo cells. Wall-clock seconds are left empty unless
/// `timing` is set, which keeps the file byte-deterministic.
pub fn render_csv(rows: &[CsvRow], meta: &RunMeta, timing: bool) -> String {
    let mut out = String::new();
    meta.write(&mut out);
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in rows {
        let c = r.cell;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.detector,
            f(c.ebno_db),
            c.n_subframes,
            c.bits,
            c.bit_errors,
            f(c.ber()),
            c.symbols,
            c.symbol_errors,
            f(c.ser()),
            c.excluded_subframes,
            if timing { f(c.seconds) } else { String::new() },
            f(c.median_ber()),
            r.ibo_db.map(f).unwrap_or_default(),
        )
        .unwrap();
    }
    out
}

pub fn emit_csv(rows: &[CsvRow], meta: &RunMeta, path: &Path, force: bool, timing: bool) -> Result<()> {
    write_new(path, &render_csv(rows, meta, timing), force)
}

pub fn render_toy_csv(rows: &[ToyRow], meta: &RunMeta) -> String {
    let mut out = String::new();
    meta.write(&mut out);
    writeln!(out, "{TOY_CSV_HEADER}").unwrap();
    for r in rows {
        for (m, v) in &r.median_ser {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.name(),
                f(r.ebno_db),
                f(r.corruption),
                r.trials.len(),
                f(*v),
                f(r.max_binary_corruption())
            )
            .unwrap();
        }
    }
    out
}

#[derive(Debug, Parser)]
#[command(name = "neurorx", version, about = "MIMO-OFDM receiver experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; falls back to NEURORX_SEED, then 1.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Overwrite an existing output file.
    #[arg(long, global = true)]
    force: bool,
    /// Exit with status 3 if the experiment's acceptance threshold fails.
    #[arg(long, global = true)]
    check: bool,
    /// Record wall-clock seconds in the CSV (makes it non-deterministic).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Small-MIMO SER comparison against genie and LMMSE channel knowledge.
    ToyA,
    /// Small-MIMO robustness to corrupted PAM labels.
    ToyB,
    /// Eb/No sweep of every configured detector.
    Sweep,
    /// The four RC receiver variants on the configured channel.
    Ablate,
    /// BER against PA input back-off for a baseline and a receiver.
    PaSweep {
        #[arg(long, default_value = "SphereDecoder{Interpolated}")]
        baseline: String,
        #[arg(long, default_value = "RcAttStructNetDf")]
        receiver: String,
    },
    /// Configured detectors on the scattered pilot layout.
    Scattered,
    /// Per-stage wall-clock time per subframe.
    Bench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ToyA => "toy-a",
            Command::ToyB => "toy-b",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::PaSweep { .. } => "pa-sweep",
            Command::Scattered => "scattered",
            Command::Bench => "bench",
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Outcome of a subcommand: `Ok(false)` means a `--check` threshold failed.
type Outcome = Result<bool>;

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    meta: RunMeta,
    g: GlobalArgs,
}

impl Ctx {
    fn out_path(&self) -> PathBuf {
        self.g.out.join(format!("{}.csv", self.meta.command))
    }

    fn montecarlo(&self, scenario: &Scenario, v: Variant, ebno: &[f64], n: usize) -> Result<Vec<CellResult>> {
        run_montecarlo(&self.cfg.detector_for(v), scenario, ebno, n, self.seed, self.g.parallelism, |c| {
            eprintln!(
                "{} {} dB: BER {:.4e} (median {:.4e}) over {} subframes",
                c.detector,
                c.ebno_db,
                c.ber(),
                c.median_ber(),
                c.n_subframes
            )
        })
    }

    fn write_cells(&self, rows: &[CsvRow]) -> Result<()> {
        fs::create_dir_all(&self.g.out).map_err(|source| Error::Io { path: self.g.out.clone(), source })?;
        emit_csv(rows, &self.meta, &self.out_path(), self.g.force, self.g.timing)
    }

    fn write_text(&self, text: &str) -> Result<()> {
        fs::create_dir_all(&self.g.out).map_err(|source| Error::Io { path: self.g.out.clone(), source })?;
        write_new(&self.out_path(), text, self.g.force)
    }

    fn toy_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.g.parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Toy A threshold: StructNet no worse than the LMMSE-shifted classifier at
/// every Eb/No, and within 1.5x of the genie at 5 dB.
pub fn check_toy_a(rows: &[ToyRow]) -> bool {
    let mut ok = true;
    for r in rows {
        let (Some(s), Some(l)) = (r.median(ToyMethod::StructNet), r.median(ToyMethod::AdnnLmmse)) else {
            return false;
        };
        ok &= s <= l;
        if r.ebno_db == 5.0 {
            ok &= r.median(ToyMethod::AdnnGt).is_some_and(|g| s <= 1.5 * g);
        }
    }
    ok && rows.iter().any(|r| r.ebno_db == 5.0)
}

/// Toy B threshold: StructNet beats the four-class MLP at 70% corruption,
/// and no batch has more than half of its binary labels wrong.
pub fn check_toy_b(rows: &[ToyRow]) -> bool {
    let audit = rows.iter().all(|r| r.max_binary_corruption() <= 0.5);
    let ordering = rows
        .iter()
        .find(|r| (r.corruption - 0.7).abs() < 1e-12)
        .and_then(|r| Some(r.median(ToyMethod::StructNet)? < r.median(ToyMethod::FourClassMlp)?))
        .unwrap_or(false);
    audit && ordering
}

/// Each variant's median BER is no worse than the next one's, at every
/// shared Eb/No. `cells[i]` lists variant `i`'s cells, best-expected first.
pub fn check_ordering(cells: &[Vec<CellResult>]) -> bool {
    cells.windows(2).all(|w| {
        w[0].iter()
            .zip(&w[1])
            .all(|(a, b)| a.ebno_db == b.ebno_db && a.median_ber() <= b.median_ber())
    })
}

/// The baseline's median BER rises strictly as the back-off shrinks, and the
/// receiver's growth ratio over the IBO range is strictly smaller. Cells are
/// in the order of `ibo_db`.
pub fn check_pa_trend(ibo_db: &[f64], baseline: &[f64], receiver: &[f64]) -> bool {
    if ibo_db.len() < 2 {
        return false;
    }
    let mut order: Vec<usize> = (0..ibo_db.len()).collect();
    order.sort_by(|&a, &b| ibo_db[b].partial_cmp(&ibo_db[a]).unwrap());
    let monotone = order.windows(2).all(|w| baseline[w[1]] > baseline[w[0]]);
    let (hi, lo) = (order[0], order[order.len() - 1]);
    let ratio = |v: &[f64]| v[lo] / v[hi];
    monotone && ratio(receiver) < ratio(baseline)
}

fn run_toy_a(ctx: &Ctx) -> Outcome {
    let t = &ctx.cfg.toy;
    let seeds = seed_range(ctx.seed, t.toy.n_channels);
    let rows = ctx.toy_pool(|| toy_experiment_a(&t.toy, &t.ebno_db, &seeds))??;
    for r in &rows {
        eprintln!("toy-a {} dB: {}", r.ebno_db, summary(&r.median_ser));
    }
    ctx.write_text(&render_toy_csv(&rows, &ctx.meta))?;
    Ok(check_toy_a(&rows))
}

fn run_toy_b(ctx: &Ctx) -> Outcome {
    let t = &ctx.cfg.toy;
    if ctx.g.check && t.toy.n_channels < 20 {
        return Err(Error::Config("toy-b --check needs at least 20 seeds (toy.n_channels)".into()));
    }
    let seeds = seed_range(ctx.seed, t.toy.n_channels);
    let rows = ctx.toy_pool(|| toy_experiment_b(&t.toy, &t.corruption, &seeds))??;
    for r in &rows {
        eprintln!(
            "toy-b {:.0}% corruption: {} (max binary corruption {:.3})",
            100.0 * r.corruption,
            summary(&r.median_ser),
            r.max_binary_corruption()
        );
    }
    ctx.write_text(&render_toy_csv(&rows, &ctx.meta))?;
    Ok(check_toy_b(&rows))
}

fn summary(v: &[(ToyMethod, f64)]) -> String {
    list(v, |(m, s)| format!("{} {s:.4}", m.name()))
}

fn run_detectors(ctx: &Ctx, scenario: &Scenario, detectors: &[Variant]) -> Result<Vec<Vec<CellResult>>> {
    detectors
        .iter()
        .map(|&v| ctx.montecarlo(scenario, v, &ctx.cfg.run.ebno_db, ctx.cfg.run.n_subframes))
        .collect()
}

fn rows_of(cells: &[Vec<CellResult>], ibo: Option<f64>) -> Vec<CsvRow<'_>> {
    cells.iter().flatten().map(|cell| CsvRow { cell, ibo_db: ibo }).collect()
}

fn run_sweep(ctx: &Ctx, scenario: &Scenario) -> Outcome {
    let cells = run_detectors(ctx, scenario, &ctx.cfg.run.detectors)?;
    ctx.write_cells(&rows_of(&cells, scenario.pa.enabled.then_some(scenario.pa.ibo_db)))?;
    Ok(true)
}

pub const ABLATION_ORDER: [Variant; 4] = [
    Variant::RcAttStructNetDf,
    Variant::RcStructNetDf,
    Variant::RcStructDf,
    Variant::RcStruct,
];

fn run_ablate(ctx: &Ctx) -> Outcome {
    let scenario = ctx.cfg.scenario();
    let cells = run_detectors(ctx, &scenario, &ABLATION_ORDER)?;
    ctx.write_cells(&rows_of(&cells, scenario.pa.enabled.then_some(scenario.pa.ibo_db)))?;
    Ok(check_ordering(&cells))
}

fn run_pa_sweep(ctx: &Ctx, baseline: &str, receiver: &str) -> Outcome {
    let variants = [Variant::parse(baseline)?, Variant::parse(receiver)?];
    for &v in &variants {
        let d = ctx.cfg.detector_for(v);
        d.validate(&SubframeSpec {
            pilot_mode: d.pilot_mode(),
            ..ctx.cfg.subframe.clone()
        })?;
    }
    let ebno = match ctx.cfg.run.ebno_db.as_slice() {
        [e] => *e,
        _ => return Err(Error::Config("pa-sweep needs exactly one value in run.ebno_db".into())),
    };
    let mut all = Vec::new();
    let mut medians = [Vec::new(), Vec::new()];
    for &ibo in &ctx.cfg.run.ibo_db {
        let mut scenario = ctx.cfg.scenario();
        scenario.pa.enabled = true;
        scenario.pa.ibo_db = ibo;
        for (k, &v) in variants.iter().enumerate() {
            let cell = ctx.montecarlo(&scenario, v, &[ebno], ctx.cfg.run.n_subframes)?.remove(0);
            medians[k].push(cell.median_ber());
            all.push((cell, ibo));
        }
    }
    let rows: Vec<CsvRow> = all.iter().map(|(cell, ibo)| CsvRow { cell, ibo_db: Some(*ibo) }).collect();
    ctx.write_cells(&rows)?;
    Ok(check_pa_trend(&ctx.cfg.run.ibo_db, &medians[0], &medians[1]))
}

fn run_scattered(ctx: &Ctx) -> Outcome {
    let mut scenario = ctx.cfg.scenario();
    scenario.spec.pilot_pattern = PilotPattern::Scattered5GLike;
    scenario.spec.n_total = SCATTERED_SLOT_LEN;
    scenario.spec.n_pilot = scenario.spec.n_pilot.min(SCATTERED_SLOT_LEN - 1);
    run_sweep(ctx, &scenario)
}

fn run_bench(ctx: &Ctx) -> Outcome {
    let scenario = ctx.cfg.scenario();
    let ebno = *ctx
        .cfg
        .run
        .ebno_db
        .last()
        .ok_or_else(|| Error::Config("run.ebno_db is empty".into()))?;
    let mut out = String::new();
    ctx.meta.write(&mut out);
    writeln!(out, "{BENCH_CSV_HEADER}").unwrap();
    for &v in &ctx.cfg.run.detectors {
        let cell = ctx.montecarlo(&scenario, v, &[ebno], ctx.cfg.run.n_subframes)?.remove(0);
        let n = (cell.n_subframes - cell.excluded_subframes).max(1) as f64;
        let t = &cell.timings;
        let stages = [
            ("rc_pilot", t.rc_pilot),
            ("rc_df", t.rc_df),
            ("freq_pilot", t.freq_pilot),
            ("freq_detect", t.freq_detect),
            ("freq_df", t.freq_df),
            ("csi", t.csi),
            ("detect", t.detect),
            ("total", t.total()),
        ];
        for (stage, secs) in stages {
            writeln!(out, "{},{stage},{}", cell.detector, f(secs / n)).unwrap();
            println!("{:<32} {stage:<12} {:.3e} s", cell.detector, secs / n);
        }
    }
    ctx.write_text(&out)?;
    Ok(true)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigLine { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<bool> {
    let seed = resolve_seed(cli.global.seed)?;
    let cfg = load_config(cli.global.config.as_deref()).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
        e => e,
    })?;
    if cli.global.parallelism == 0 {
        return Err(Error::Config("--parallelism must be at least 1".into()));
    }
    let Format::Csv = cli.global.format;
    let meta = RunMeta {
        command: cli.command.name().to_string(),
        seed,
        config: serialize_config(&cfg),
    };
    let ctx = Ctx { cfg, seed, meta, g: cli.global };
    if ctx.out_path().exists() && !ctx.g.force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            ctx.out_path().display()
        )));
    }
    let outcome = match &cli.command {
        Command::ToyA => run_toy_a(&ctx),
        Command::ToyB => run_toy_b(&ctx),
        Command::Sweep => run_sweep(&ctx, &ctx.cfg.scenario()),
        Command::Ablate => run_ablate(&ctx),
        Command::PaSweep { baseline, receiver } => run_pa_sweep(&ctx, baseline, receiver),
        Command::Scattered => run_scattered(&ctx),
        Command::Bench => run_bench(&ctx),
    }?;
    println!("wrote {}", ctx.out_path().display());
    Ok(outcome || !ctx.g.check)
}

/// Runs the CLI and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("check failed");
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(
            (c.subframe.n_sc, c.subframe.n_cp, c.subframe.n_total, c.subframe.n_pilot),
            (512, 32, 20, 4)
        );
    }

    #[test]
    fn non_square_order_is_a_line_error() {
        let e = parse_config("[subframe]\n\nmod_order = 15\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 3, .. }), "{e}");
    }

    #[test]
    fn unknown_keys_and_bad_types_report_their_line() {
        let e = parse_config("[subframe]\nn_sc = 64\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 3, .. }), "{e}");
        let e = parse_config("[channel]\ntaps = eight\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }), "{e}");
        let e = parse_config("n_sc = 64\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }), "{e}");
        let e = parse_config("[pa]\nenabled = yes\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 2, .. }), "{e}");
    }

    #[test]
    fn channel_longer_than_prefix_is_rejected() {
        let e = parse_config("[subframe]\nn_cp = 4\n# comment\n[channel]\ntaps = 6\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 5, .. }), "{e}");
        assert!(e.to_string().contains("n_cp"));
    }

    #[test]
    fn rc_delay_beyond_prefix_is_rejected() {
        let text = "[subframe]\nn_cp = 8\n[channel]\ntaps = 4\n[reservoir]\ndelay = 12\n[run]\ndetectors = RcStruct\n";
        assert!(matches!(parse_config(text).unwrap_err(), Error::ConfigLine { line: 8, .. }));
    }

    #[test]
    fn default_serialization_round_trips() {
        let c = ExperimentConfig::default();
        let text = serialize_config(&c);
        assert_eq!(parse_config(&text).unwrap(), c);
        assert!(text.contains("[reservoir]\n"));
    }

    #[test]
    fn csv_has_metadata_header_and_one_row() {
        let cell = CellResult {
            detector: "Lmmse{Oracle}".into(),
            ebno_db: 10.0,
            n_subframes: 2,
            bits: 3,
            bit_errors: 1,
            symbols: 3,
            symbol_errors: 2,
            excluded_subframes: 0,
            seconds: 0.5,
            timings: Default::default(),
            confidence_histogram: Default::default(),
            subframe_ber: vec![Some(0.0), Some(0.5)],
            failures: vec![],
        };
        let meta = RunMeta {
            command: "sweep".into(),
            seed: 7,
            config: "[run]\nn_subframes = 2\n".into(),
        };
        let text = render_csv(&[CsvRow { cell: &cell, ibo_db: None }], &meta, false);
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0], CSV_HEADER);
        let fields: Vec<&str> = data[1].split(',').collect();
        assert_eq!(fields[5].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(fields[10], "");
        assert!(text.contains("# seed = 7"));
        assert!(text.contains("# n_subframes = 2"));
    }

    #[test]
    fn existing_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_new(&p, "a", false).unwrap();
        assert!(matches!(write_new(&p, "b", false), Err(Error::Config(_))));
        write_new(&p, "b", true).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "b");
    }

    #[test]
    fn pa_trend_check() {
        let ibo = [9.0, 6.0, 3.0];
        assert!(check_pa_trend(&ibo, &[0.1, 0.2, 0.4], &[0.1, 0.12, 0.2]));
        assert!(!check_pa_trend(&ibo, &[0.1, 0.2, 0.4], &[0.1, 0.2, 0.4]));
        assert!(!check_pa_trend(&ibo, &[0.1, 0.1, 0.4], &[0.1, 0.1, 0.1]));
        // listing order does not matter
        assert!(check_pa_trend(&[3.0, 9.0, 6.0], &[0.4, 0.1, 0.2], &[0.2, 0.1, 0.12]));
    }

    fn detectors() -> impl Strategy<Value = Vec<Variant>> {
        let all = vec![
            Variant::RcStruct,
            Variant::RcStructDf,
            Variant::RcStructNetDf,
            Variant::RcAttStructNetDf,
            Variant::Lmmse(CsiSource::PilotOnly),
            Variant::Lmmse(CsiSource::Interpolated),
            Variant::SphereDecoder(CsiSource::DecisionDirected),
            Variant::SphereDecoder(CsiSource::Oracle),
            Variant::MlOracle,
        ];
        proptest::sample::subsequence(all, 0..5)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn serialization_round_trips(
            n_sc in 8usize..600,
            n_cp in 8usize..40,
            m in prop::sample::select(vec![4usize, 16, 64]),
            speed in 0.0f64..500.0,
            ibo in -5.0f64..20.0,
            alpha in 0.5f64..=1.0,
            eta in 0.0f64..1.0,
            ebno in prop::collection::vec(-10.0f64..40.0, 0..6),
            dets in detectors(),
            smoothing in 0usize..4,
            identity in prop::option::of(1e-6f64..1e3),
        ) {
            let mut c = ExperimentConfig::default();
            c.subframe.n_sc = n_sc;
            c.subframe.n_cp = n_cp;
            c.subframe.mod_order = m;
            c.channel.speed_kmh = speed;
            c.pa.ibo_db = ibo;
            c.detector.reservoir.rls_alpha = alpha;
            c.detector.structnet.eta = eta;
            c.detector.csi_smoothing = smoothing;
            if let Some(d) = identity {
                c.detector.reservoir.rls_init = RlsInit::ScaledIdentity(d);
            }
            c.run.ebno_db = ebno;
            c.run.detectors = dets;
            let parsed = parse_config(&serialize_config(&c)).unwrap();
            prop_assert_eq!(&parsed, &c);
            prop_assert_eq!(serialize_config(&parsed), serialize_config(&c));
        }
    }
}
