//! Monte-Carlo BER sweeps over SNR points and exchange schedules.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{calibrate_gamma, draw_unit_noise, superpose, ChannelRealization, FadingModel, PowerDelayProfile};
use crate::coop::{run_frame, ExchangeSchedule, InMemoryTransport, RunOptions};
use crate::error::{Error, Result};
use crate::msg::C64;
use crate::rx::{ChannelPrior, Genie, ReceiverSetup};
use crate::seeding::mix_seed;
use crate::tx::{ConvCode, FrameConfig, TxChain};

pub const CSV_HEADER: &str = "snr_db,schedule,iteration,user,bit_errors,bits_total,ber";

/// An exchange schedule with the name it is reported under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: ExchangeSchedule,
}

impl NamedSchedule {
    /// Presets `none` (alias `nex0`), `nex1` = (1), `nex2` = (1, 5) and
    /// `nex19` (alias `full`) = (1, …, 19), or an explicit `nex:t1,t2,…`.
    /// Presets that do not fit into `n_it` iterations are rejected.
    pub fn parse(spec: &str, n_it: usize) -> Result<Self> {
        let spec = spec.trim();
        let times: Vec<usize> = match spec {
            "none" | "nex0" => vec![],
            "nex1" => vec![1],
            "nex2" => vec![1, 5],
            "nex19" | "full" => (1..20).collect(),
            _ => match spec.strip_prefix("nex:") {
                Some("") => vec![],
                Some(list) => list
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad exchange iteration {t:?} in {spec:?}"))))
                    .collect::<Result<_>>()?,
                None => return Err(Error::Config(format!("unknown schedule {spec:?}"))),
            },
        };
        let schedule = ExchangeSchedule::new(n_it, times).map_err(|e| Error::Config(format!("schedule {spec:?}: {e}")))?;
        Ok(Self { name: spec.to_string(), schedule })
    }
}

/// Splits a comma-separated schedule list. Bare integers continue the
/// preceding `nex:` spec, so `none, nex:1,5` yields two schedules.
pub fn split_schedule_list(list: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for token in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let continues = token.chars().all(|c| c.is_ascii_digit()) && out.last().is_some_and(|s| s.starts_with("nex:"));
        match out.last_mut() {
            Some(last) if continues => {
                if !last.ends_with(':') {
                    last.push(',');
                }
                last.push_str(token);
            }
            _ => out.push(token.to_string()),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty schedule list".into()));
    }
    Ok(out)
}

/// Everything that defines a sweep.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub users: usize,
    pub info_bits: usize,
    pub pilot_count: usize,
    pub generators: Vec<u32>,
    pub interleaver_seed: u64,
    pub pilot_seed: u64,
    pub pdp: PowerDelayProfile,
    pub spacing_hz: f64,
    pub snr_db: Vec<f64>,
    pub schedules: Vec<NamedSchedule>,
    pub n_it: usize,
    pub n_in: usize,
    pub n_det: usize,
    pub frames: usize,
    pub master_seed: u64,
    pub genie_channel: bool,
    pub genie_noise: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let n_it = 20;
        Self {
            users: 2,
            info_bits: 50,
            pilot_count: 16,
            generators: vec![0o133, 0o171, 0o165],
            interleaver_seed: 1,
            pilot_seed: 2,
            pdp: PowerDelayProfile::etu(),
            spacing_hz: 15e3,
            snr_db: (0..=6).map(|i| 2.0 * i as f64).collect(),
            schedules: ["none", "nex1", "nex2", "nex19"].iter().map(|s| NamedSchedule::parse(s, n_it).unwrap()).collect(),
            n_it,
            n_in: 10,
            n_det: 5,
            frames: 1000,
            master_seed: 0,
            genie_channel: false,
            genie_noise: false,
            threads: None,
            out: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

pub fn parse_snr_list(value: &str) -> Result<Vec<f64>> {
    let list: Vec<f64> = value.split(',').map(|v| parse_value("snr_db", v)).collect::<Result<_>>()?;
    if list.is_empty() || list.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config(format!("invalid SNR list {value:?}")));
    }
    Ok(list)
}

impl RunConfig {
    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; list values are comma-separated. Schedules are
    /// resolved after all lines so `n_it` may appear anywhere.
    pub fn apply_text(mut self, text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut schedules = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "users" => self.users = parse_value(key, value)?,
                "info_bits" => self.info_bits = parse_value(key, value)?,
                "pilot_count" => self.pilot_count = parse_value(key, value)?,
                "generators_octal" => {
                    let gens: Vec<&str> = value.split(',').map(str::trim).collect();
                    self.generators = ConvCode::from_octal(&gens).map_err(|e| Error::Config(e.to_string()))?.generators().to_vec();
                }
                "interleaver_seed" => self.interleaver_seed = parse_value(key, value)?,
                "pilot_seed" => self.pilot_seed = parse_value(key, value)?,
                "pdp" => {
                    self.pdp = match value {
                        "etu" => PowerDelayProfile::etu(),
                        "flat" => PowerDelayProfile::flat(),
                        path => {
                            let path = base_dir.map_or_else(|| PathBuf::from(path), |d| d.join(path));
                            PowerDelayProfile::load(&path)?
                        }
                    }
                }
                "subcarrier_spacing_hz" => self.spacing_hz = parse_value(key, value)?,
                "snr_db" => self.snr_db = parse_snr_list(value)?,
                "schedules" => schedules = Some(split_schedule_list(value)?),
                "n_it" => self.n_it = parse_value(key, value)?,
                "n_in" => self.n_in = parse_value(key, value)?,
                "n_det" => self.n_det = parse_value(key, value)?,
                "frames" => self.frames = parse_value(key, value)?,
                "master_seed" | "seed" => self.master_seed = parse_value(key, value)?,
                "genie_channel" => self.genie_channel = parse_bool(key, value)?,
                "genie_noise" => self.genie_noise = parse_bool(key, value)?,
                "threads" => self.threads = Some(parse_value(key, value)?),
                "out" => self.out = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", no + 1))),
            }
        }
        let names = match schedules {
            Some(names) => names,
            None => self.schedules.iter().map(|s| s.name.clone()).collect(),
        };
        self.schedules = names.iter().map(|n| NamedSchedule::parse(n, self.n_it)).collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::default().apply_text(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("at least one finite SNR point is required".into());
        }
        if self.schedules.is_empty() {
            return bad("at least one schedule is required".into());
        }
        let names: BTreeSet<&str> = self.schedules.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.schedules.len() {
            return bad("schedule names must be unique".into());
        }
        if let Some(s) = self.schedules.iter().find(|s| s.schedule.iterations() != self.n_it) {
            return bad(format!("schedule {} was built for a different iteration count", s.name));
        }
        if self.info_bits == 0 {
            return bad("info_bits must be positive".into());
        }
        if !(self.spacing_hz > 0.0) {
            return bad("subcarrier spacing must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    /// Frame layout, code and receiver parameters shared by every frame.
    pub fn fading_model(&self, setup: &ReceiverSetup) -> FadingModel {
        FadingModel::new(self.pdp.clone(), self.spacing_hz, setup.chain.config.total_symbols())
    }

    pub fn receiver_setup(&self) -> Result<ReceiverSetup> {
        let code = ConvCode::new(&self.generators)?;
        let frame = FrameConfig::new(self.users, self.info_bits, self.pilot_count, &code, self.interleaver_seed, self.pilot_seed)?;
        let n = frame.total_symbols();
        let chain = TxChain::new(frame, code)?;
        let model = FadingModel::new(self.pdp.clone(), self.spacing_hz, n);
        let prior = ChannelPrior::zero_mean(model.covariance())?;
        ReceiverSetup::new(chain, prior, self.n_in, self.n_det)
    }
}

/// Aggregated errors of one (SNR, schedule, iteration, user) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BerRecord {
    pub snr_db: f64,
    pub schedule: String,
    /// 1-based; iteration 1 is the initialization.
    pub iteration: usize,
    /// 1-based.
    pub user: usize,
    pub bit_errors: u64,
    pub bits_total: u64,
    pub ber: f64,
}

/// Per-frame errors, indexed `[snr][schedule][iteration][user]`.
type FrameErrors = Vec<Vec<Vec<Vec<usize>>>>;

/// Random content of one frame: bits, channels and unit-variance noise,
/// all derived from the frame seed.
#[derive(Debug, Clone)]
pub struct FrameDraw {
    pub u: Vec<Vec<u8>>,
    /// `h[l][k]`: transmitter `k` to receiver `l`.
    pub h: Vec<Vec<Vec<C64>>>,
    pub unit_noise: Vec<Vec<C64>>,
    pub x: Vec<Vec<C64>>,
}

impl FrameDraw {
    pub fn new(master_seed: u64, index: u64, setup: &ReceiverSetup, model: &FadingModel) -> Result<Self> {
        let cfg = &setup.chain.config;
        let users = cfg.users;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master_seed, index));
        let u: Vec<Vec<u8>> = (0..users).map(|_| (0..cfg.info_bits).map(|_| rng.gen_range(0..2u8)).collect()).collect();
        let h = (0..users).map(|_| (0..users).map(|_| model.draw(&mut rng)).collect()).collect();
        let unit_noise = draw_unit_noise(users, cfg.total_symbols(), &mut rng);
        let x = setup.chain.assemble_frame(u.clone())?.x;
        Ok(Self { u, h, unit_noise, x })
    }

    /// Received signals of all receivers at noise precision `gamma`.
    pub fn observe(&self, gamma: f64) -> Result<Vec<Vec<C64>>> {
        let real = ChannelRealization::new(self.h.clone(), vec![gamma; self.h.len()])?;
        superpose(&self.x, &real, &self.unit_noise)
    }

    pub fn genies(&self, gamma: f64, channel: bool, noise: bool) -> Vec<Genie> {
        self.h.iter().map(|h| Genie { channel: channel.then(|| h.clone()), gamma: noise.then_some(gamma) }).collect()
    }
}

/// Runs every SNR point and schedule on frame `index`.
fn simulate_frame(cfg: &RunConfig, setup: &ReceiverSetup, model: &FadingModel, index: usize) -> Result<FrameErrors> {
    let frame = FrameDraw::new(cfg.master_seed, index as u64, setup, model)?;
    let mut out = Vec::with_capacity(cfg.snr_db.len());
    for &snr in &cfg.snr_db {
        let gamma = calibrate_gamma(snr, &cfg.pdp);
        let y = frame.observe(gamma)?;
        let genies = frame.genies(gamma, cfg.genie_channel, cfg.genie_noise);
        let mut per_schedule = Vec::with_capacity(cfg.schedules.len());
        for s in &cfg.schedules {
            let mut transport = InMemoryTransport::new(cfg.users);
            let options = RunOptions { frame_id: index as u64, reverse_order: false };
            let outcome = run_frame(setup, &s.schedule, y.clone(), genies.clone(), &frame.u, &mut transport, options)?;
            per_schedule.push(outcome.errors);
        }
        out.push(per_schedule);
    }
    Ok(out)
}

/// Runs the sweep and returns one record per (SNR, schedule, iteration,
/// user), sorted for output. Every schedule and SNR point sees the same
/// bits, channels and unit-variance noise for a given frame index.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<BerRecord>> {
    cfg.validate()?;
    let setup = cfg.receiver_setup()?;
    let model = cfg.fading_model(&setup);
    let work = || (0..cfg.frames).into_par_iter().map(|f| simulate_frame(cfg, &setup, &model, f)).collect::<Result<Vec<_>>>();
    let frames = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {t} worker threads: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let bits_total = (cfg.frames * cfg.info_bits) as u64;
    let mut records = Vec::new();
    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        for (ci, s) in cfg.schedules.iter().enumerate() {
            for it in 0..cfg.n_it {
                for user in 0..cfg.users {
                    let bit_errors: u64 = frames.iter().map(|f| f[si][ci][it][user] as u64).sum();
                    records.push(BerRecord {
                        snr_db: snr,
                        schedule: s.name.clone(),
                        iteration: it + 1,
                        user: user + 1,
                        bit_errors,
                        bits_total,
                        ber: bit_errors as f64 / bits_total as f64,
                    });
                }
            }
        }
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [BerRecord]) {
    records.sort_by(|a, b| {
        a.schedule
            .cmp(&b.schedule)
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then(a.iteration.cmp(&b.iteration))
            .then(a.user.cmp(&b.user))
    });
}

/// CSV text with a header line and LF line endings, rows in the order given.
pub fn to_csv(records: &[BerRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to write".into()));
    }
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{},{},{},{},{},{},{:.6}", r.snr_db, csv_field(&r.schedule), r.iteration, r.user, r.bit_errors, r.bits_total, r.ber).unwrap();
    }
    Ok(s)
}

/// Quotes a field that contains a separator, quote or line break.
fn csv_field(s: &str) -> std::borrow::Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\"")).into()
    } else {
        s.into()
    }
}

pub fn write_csv(records: &[BerRecord], path: &Path) -> Result<()> {
    let text = to_csv(records)?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Final-iteration BER of `schedule` at `snr_db`, pooled over users.
pub fn final_ber(records: &[BerRecord], schedule: &str, snr_db: f64) -> Option<f64> {
    pooled_ber(records, schedule, snr_db, records.iter().filter(|r| r.schedule == schedule).map(|r| r.iteration).max()?)
}

/// BER of `schedule` at `snr_db` after `iteration`, pooled over users.
pub fn pooled_ber(records: &[BerRecord], schedule: &str, snr_db: f64, iteration: usize) -> Option<f64> {
    let cell: Vec<&BerRecord> = records.iter().filter(|r| r.schedule == schedule && r.snr_db == snr_db && r.iteration == iteration).collect();
    if cell.is_empty() {
        return None;
    }
    let errors: u64 = cell.iter().map(|r| r.bit_errors).sum();
    let total: u64 = cell.iter().map(|r| r.bits_total).sum();
    Some(errors as f64 / total as f64)
}
