//! Frequency-domain interference channel with tapped-delay-line fading.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::msg::C64;

/// Tap delays and linear powers, normalized to unit total power.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDelayProfile {
    delays: Vec<f64>,
    powers: Vec<f64>,
}

impl PowerDelayProfile {
    /// `delays` in seconds, `powers` linear. Powers are rescaled to sum to one.
    pub fn new(delays: Vec<f64>, powers: Vec<f64>) -> Result<Self> {
        if delays.is_empty() {
            return Err(invalid("power delay profile has no taps"));
        }
        if delays.len() != powers.len() {
            return Err(invalid("delay and power lists differ in length"));
        }
        if delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || delays.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("tap delays must be nonnegative and ascending"));
        }
        if powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(invalid("tap powers must be positive"));
        }
        let total: f64 = powers.iter().sum();
        Ok(Self { delays, powers: powers.iter().map(|p| p / total).collect() })
    }

    /// From delays in nanoseconds and powers in dB.
    pub fn from_ns_db(delays_ns: &[f64], powers_db: &[f64]) -> Result<Self> {
        Self::new(delays_ns.iter().map(|d| d * 1e-9).collect(), powers_db.iter().map(|p| 10f64.powf(p / 10.0)).collect())
    }

    /// 3GPP Extended Typical Urban.
    pub fn etu() -> Self {
        Self::from_ns_db(
            &[0.0, 50.0, 120.0, 200.0, 230.0, 500.0, 1600.0, 2300.0, 5000.0],
            &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, -3.0, -5.0, -7.0],
        )
        .expect("valid ETU profile")
    }

    /// Single tap at zero delay.
    pub fn flat() -> Self {
        Self::new(vec![0.0], vec![1.0]).expect("valid profile")
    }

    /// Parses lines of `delay_ns power_db`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut delays = Vec::new();
        let mut powers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [d, p] => d.parse::<f64>().ok().zip(p.parse::<f64>().ok()),
                _ => None,
            };
            let (d, p) = parsed.ok_or_else(|| Error::Config(format!("power delay profile line {}: expected `delay_ns power_db`", n + 1)))?;
            delays.push(d);
            powers.push(p);
        }
        Self::from_ns_db(&delays, &powers).map_err(|e| Error::Config(format!("power delay profile: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }
}

/// Tapped-delay-line model sampled on `n` subcarriers, with the
/// per-subcarrier tap phasors precomputed.
#[derive(Debug, Clone)]
pub struct FadingModel {
    pdp: PowerDelayProfile,
    spacing_hz: f64,
    /// `n × taps`, entry `(i, t) = exp(−j2π f_i τ_t)`.
    phasors: DMatrix<C64>,
}

impl FadingModel {
    pub fn new(pdp: PowerDelayProfile, spacing_hz: f64, n: usize) -> Self {
        let phasors = DMatrix::from_fn(n, pdp.delays.len(), |i, t| C64::from_polar(1.0, -2.0 * PI * i as f64 * spacing_hz * pdp.delays[t]));
        Self { pdp, spacing_hz, phasors }
    }

    pub fn subcarriers(&self) -> usize {
        self.phasors.nrows()
    }

    pub fn profile(&self) -> &PowerDelayProfile {
        &self.pdp
    }

    pub fn spacing_hz(&self) -> f64 {
        self.spacing_hz
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<C64> {
        let taps: Vec<C64> = self.pdp.powers.iter().map(|p| complex_normal(rng) * p.sqrt()).collect();
        self.phasors.row_iter().map(|row| row.iter().zip(&taps).map(|(e, a)| e * a).sum()).collect()
    }

    pub fn covariance(&self) -> DMatrix<C64> {
        let n = self.subcarriers();
        DMatrix::from_fn(n, n, |i, j| {
            (0..self.pdp.powers.len()).map(|t| self.phasors[(i, t)] * self.phasors[(j, t)].conj() * self.pdp.powers[t]).sum()
        })
    }
}

/// One `CN(0, 1)` sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * FRAC_1_SQRT_2
}

/// Frequency response on `n` subcarriers of one random tap realization:
/// `h(i) = Σ_t a_t·exp(−j2π f_i τ_t)`, `a_t ~ CN(0, p_t)`, `f_i = i·spacing`.
pub fn draw_channel<R: Rng + ?Sized>(pdp: &PowerDelayProfile, spacing_hz: f64, n: usize, rng: &mut R) -> Vec<C64> {
    FadingModel::new(pdp.clone(), spacing_hz, n).draw(rng)
}

/// `Σ(i, i′) = Σ_t p_t·exp(−j2π(f_i − f_i′)τ_t)`.
pub fn channel_covariance(pdp: &PowerDelayProfile, spacing_hz: f64, n: usize) -> DMatrix<C64> {
    FadingModel::new(pdp.clone(), spacing_hz, n).covariance()
}

/// Noise precision giving the requested per-receiver SNR.
pub fn calibrate_gamma(target_snr_db: f64, pdp: &PowerDelayProfile) -> f64 {
    10f64.powf(target_snr_db / 10.0) / pdp.total_power()
}

/// Channel weights `h[l][k]` from transmitter `k` to receiver `l` and the
/// noise precision `gamma[l]` at each receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Vec<Vec<C64>>>,
    pub gamma: Vec<f64>,
}

impl ChannelRealization {
    pub fn new(h: Vec<Vec<Vec<C64>>>, gamma: Vec<f64>) -> Result<Self> {
        let k = h.len();
        if gamma.len() != k || h.iter().any(|row| row.len() != k) {
            return Err(invalid("channel realization must be K × K with K noise precisions"));
        }
        let n = h.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if h.iter().flatten().any(|v| v.len() != n) {
            return Err(invalid("channel vectors differ in length"));
        }
        if gamma.iter().any(|g| g.is_nan() || *g <= 0.0) {
            return Err(invalid("noise precisions must be positive"));
        }
        Ok(Self { h, gamma })
    }

    /// Independent draws for every `(l, k)` pair, all receivers at precision `gamma`.
    pub fn draw<R: Rng + ?Sized>(model: &FadingModel, users: usize, gamma: f64, rng: &mut R) -> Self {
        let h = (0..users).map(|_| (0..users).map(|_| model.draw(rng)).collect()).collect();
        Self { h, gamma: vec![gamma; users] }
    }

    pub fn users(&self) -> usize {
        self.h.len()
    }

    pub fn subcarriers(&self) -> usize {
        self.h.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }
}

/// `K` vectors of unit-variance circular noise.
pub fn draw_unit_noise<R: Rng + ?Sized>(users: usize, n: usize, rng: &mut R) -> Vec<Vec<C64>> {
    (0..users).map(|_| (0..n).map(|_| complex_normal(rng)).collect()).collect()
}

/// `y_l = Σ_k h_lk ⊙ x_k + γ_l^{-1/2}·w_l` for given unit-variance noise `w`.
/// An infinite `γ_l` gives a noiseless output.
pub fn superpose(x: &[Vec<C64>], real: &ChannelRealization, unit_noise: &[Vec<C64>]) -> Result<Vec<Vec<C64>>> {
    let users = real.users();
    let n = real.subcarriers();
    if x.len() != users || x.iter().any(|v| v.len() != n) {
        return Err(invalid(format!("expected {users} frames of length {n}")));
    }
    if unit_noise.len() != users || unit_noise.iter().any(|v| v.len() != n) {
        return Err(invalid("noise dimensions do not match the channel"));
    }
    Ok((0..users)
        .map(|l| {
            let scale = if real.gamma[l].is_infinite() { 0.0 } else { real.gamma[l].sqrt().recip() };
            (0..n)
                .map(|i| {
                    let signal: C64 = (0..users).map(|k| real.h[l][k][i] * x[k][i]).sum();
                    signal + unit_noise[l][i] * scale
                })
                .collect()
        })
        .collect())
}

/// Passes the users' frames through the interference channel with fresh noise.
pub fn apply_channel<R: Rng + ?Sized>(x: &[Vec<C64>], real: &ChannelRealization, rng: &mut R) -> Result<Vec<Vec<C64>>> {
    let noise = draw_unit_noise(real.users(), real.subcarriers(), rng);
    superpose(x, real, &noise)
}
