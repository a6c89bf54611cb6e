//! Mean-field updates of one receiver: channel weights, noise precision and
//! soft symbol detection.

use nalgebra::DVector;

use super::{ChannelPrior, ReceiverSetup, ReceiverState, SymbolObservation};
use crate::error::{invalid, Error, Result};
use crate::msg::{factored_update, Covariance, GammaMessage, GaussianVectorMessage, SymbolSoftMessage, C64};

/// Posterior over the channel vector from its prior and a per-entry
/// observation message: `Σ⁻¹ = (Σᵖ)⁻¹ + (Σᵒ)⁻¹`,
/// `ĥ = Σ[(Σᵖ)⁻¹ĥᵖ + (Σᵒ)⁻¹ĥᵒ]`.
///
/// Same result as [`crate::msg::gaussian_product`] on the full prior; the
/// update runs through the prior's factor instead.
pub fn channel_belief(prior: &ChannelPrior, obs: &GaussianVectorMessage) -> Result<GaussianVectorMessage> {
    let Covariance::Diagonal(var) = obs.covariance() else {
        return Err(invalid("channel observation must have diagonal covariance"));
    };
    if obs.len() != prior.len() {
        return Err(invalid(format!("observation length {} does not match prior length {}", obs.len(), prior.len())));
    }
    let precision: Vec<f64> = var
        .iter()
        .map(|&v| if v.is_infinite() { 0.0 } else { 1.0 / v.max(1.0 / crate::msg::MAX_PRECISION) })
        .collect();
    let (mean, factor) = factored_update(prior.message().mean(), prior.factor(), &precision, obs.mean())?;
    GaussianVectorMessage::new(mean, Covariance::Factored(factor))
}

/// Symbol posteriors and their first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolApp {
    pub app: SymbolSoftMessage,
    pub mean: Vec<C64>,
    pub var: Vec<f64>,
}

/// `app(s) ∝ β(s)·exp(−|s − x̂ᵒ|²/σ²ᵒ)` per data symbol, with the mean and
/// variance of each posterior.
pub fn symbol_app(obs: &SymbolObservation, extrinsic: &SymbolSoftMessage, constellation: &[C64]) -> Result<SymbolApp> {
    let m = constellation.len();
    if extrinsic.order() != m || extrinsic.symbols() != obs.len() {
        return Err(invalid("symbol_app: observation, weights and constellation disagree"));
    }
    let mut weights = vec![0.0; obs.len() * m];
    let mut mean = Vec::with_capacity(obs.len());
    let mut var = Vec::with_capacity(obs.len());
    let mut logw = vec![0.0; m];
    for (i, row) in weights.chunks_mut(m).enumerate() {
        let beta = extrinsic.row(i);
        let prec = obs.precision[i];
        for (s, point) in constellation.iter().enumerate() {
            logw[s] = if prec > 0.0 { -prec * (point - obs.mean[i]).norm_sqr() } else { 0.0 };
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for s in 0..m {
            row[s] = beta[s] * (logw[s] - top).exp();
        }
        let mut total: f64 = row.iter().sum();
        if !(total > 0.0) {
            // Every point with prior weight is far from the observation.
            for (s, l) in logw.iter_mut().enumerate() {
                *l += beta[s].ln();
            }
            let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(Error::DegenerateMessage(format!("symbol {i} has no admissible constellation point")));
            }
            for s in 0..m {
                row[s] = (logw[s] - top).exp();
            }
            total = row.iter().sum();
        }
        row.iter_mut().for_each(|w| *w /= total);
        let mu: C64 = row.iter().zip(constellation).map(|(w, s)| s * *w).sum();
        let v: f64 = row.iter().zip(constellation).map(|(w, s)| w * (s - mu).norm_sqr()).sum();
        mean.push(mu);
        var.push(v.max(0.0));
    }
    Ok(SymbolApp { app: SymbolSoftMessage::new(m, weights)?, mean, var })
}

impl ReceiverState {
    /// Observation message for `h_lk` at `indices` (positions in the frame):
    /// `ĥᵒ(i) = x̂*(i)/(σ²_x + |x̂|²)·(y(i) − Σ_{k′≠k} ĥ_{lk′}(i)x̂_{k′}(i))`
    /// with precision `γ̂(σ²_x + |x̂|²)`. Entries with no symbol energy get
    /// zero precision.
    pub fn channel_observation_at(&self, k: usize, indices: &[usize]) -> Result<GaussianVectorMessage> {
        if !(self.gamma_hat > 0.0) {
            return Err(invalid("noise precision estimate must be positive"));
        }
        let mut mean = DVector::zeros(indices.len());
        let mut var = DVector::from_element(indices.len(), f64::INFINITY);
        for (j, &i) in indices.iter().enumerate() {
            let energy = self.x_var[k][i] + self.x_mean[k][i].norm_sqr();
            if energy > 0.0 {
                mean[j] = self.x_mean[k][i].conj() / energy * self.residual_without(k, i);
                var[j] = 1.0 / (self.gamma_hat * energy);
            }
        }
        GaussianVectorMessage::diagonal(mean, var)
    }

    pub fn channel_observation(&self, k: usize) -> Result<GaussianVectorMessage> {
        let all: Vec<usize> = (0..self.y.len()).collect();
        self.channel_observation_at(k, &all)
    }

    /// `y(i) − Σ_{k′≠k} ĥ_{lk′}(i)x̂_{k′}(i)`.
    #[inline]
    fn residual_without(&self, k: usize, i: usize) -> C64 {
        let mut r = self.y[i];
        for kk in 0..self.users() {
            if kk != k {
                r -= self.h_mean[kk][i] * self.x_mean[kk][i];
            }
        }
        r
    }

    /// Channel observation followed by the prior combination for user `k`.
    pub fn update_channel(&mut self, setup: &ReceiverSetup, k: usize) -> Result<()> {
        let obs = self.channel_observation(k)?;
        let belief = channel_belief(&setup.prior, &obs)?;
        self.set_channel(k, belief);
        Ok(())
    }

    /// Expected residual energy
    /// `d_o = Σ_i [|y − Σ_k ĥx̂|² + Σ_k (σ²_xσ²_h + σ²_h|x̂|² + σ²_x|ĥ|²)]`
    /// over `indices`.
    pub fn residual_energy(&self, indices: &[usize]) -> f64 {
        indices
            .iter()
            .map(|&i| {
                let mut r = self.y[i];
                let mut spread = 0.0;
                for k in 0..self.users() {
                    let (h, hv, x, xv) = (self.h_mean[k][i], self.h_var[k][i], self.x_mean[k][i], self.x_var[k][i]);
                    r -= h * x;
                    spread += xv * hv + hv * x.norm_sqr() + xv * h.norm_sqr();
                }
                r.norm_sqr() + spread
            })
            .sum()
    }

    /// Noise-precision belief from the observations at `indices` under the
    /// flat `Ga(0, 0)` prior; `γ̂ = |indices| / d_o`. A vanishing `d_o` is
    /// clamped to `1e-12·|indices|` and counted.
    pub fn noise_precision_update_at(&mut self, indices: &[usize]) -> Result<GammaMessage> {
        let shape = indices.len() as f64;
        let floor = 1e-12 * shape;
        let mut rate = self.residual_energy(indices);
        if !(rate >= floor) {
            rate = floor;
            self.diagnostics.noise_clamps += 1;
        }
        let msg = GammaMessage::non_informative().combine(&GammaMessage::new(shape, rate)?);
        self.gamma_hat = msg.mean()?;
        self.gamma_msg = msg;
        Ok(msg)
    }

    pub fn noise_precision_update(&mut self, _setup: &ReceiverSetup) -> Result<GammaMessage> {
        let all: Vec<usize> = (0..self.y.len()).collect();
        self.noise_precision_update_at(&all)
    }

    /// Likelihood of user `k`'s data symbols:
    /// `x̂ᵒ(i) = ĥ*(i)/(σ²_h + |ĥ|²)·(y(i) − Σ_{k′≠k} ĥ_{lk′}(i)x̂_{k′}(i))`,
    /// precision `γ̂(σ²_h + |ĥ|²)`.
    pub fn symbol_observation(&self, setup: &ReceiverSetup, k: usize) -> SymbolObservation {
        let data = &setup.chain.config.data_indices;
        let mut obs = SymbolObservation::uninformative(data.len());
        for (j, &i) in data.iter().enumerate() {
            let gain = self.h_var[k][i] + self.h_mean[k][i].norm_sqr();
            if gain > 0.0 {
                obs.mean[j] = self.h_mean[k][i].conj() / gain * self.residual_without(k, i);
                obs.precision[j] = self.gamma_hat * gain;
            }
        }
        obs
    }

    pub(crate) fn store_symbol_moments(&mut self, setup: &ReceiverSetup, k: usize, app: &SymbolApp) {
        for (j, &i) in setup.chain.config.data_indices.iter().enumerate() {
            self.x_mean[k][i] = app.mean[j];
            self.x_var[k][i] = app.var[j];
        }
    }

    /// Symbol likelihood for user `k`, combined with the current mapper
    /// extrinsic into new symbol moments.
    pub fn detection_pass(&mut self, setup: &ReceiverSetup, k: usize) -> Result<()> {
        let obs = self.symbol_observation(setup, k);
        let app = symbol_app(&obs, &self.sym_extrinsic[k], setup.constellation())?;
        self.store_symbol_moments(setup, k, &app);
        self.x_obs[k] = obs;
        Ok(())
    }

    /// Pilot-only channel and noise estimation repeated `n_in` times, then
    /// extension of the channel estimates to the whole frame and reset of the
    /// data-symbol statistics to `x̂ = 0`, `σ²_x = 1`.
    pub fn pilot_init(&mut self, setup: &ReceiverSetup) -> Result<()> {
        let cfg = &setup.chain.config;
        let pilots = &cfg.pilot_indices;
        let users = self.users();
        let n = cfg.total_symbols();

        if self.genie.channel.is_none() {
            let pilot_prior_mean = setup.pilot_prior.message().mean();
            let pilot_prior_var = setup.pilot_prior.message().variances();
            for k in 0..users {
                for (j, &i) in pilots.iter().enumerate() {
                    self.h_mean[k][i] = pilot_prior_mean[j];
                    self.h_var[k][i] = pilot_prior_var[j];
                }
            }
            let mut last_obs: Vec<Option<GaussianVectorMessage>> = vec![None; users];
            for _ in 0..setup.n_in {
                for (k, slot) in last_obs.iter_mut().enumerate() {
                    let obs = self.channel_observation_at(k, pilots)?;
                    let belief = channel_belief(&setup.pilot_prior, &obs)?;
                    let var = belief.variances();
                    for (j, &i) in pilots.iter().enumerate() {
                        self.h_mean[k][i] = belief.mean()[j];
                        self.h_var[k][i] = var[j];
                    }
                    *slot = Some(obs);
                }
                if self.genie.gamma.is_none() {
                    self.noise_precision_update_at(pilots)?;
                }
            }
            for (k, obs) in last_obs.into_iter().enumerate() {
                let mut mean = DVector::zeros(n);
                let mut var = DVector::from_element(n, f64::INFINITY);
                if let Some(obs) = obs {
                    let pv = obs.variances();
                    for (j, &i) in pilots.iter().enumerate() {
                        mean[i] = obs.mean()[j];
                        var[i] = pv[j];
                    }
                }
                let full = GaussianVectorMessage::diagonal(mean, var)?;
                let belief = channel_belief(&setup.prior, &full)?;
                self.set_channel(k, belief);
            }
        }
        for k in 0..users {
            for &i in &cfg.data_indices {
                self.x_mean[k][i] = C64::new(0.0, 0.0);
                self.x_var[k][i] = 1.0;
            }
        }
        Ok(())
    }
}
