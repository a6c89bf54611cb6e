//! Per-receiver processing.
//!
//! [`mf`] holds the mean-field updates (channel weights, noise precision,
//! soft symbol detection) and [`bp`] the belief-propagation side (soft
//! (de)mapping and trellis decoding). Both operate on a [`ReceiverState`]
//! that belongs to exactly one receiver.

pub mod bp;
pub mod mf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result};
use crate::msg::{BitSoftMessage, Covariance, GammaMessage, GaussianVectorMessage, SymbolSoftMessage, C64};
use crate::tx::{TxChain, QPSK};

pub use bp::{bcjr_decode, demap, hard_decide, map_soft, DecoderIo};
pub use mf::{channel_belief, symbol_app, SymbolApp};

/// Relative eigenvalue cutoff when factoring a prior covariance.
const RANK_TOLERANCE: f64 = 1e-12;

/// Channel-weight prior `CN(mean, Σᵖ)` together with a factor `F`,
/// `Σᵖ ≈ F Fᴴ`, restricted to the numerically nonzero eigenvalues.
///
/// Posterior updates run in the column space of `F`; a band-limited delay
/// profile makes `Σᵖ` rank-deficient, so this is both cheaper and better
/// conditioned than inverting `Σᵖ`.
#[derive(Debug, Clone)]
pub struct ChannelPrior {
    message: GaussianVectorMessage,
    factor: DMatrix<C64>,
}

impl ChannelPrior {
    pub fn new(message: GaussianVectorMessage) -> Result<Self> {
        let factor = match message.covariance() {
            Covariance::Factored(g) => g.clone(),
            Covariance::Diagonal(v) => {
                if v.iter().any(|x| x.is_infinite()) {
                    return Err(invalid("channel prior must have finite variances"));
                }
                DMatrix::from_diagonal(&v.map(|x| C64::new(x.sqrt(), 0.0)))
            }
            Covariance::Full(m) => {
                let eig = SymmetricEigen::new(m.clone());
                let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
                let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&j| eig.eigenvalues[j] > RANK_TOLERANCE * top).collect();
                let mut f = DMatrix::zeros(m.nrows(), keep.len());
                for (c, &j) in keep.iter().enumerate() {
                    let scale = C64::new(eig.eigenvalues[j].sqrt(), 0.0);
                    f.set_column(c, &(eig.eigenvectors.column(j) * scale));
                }
                f
            }
        };
        Ok(Self { message, factor })
    }

    /// Zero-mean prior with covariance `cov`.
    pub fn zero_mean(cov: DMatrix<C64>) -> Result<Self> {
        let n = cov.nrows();
        Self::new(GaussianVectorMessage::new(DVector::zeros(n), Covariance::Full(cov))?)
    }

    pub fn message(&self) -> &GaussianVectorMessage {
        &self.message
    }

    pub fn factor(&self) -> &DMatrix<C64> {
        &self.factor
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn len(&self) -> usize {
        self.message.len()
    }

    pub fn is_empty(&self) -> bool {
        self.message.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.message.select(indices)?)
    }
}

/// Everything a receiver knows before the frame arrives: frame layout, its
/// code, all users' pilots, channel statistics and iteration counts.
#[derive(Debug, Clone)]
pub struct ReceiverSetup {
    pub chain: TxChain,
    pub prior: ChannelPrior,
    pub pilot_prior: ChannelPrior,
    /// Pilot-only estimation passes during initialization.
    pub n_in: usize,
    /// Detection passes per iteration.
    pub n_det: usize,
}

impl ReceiverSetup {
    pub fn new(chain: TxChain, prior: ChannelPrior, n_in: usize, n_det: usize) -> Result<Self> {
        if prior.len() != chain.config.total_symbols() {
            return Err(invalid(format!("channel prior has length {}, frame has {} symbols", prior.len(), chain.config.total_symbols())));
        }
        let pilot_prior = prior.select(&chain.config.pilot_indices)?;
        Ok(Self { chain, prior, pilot_prior, n_in, n_det })
    }

    pub fn users(&self) -> usize {
        self.chain.config.users
    }

    pub fn constellation(&self) -> &'static [C64] {
        &QPSK
    }
}

/// Per-data-symbol Gaussian likelihood `CN(x; mean, 1/precision)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolObservation {
    pub mean: Vec<C64>,
    pub precision: Vec<f64>,
}

impl SymbolObservation {
    pub fn uninformative(n: usize) -> Self {
        Self { mean: vec![C64::new(0.0, 0.0); n], precision: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Known quantities handed to a receiver in place of its estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Genie {
    /// True `h_lk` for every transmitter `k`.
    pub channel: Option<Vec<Vec<C64>>>,
    pub gamma: Option<f64>,
}

/// Counters for numerical guards that fired instead of aborting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub bit_conflicts: usize,
    pub noise_clamps: usize,
    pub degenerate_demaps: usize,
}

impl std::ops::AddAssign for Diagnostics {
    fn add_assign(&mut self, o: Self) {
        self.bit_conflicts += o.bit_conflicts;
        self.noise_clamps += o.noise_clamps;
        self.degenerate_demaps += o.degenerate_demaps;
    }
}

/// Exchange payload with the stage it arrived in.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub stage: u16,
    pub payload: BitSoftMessage,
}

/// All estimates of receiver `index` for one frame.
///
/// Bit messages are kept in the transmitted (interleaved) bit order of the
/// user they describe; only the own user's decoder works deinterleaved.
#[derive(Debug, Clone)]
pub struct ReceiverState {
    pub index: usize,
    pub y: Vec<C64>,
    /// Belief over `h_lk` after the last full-vector update.
    pub h_msg: Vec<GaussianVectorMessage>,
    /// Working means `ĥ_lk(i)`.
    pub h_mean: Vec<Vec<C64>>,
    /// Working variances `σ²_{h_lk(i)}`.
    pub h_var: Vec<Vec<f64>>,
    pub gamma_msg: GammaMessage,
    pub gamma_hat: f64,
    /// `x̂_{k,l}(i)` over the whole frame; pilots are fixed.
    pub x_mean: Vec<Vec<C64>>,
    /// `σ²_{x_{k,l}(i)}`; zero at pilots.
    pub x_var: Vec<Vec<f64>>,
    /// Last symbol likelihoods from the observation factor, data positions only.
    pub x_obs: Vec<SymbolObservation>,
    /// Extrinsic symbol weights from the mapper.
    pub sym_extrinsic: Vec<SymbolSoftMessage>,
    /// Bit messages into each user's mapper.
    pub bit_prior: Vec<BitSoftMessage>,
    /// Demapper extrinsics per user from the last demapping.
    pub demap_ext: Vec<Option<BitSoftMessage>>,
    /// Own-user decoder output; `coded_extrinsic` there is deinterleaved.
    pub decoder: Option<DecoderIo>,
    /// Own-user decoder extrinsic in transmitted bit order.
    pub coded_extrinsic: Option<BitSoftMessage>,
    /// Demapper extrinsics about the own user's bits, by sending receiver.
    pub owner_in: Vec<Option<Received>>,
    /// Owner-combined messages about user `k`'s bits, received from receiver `k`.
    pub peer_in: Vec<Option<Received>>,
    pub genie: Genie,
    pub diagnostics: Diagnostics,
}

impl ReceiverState {
    pub fn new(setup: &ReceiverSetup, index: usize, y: Vec<C64>, genie: Genie) -> Result<Self> {
        let cfg = &setup.chain.config;
        let users = cfg.users;
        let n = cfg.total_symbols();
        if index >= users {
            return Err(invalid(format!("receiver index {index} out of range")));
        }
        if y.len() != n {
            return Err(invalid(format!("received vector has length {}, expected {n}", y.len())));
        }
        if let Some(h) = &genie.channel {
            if h.len() != users || h.iter().any(|v| v.len() != n) {
                return Err(invalid("genie channel has wrong dimensions"));
            }
        }
        let prior = setup.prior.message();
        let prior_var = prior.variances();
        let (h_msg, h_mean, h_var) = match &genie.channel {
            Some(h) => {
                let msgs = h
                    .iter()
                    .map(|v| GaussianVectorMessage::diagonal(DVector::from_column_slice(v), DVector::zeros(n)))
                    .collect::<Result<Vec<_>>>()?;
                (msgs, h.clone(), vec![vec![0.0; n]; users])
            }
            None => (vec![prior.clone(); users], vec![prior.mean().as_slice().to_vec(); users], vec![prior_var.as_slice().to_vec(); users]),
        };
        let mut x_mean = vec![vec![C64::new(0.0, 0.0); n]; users];
        let mut x_var = vec![vec![1.0; n]; users];
        for k in 0..users {
            for (&i, &p) in cfg.pilot_indices.iter().zip(&setup.chain.pilots[k]) {
                x_mean[k][i] = p;
                x_var[k][i] = 0.0;
            }
        }
        let gamma_hat = genie.gamma.unwrap_or(1.0);
        Ok(Self {
            index,
            y,
            h_msg,
            h_mean,
            h_var,
            gamma_msg: GammaMessage::non_informative(),
            gamma_hat,
            x_mean,
            x_var,
            x_obs: vec![SymbolObservation::uninformative(cfg.data_symbols); users],
            sym_extrinsic: vec![SymbolSoftMessage::uniform(cfg.data_symbols, QPSK.len()); users],
            bit_prior: vec![BitSoftMessage::neutral(cfg.coded_bits); users],
            demap_ext: vec![None; users],
            decoder: None,
            coded_extrinsic: None,
            owner_in: vec![None; users],
            peer_in: vec![None; users],
            genie,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn users(&self) -> usize {
        self.h_mean.len()
    }

    /// Replaces the working channel statistics of user `k` with a belief.
    pub(crate) fn set_channel(&mut self, k: usize, belief: GaussianVectorMessage) {
        self.h_mean[k] = belief.mean().as_slice().to_vec();
        self.h_var[k] = belief.variances().as_slice().to_vec();
        self.h_msg[k] = belief;
    }

    /// Initialization stage: pilot-based channel estimation, noise and symbol
    /// estimation, then demapping and decoding with neutral exchange messages.
    pub fn initialize(&mut self, setup: &ReceiverSetup) -> Result<()> {
        self.pilot_init(setup)?;
        for _ in 0..setup.n_det {
            if self.genie.gamma.is_none() {
                self.noise_precision_update(setup)?;
            }
            for k in 0..self.users() {
                self.detection_pass(setup, k)?;
            }
        }
        self.demap_and_decode(setup)
    }

    /// One local iteration: refresh the mapper inputs from decoder and
    /// exchange buffers, re-estimate channels and noise, detect, then demap
    /// and decode.
    pub fn local_iteration(&mut self, setup: &ReceiverSetup) -> Result<()> {
        self.refresh_mapper_inputs()?;
        for k in 0..self.users() {
            self.sym_extrinsic[k] = map_soft(&self.bit_prior[k])?;
            let app = symbol_app(&self.x_obs[k], &self.sym_extrinsic[k], setup.constellation())?;
            self.store_symbol_moments(setup, k, &app);
        }
        if self.genie.channel.is_none() {
            for k in 0..self.users() {
                self.update_channel(setup, k)?;
            }
        }
        if self.genie.gamma.is_none() {
            self.noise_precision_update(setup)?;
        }
        for _ in 0..setup.n_det {
            for k in 0..self.users() {
                self.detection_pass(setup, k)?;
            }
        }
        self.demap_and_decode(setup)
    }

    /// Hard decisions on the own user's information bits.
    pub fn decisions(&self) -> Option<Vec<u8>> {
        self.decoder.as_ref().map(|d| hard_decide(&d.info_app))
    }
}
