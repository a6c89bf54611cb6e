//! Belief-propagation side of a receiver: QPSK soft demapping and mapping,
//! exact BCJR decoding, and the bit-message bookkeeping around the decoder.

use super::{ReceiverSetup, ReceiverState, SymbolObservation};
use crate::error::{invalid, Result};
use crate::msg::{bit_message_product, clamp_prob, from_log_odds, BitSoftMessage, Normalize, SymbolSoftMessage};
use crate::tx::{qpsk_bit, ConvCode, QPSK};

#[inline]
fn max_star(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    a.max(b) + (-(a - b).abs()).exp().ln_1p()
}

/// `ln Σ_{s: b(s)=1} − ln Σ_{s: b(s)=0}` of the demapper weights, for
/// likelihoods too far apart to sum directly.
fn log_domain_diff(fit: &[f64; 4], b: usize, p_other: f64) -> f64 {
    let other = 1 - b;
    let (mut num1, mut num0) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in 0..4 {
        let lp = if qpsk_bit(s, other) == 1 { p_other.ln() } else { (-p_other).ln_1p() };
        if qpsk_bit(s, b) == 1 {
            num1 = max_star(num1, fit[s] + lp);
        } else {
            num0 = max_star(num0, fit[s] + lp);
        }
    }
    num1 - num0
}

/// MAP demapping of Gray QPSK. For each bit the extrinsic message is
/// `Σ_{s ∋ b} exp(−|s − x̂ᵒ|²/σ²)·prior(other bit of s)`, excluding the
/// bit's own prior.
///
/// Returns the extrinsics and the number of bits whose weights were
/// degenerate and which were set to 0.5.
pub fn demap(obs: &SymbolObservation, bit_priors: &BitSoftMessage) -> Result<(BitSoftMessage, usize)> {
    if bit_priors.len() != 2 * obs.len() {
        return Err(invalid(format!("{} bit priors for {} QPSK symbols", bit_priors.len(), obs.len())));
    }
    let priors = bit_priors.p1();
    let mut degenerate = 0;
    let mut out = Vec::with_capacity(priors.len());
    for i in 0..obs.len() {
        let prec = obs.precision[i];
        let fit: [f64; 4] = std::array::from_fn(|s| if prec > 0.0 { -prec * (QPSK[s] - obs.mean[i]).norm_sqr() } else { 0.0 });
        let top = fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let like: [f64; 4] = std::array::from_fn(|s| (fit[s] - top).exp());
        for b in 0..2 {
            let other = 1 - b;
            let p_other = clamp_prob(priors[2 * i + other]);
            let (mut num1, mut num0) = (0.0, 0.0);
            for s in 0..4 {
                let w = like[s] * if qpsk_bit(s, other) == 1 { p_other } else { 1.0 - p_other };
                if qpsk_bit(s, b) == 1 {
                    num1 += w;
                } else {
                    num0 += w;
                }
            }
            let diff = if num1 > 0.0 && num0 > 0.0 { num1.ln() - num0.ln() } else { log_domain_diff(&fit, b, p_other) };
            if diff.is_nan() {
                degenerate += 1;
                out.push(0.5);
            } else {
                out.push(from_log_odds(diff));
            }
        }
    }
    Ok((BitSoftMessage::new(out)?, degenerate))
}

/// Symbol weights from bit messages: `β(s) = Π_b P(bit b = b(s))`, one row
/// per pair of bits.
pub fn map_soft(bits: &BitSoftMessage) -> Result<SymbolSoftMessage> {
    if bits.len() % 2 != 0 {
        return Err(invalid("map_soft needs an even number of bits"));
    }
    let p = bits.p1();
    let mut weights = Vec::with_capacity(2 * p.len());
    for pair in p.chunks(2) {
        for s in 0..4 {
            let w0 = if qpsk_bit(s, 0) == 1 { pair[0] } else { 1.0 - pair[0] };
            let w1 = if qpsk_bit(s, 1) == 1 { pair[1] } else { 1.0 - pair[1] };
            weights.push(w0 * w1);
        }
    }
    SymbolSoftMessage::new(4, weights)?.normalize()
}

/// Decoder inputs and outputs for one codeword, in code (deinterleaved) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderIo {
    pub coded_prior: BitSoftMessage,
    pub coded_posterior: BitSoftMessage,
    /// Posterior divided by the prior.
    pub coded_extrinsic: BitSoftMessage,
    /// Information-bit posteriors under uniform information priors.
    pub info_app: BitSoftMessage,
}

/// Exact forward-backward MAP decoding over the terminated trellis of
/// `code`. The recursions run on probabilities renormalized at every step,
/// which is exact up to rounding and avoids transcendental functions in the
/// inner loops.
pub fn bcjr_decode(coded_prior: &BitSoftMessage, code: &ConvCode) -> Result<DecoderIo> {
    let n_out = code.outputs_per_bit();
    if coded_prior.is_empty() || coded_prior.len() % n_out != 0 || coded_prior.len() / n_out <= code.memory() {
        return Err(invalid(format!("{} coded bits do not form a terminated codeword", coded_prior.len())));
    }
    let steps = coded_prior.len() / n_out;
    let info_bits = steps - code.memory();
    let states = code.states();
    let prior: Vec<f64> = coded_prior.p1().iter().map(|&p| clamp_prob(p)).collect();

    // Branch weight of each output pattern at each step.
    let patterns = 1usize << n_out;
    let mut weight = vec![1.0; steps * patterns];
    for t in 0..steps {
        for o in 0..patterns {
            weight[t * patterns + o] = (0..n_out)
                .map(|j| {
                    let p = prior[t * n_out + j];
                    if (o >> j) & 1 == 1 { p } else { 1.0 - p }
                })
                .product();
        }
    }
    let inputs = |t: usize| if t < info_bits { 2 } else { 1 };
    let renormalize = |v: &mut [f64]| {
        let total: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= total);
    };

    let mut alpha = vec![0.0; (steps + 1) * states];
    alpha[0] = 1.0;
    for t in 0..steps {
        let (cur, next) = alpha.split_at_mut((t + 1) * states);
        let cur = &cur[t * states..];
        let next = &mut next[..states];
        let w = &weight[t * patterns..(t + 1) * patterns];
        for s in 0..states {
            if cur[s] == 0.0 {
                continue;
            }
            for u in 0..inputs(t) {
                next[code.next_state(s, u)] += cur[s] * w[code.output(s, u) as usize];
            }
        }
        renormalize(next);
    }

    let mut beta = vec![0.0; (steps + 1) * states];
    beta[steps * states] = 1.0;
    for t in (0..steps).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let w = &weight[t * patterns..(t + 1) * patterns];
        for s in 0..states {
            cur[s] = (0..inputs(t)).map(|u| w[code.output(s, u) as usize] * next[code.next_state(s, u)]).sum();
        }
        renormalize(cur);
    }

    let mut post_llr = vec![0.0; coded_prior.len()];
    let mut ext_llr = vec![0.0; coded_prior.len()];
    let mut info_llr = vec![0.0; info_bits];
    for t in 0..steps {
        let w = &weight[t * patterns..(t + 1) * patterns];
        // Pattern totals excluding the branch weight give extrinsics directly.
        let mut by_pattern = vec![0.0; patterns];
        let mut info = [0.0f64; 2];
        for s in 0..states {
            let a = alpha[t * states + s];
            if a == 0.0 {
                continue;
            }
            for u in 0..inputs(t) {
                let out = code.output(s, u) as usize;
                let v = a * beta[(t + 1) * states + code.next_state(s, u)];
                by_pattern[out] += v;
                info[u] += v * w[out];
            }
        }
        for j in 0..n_out {
            let (mut post, mut ext) = ([0.0f64; 2], [0.0f64; 2]);
            for (o, &v) in by_pattern.iter().enumerate() {
                let bit = (o >> j) & 1;
                post[bit] += v * w[o];
                // Divide out this bit's own prior factor.
                let own = if bit == 1 { prior[t * n_out + j] } else { 1.0 - prior[t * n_out + j] };
                ext[bit] += v * w[o] / own;
            }
            post_llr[t * n_out + j] = post[1].ln() - post[0].ln();
            ext_llr[t * n_out + j] = ext[1].ln() - ext[0].ln();
        }
        if t < info_bits {
            info_llr[t] = info[1].ln() - info[0].ln();
        }
    }

    Ok(DecoderIo {
        coded_prior: coded_prior.clone(),
        coded_posterior: BitSoftMessage::from_log_odds(&post_llr),
        coded_extrinsic: BitSoftMessage::from_log_odds(&ext_llr),
        info_app: BitSoftMessage::from_log_odds(&info_llr),
    })
}

/// `1` where the probability of a one exceeds 0.5; ties go to `0`.
pub fn hard_decide(info_app: &BitSoftMessage) -> Vec<u8> {
    info_app.p1().iter().map(|&p| (p > 0.5) as u8).collect()
}

impl ReceiverState {
    /// Stored own-user demapper extrinsics received during the last exchange.
    fn owner_payloads(&self) -> Vec<&BitSoftMessage> {
        self.owner_in.iter().flatten().map(|r| &r.payload).collect()
    }

    /// Messages into the mappers: the owner's combined message for other
    /// users, and decoder extrinsic times received demapper extrinsics for
    /// the own user. Neutral where nothing has arrived yet.
    pub fn refresh_mapper_inputs(&mut self) -> Result<()> {
        let c = self.bit_prior[self.index].len();
        for k in 0..self.users() {
            if k == self.index {
                let neutral = BitSoftMessage::neutral(c);
                let mut inputs = vec![self.coded_extrinsic.as_ref().unwrap_or(&neutral)];
                inputs.extend(self.owner_payloads());
                let (msg, conflicts) = bit_message_product(&inputs)?;
                self.diagnostics.bit_conflicts += conflicts;
                self.bit_prior[k] = msg;
            } else {
                self.bit_prior[k] = match &self.peer_in[k] {
                    Some(r) => r.payload.clone(),
                    None => BitSoftMessage::neutral(c),
                };
            }
        }
        Ok(())
    }

    /// Demapper extrinsics for every user from the last symbol likelihoods.
    pub fn demap_all(&mut self) -> Result<()> {
        for k in 0..self.users() {
            let (ext, degenerate) = demap(&self.x_obs[k], &self.bit_prior[k])?;
            self.diagnostics.degenerate_demaps += degenerate;
            self.demap_ext[k] = Some(ext);
        }
        Ok(())
    }

    /// Decoder run for the own user: input is the own demapper extrinsic times
    /// all received demapper extrinsics, deinterleaved.
    pub fn decode_pass(&mut self, setup: &ReceiverSetup) -> Result<()> {
        let l = self.index;
        let own = self.demap_ext[l].as_ref().ok_or_else(|| invalid("decode_pass before demapping"))?;
        let mut inputs = vec![own];
        inputs.extend(self.owner_payloads());
        let (combined, conflicts) = bit_message_product(&inputs)?;
        self.diagnostics.bit_conflicts += conflicts;
        let interleaver = &setup.chain.interleavers[l];
        let prior = BitSoftMessage::new(interleaver.deinterleave(combined.p1())?)?;
        let io = bcjr_decode(&prior, &setup.chain.code)?;
        self.coded_extrinsic = Some(BitSoftMessage::new(interleaver.interleave(io.coded_extrinsic.p1())?)?);
        self.decoder = Some(io);
        Ok(())
    }

    pub fn demap_and_decode(&mut self, setup: &ReceiverSetup) -> Result<()> {
        self.demap_all()?;
        self.decode_pass(setup)
    }
}
