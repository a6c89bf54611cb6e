//! Transmit chain: convolutional encoding, interleaving, QPSK mapping and
//! pilot multiplexing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{invalid, Result};
use crate::msg::C64;
use crate::seeding::mix_seed;

pub const QPSK_BITS: usize = 2;

/// Gray QPSK points indexed by `2·b0 + b1`: `((1−2b0) + j(1−2b1))/√2`.
pub const QPSK: [C64; 4] = [
    C64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    C64::new(FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    C64::new(-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    C64::new(-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
];

/// Bit `b` (0 or 1) of constellation index `s`.
#[inline]
pub fn qpsk_bit(s: usize, b: usize) -> u8 {
    ((s >> (1 - b)) & 1) as u8
}

/// Feed-forward convolutional code with a precomputed trellis.
///
/// Generators are read MSB-first: the most significant tap of each
/// generator multiplies the current input bit.
#[derive(Debug, Clone)]
pub struct ConvCode {
    generators: Vec<u32>,
    memory: usize,
    next_state: Vec<[usize; 2]>,
    outputs: Vec<[u32; 2]>,
}

impl ConvCode {
    pub fn new(generators: &[u32]) -> Result<Self> {
        if generators.is_empty() || generators.iter().any(|&g| g == 0) {
            return Err(invalid("generators must be nonzero"));
        }
        let constraint = generators.iter().map(|g| 32 - g.leading_zeros() as usize).max().unwrap();
        if constraint < 2 || constraint > 16 {
            return Err(invalid(format!("unsupported constraint length {constraint}")));
        }
        let memory = constraint - 1;
        let states = 1usize << memory;
        let mut next_state = Vec::with_capacity(states);
        let mut outputs = Vec::with_capacity(states);
        for s in 0..states {
            let mut ns = [0; 2];
            let mut out = [0; 2];
            for u in 0..2 {
                let reg = ((u as u32) << memory) | s as u32;
                ns[u] = (reg >> 1) as usize;
                out[u] = generators
                    .iter()
                    .enumerate()
                    .fold(0, |acc, (j, g)| acc | (((g & reg).count_ones() & 1) << j));
            }
            next_state.push(ns);
            outputs.push(out);
        }
        Ok(Self { generators: generators.to_vec(), memory, next_state, outputs })
    }

    /// Parses octal generator strings such as `["133", "171", "165"]`.
    pub fn from_octal<S: AsRef<str>>(generators: &[S]) -> Result<Self> {
        let gens = generators
            .iter()
            .map(|g| u32::from_str_radix(g.as_ref().trim(), 8).map_err(|_| invalid(format!("bad octal generator {:?}", g.as_ref()))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&gens)
    }

    /// The rate-1/3 constraint-length-7 code `(133, 171, 165)₈`.
    pub fn default_code() -> Self {
        Self::new(&[0o133, 0o171, 0o165]).expect("valid generators")
    }

    pub fn generators(&self) -> &[u32] {
        &self.generators
    }

    pub fn outputs_per_bit(&self) -> usize {
        self.generators.len()
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn states(&self) -> usize {
        self.next_state.len()
    }

    /// Terminated codeword length for `info_bits` input bits.
    pub fn coded_len(&self, info_bits: usize) -> usize {
        self.outputs_per_bit() * (info_bits + self.memory)
    }

    #[inline]
    pub fn next_state(&self, state: usize, input: usize) -> usize {
        self.next_state[state][input]
    }

    /// Output bits of a branch, bit `j` belonging to generator `j`.
    #[inline]
    pub fn output(&self, state: usize, input: usize) -> u32 {
        self.outputs[state][input]
    }

    /// Terminated encoding: the register is flushed with `memory` zeros and the
    /// generator outputs are interleaved per input bit.
    pub fn encode(&self, info: &[u8]) -> Vec<u8> {
        let n = self.outputs_per_bit();
        let mut out = Vec::with_capacity(self.coded_len(info.len()));
        let mut state = 0;
        for &u in info.iter().chain(std::iter::repeat(&0).take(self.memory)) {
            let u = (u & 1) as usize;
            let o = self.outputs[state][u];
            out.extend((0..n).map(|j| ((o >> j) & 1) as u8));
            state = self.next_state[state][u];
        }
        out
    }
}

pub fn encode(info: &[u8], code: &ConvCode) -> Vec<u8> {
    code.encode(info)
}

/// Seed-keyed uniform random permutation (Fisher-Yates over ChaCha8).
///
/// `interleave(c)[i] = c[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaver {
    perm: Vec<usize>,
}

impl Interleaver {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { perm }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn interleave<T: Copy>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x.len())?;
        Ok(self.perm.iter().map(|&p| x[p]).collect())
    }

    pub fn deinterleave<T: Copy + Default>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x.len())?;
        let mut out = vec![T::default(); x.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = x[i];
        }
        Ok(out)
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.perm.len() {
            return Err(invalid(format!("interleaver of length {} applied to {len} entries", self.perm.len())));
        }
        Ok(())
    }
}

/// Gray QPSK mapping of consecutive bit pairs.
pub fn map_qpsk(bits: &[u8]) -> Result<Vec<C64>> {
    if bits.len() % QPSK_BITS != 0 {
        return Err(invalid(format!("QPSK mapping needs an even number of bits, got {}", bits.len())));
    }
    Ok(bits.chunks(2).map(|b| QPSK[(2 * (b[0] & 1) + (b[1] & 1)) as usize]).collect())
}

/// Pilot sequence of user `user`, reproducible by every receiver.
pub fn make_pilots(pilot_seed: u64, user: usize, len: usize) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pilot_seed, user as u64));
    (0..len).map(|_| QPSK[rng.gen_range(0..4)]).collect()
}

/// `L` evenly spaced positions in `[0, total)`: the 1-based index of pilot
/// `m` is `round((m − 0.5)·total/L)`, bumped upward past its predecessor.
pub fn evenly_spaced_pilots(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(invalid(format!("cannot place {count} pilots among {total} symbols")));
    }
    let mut out: Vec<usize> = Vec::with_capacity(count);
    for m in 1..=count {
        let mut j = ((m as f64 - 0.5) * total as f64 / count as f64).round() as usize;
        j = j.max(1);
        if let Some(&prev) = out.last() {
            j = j.max(prev + 2);
        }
        out.push(j - 1);
    }
    if *out.last().unwrap() >= total {
        return Err(invalid("pilot placement overflowed the frame"));
    }
    Ok(out)
}

/// Frame layout shared by all users.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub users: usize,
    pub info_bits: usize,
    pub coded_bits: usize,
    pub bits_per_symbol: usize,
    pub data_symbols: usize,
    pub pilot_count: usize,
    /// Zero-based data positions, ascending.
    pub data_indices: Vec<usize>,
    /// Zero-based pilot positions, ascending.
    pub pilot_indices: Vec<usize>,
    pub interleaver_seed: u64,
    pub pilot_seed: u64,
}

impl FrameConfig {
    /// Sizes the frame around the terminated codeword of `info_bits` bits and
    /// places `pilot_count` evenly spaced pilots. `info_bits = 0` gives a
    /// pilot-only frame.
    pub fn new(users: usize, info_bits: usize, pilot_count: usize, code: &ConvCode, interleaver_seed: u64, pilot_seed: u64) -> Result<Self> {
        if users == 0 || users > 255 {
            return Err(invalid(format!("user count {users} out of range")));
        }
        let coded_bits = if info_bits == 0 { 0 } else { code.coded_len(info_bits) };
        if coded_bits % QPSK_BITS != 0 {
            return Err(invalid(format!("{coded_bits} coded bits do not fill whole QPSK symbols")));
        }
        let data_symbols = coded_bits / QPSK_BITS;
        let total = data_symbols + pilot_count;
        let pilot_indices = evenly_spaced_pilots(total, pilot_count)?;
        let mut is_pilot = vec![false; total];
        pilot_indices.iter().for_each(|&p| is_pilot[p] = true);
        let data_indices = (0..total).filter(|&i| !is_pilot[i]).collect();
        let cfg = Self {
            users,
            info_bits,
            coded_bits,
            bits_per_symbol: QPSK_BITS,
            data_symbols,
            pilot_count,
            data_indices,
            pilot_indices,
            interleaver_seed,
            pilot_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_symbols(&self) -> usize {
        self.data_symbols + self.pilot_count
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total_symbols();
        if self.coded_bits != self.bits_per_symbol * self.data_symbols {
            return Err(invalid("coded bit count must equal bits per symbol times data symbols"));
        }
        if self.data_indices.len() != self.data_symbols || self.pilot_indices.len() != self.pilot_count {
            return Err(invalid("index set sizes disagree with N and L"));
        }
        let mut seen = vec![false; total];
        for &i in self.data_indices.iter().chain(&self.pilot_indices) {
            if i >= total || seen[i] {
                return Err(invalid("data and pilot indices must partition the frame"));
            }
            seen[i] = true;
        }
        if !self.data_indices.windows(2).all(|w| w[0] < w[1]) || !self.pilot_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("index sets must be ascending"));
        }
        Ok(())
    }
}

/// Per-user transmit data of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmittedFrame {
    pub u: Vec<Vec<u8>>,
    /// Coded and interleaved bits, in symbol order.
    pub c: Vec<Vec<u8>>,
    pub x: Vec<Vec<C64>>,
}

/// Code, interleavers and pilots of every user for one frame layout.
#[derive(Debug, Clone)]
pub struct TxChain {
    pub config: FrameConfig,
    pub code: ConvCode,
    pub interleavers: Vec<Interleaver>,
    pub pilots: Vec<Vec<C64>>,
}

impl TxChain {
    pub fn new(config: FrameConfig, code: ConvCode) -> Result<Self> {
        config.validate()?;
        let interleavers = (0..config.users)
            .map(|k| Interleaver::new(config.coded_bits, mix_seed(config.interleaver_seed, k as u64)))
            .collect();
        let pilots = (0..config.users).map(|k| make_pilots(config.pilot_seed, k, config.pilot_count)).collect();
        Ok(Self { config, code, interleavers, pilots })
    }

    pub fn assemble_frame(&self, u: Vec<Vec<u8>>) -> Result<TransmittedFrame> {
        assemble_frame(u, self)
    }
}

/// Encodes, interleaves and maps each user's bits, then multiplexes pilots
/// at the pilot positions and data symbols at the data positions.
pub fn assemble_frame(u: Vec<Vec<u8>>, chain: &TxChain) -> Result<TransmittedFrame> {
    let cfg = &chain.config;
    if u.len() != cfg.users {
        return Err(invalid(format!("expected {} users, got {}", cfg.users, u.len())));
    }
    let mut c = Vec::with_capacity(cfg.users);
    let mut x = Vec::with_capacity(cfg.users);
    for (k, bits) in u.iter().enumerate() {
        if bits.len() != cfg.info_bits {
            return Err(invalid(format!("user {k} has {} info bits, expected {}", bits.len(), cfg.info_bits)));
        }
        let coded = if cfg.coded_bits == 0 { Vec::new() } else { chain.interleavers[k].interleave(&chain.code.encode(bits))? };
        let data = map_qpsk(&coded)?;
        let mut frame = vec![C64::new(0.0, 0.0); cfg.total_symbols()];
        for (&i, &p) in cfg.pilot_indices.iter().zip(&chain.pilots[k]) {
            frame[i] = p;
        }
        for (&i, &d) in cfg.data_indices.iter().zip(&data) {
            frame[i] = d;
        }
        c.push(coded);
        x.push(frame);
    }
    Ok(TransmittedFrame { u, c, x })
}
