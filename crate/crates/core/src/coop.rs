//! Receiver cooperation: exchange packets, their wire format, transports and
//! the per-frame scheduler that alternates local iterations with exchange
//! stages.

use crate::error::{Error, Result};
use crate::msg::{bit_message_product, BitSoftMessage, C64};
use crate::rx::{Diagnostics, Genie, ReceiverSetup, ReceiverState, Received};

pub const MAGIC: &[u8; 4] = b"CIC1";
pub const HEADER_LEN: usize = 28;

fn protocol(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

/// Iteration count and the iterations after which receivers exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeSchedule {
    n_it: usize,
    times: Vec<usize>,
}

impl ExchangeSchedule {
    /// `times` are 1-based iteration indices in `[1, n_it − 1]`, strictly
    /// increasing. Iteration 1 is the initialization.
    pub fn new(n_it: usize, times: Vec<usize>) -> Result<Self> {
        if n_it == 0 {
            return Err(Error::InvalidArgument("at least one receiver iteration is required".into()));
        }
        if times.len() > n_it - 1 {
            return Err(Error::InvalidArgument(format!("{} exchanges do not fit into {n_it} iterations", times.len())));
        }
        if times.iter().any(|&t| t == 0 || t >= n_it) {
            return Err(Error::InvalidArgument(format!("exchange iterations must lie in [1, {}]", n_it - 1)));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("exchange iterations must be strictly increasing".into()));
        }
        Ok(Self { n_it, times })
    }

    pub fn no_exchange(n_it: usize) -> Result<Self> {
        Self::new(n_it, Vec::new())
    }

    pub fn iterations(&self) -> usize {
        self.n_it
    }

    pub fn exchanges(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// A receiver's demapper extrinsic about the recipient's own bits.
    DemapExtrinsic = 0,
    /// The owner's combined message about its own bits.
    OwnerCombined = 1,
}

impl Phase {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Phase::DemapExtrinsic),
            1 => Some(Phase::OwnerCombined),
            _ => None,
        }
    }
}

/// One exchanged message. The payload describes user `user_id`'s coded
/// bits in encoder output order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangePacket {
    pub frame_id: u64,
    pub stage: u16,
    pub sender: u8,
    pub recipient: u8,
    pub user_id: u8,
    pub phase: Phase,
    pub payload: BitSoftMessage,
}

impl ExchangePacket {
    pub fn validate(&self, users: usize, coded_bits: usize) -> Result<()> {
        let (s, r, u) = (self.sender as usize, self.recipient as usize, self.user_id as usize);
        if s >= users || r >= users {
            return Err(protocol(format!("receiver index out of range in packet {s} -> {r}")));
        }
        if s == r {
            return Err(protocol(format!("receiver {s} addressed a packet to itself")));
        }
        if u >= users {
            return Err(protocol(format!("packet for unknown user {u}")));
        }
        let owner = match self.phase {
            Phase::DemapExtrinsic => r,
            Phase::OwnerCombined => s,
        };
        if u != owner {
            return Err(protocol(format!("{:?} packet {s} -> {r} carries user {u}", self.phase)));
        }
        if self.payload.len() != coded_bits {
            return Err(protocol(format!("payload has {} bits, expected {coded_bits}", self.payload.len())));
        }
        Ok(())
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 4 * self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&self.stage.to_le_bytes());
        out.extend_from_slice(&[self.sender, self.recipient, self.user_id, self.phase as u8]);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0; 6]);
        for &p in self.payload.p1() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    /// Parses one packet from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let need = |offset: usize, len: usize| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or(Error::Parse { offset: bytes.len(), reason: format!("truncated: need {len} bytes at offset {offset}") })
        };
        if need(0, 4)? != MAGIC {
            return Err(Error::Parse { offset: 0, reason: "bad magic".into() });
        }
        let frame_id = u64::from_le_bytes(need(4, 8)?.try_into().unwrap());
        let stage = u16::from_le_bytes(need(12, 2)?.try_into().unwrap());
        let ids = need(14, 4)?;
        let phase = Phase::from_byte(ids[3]).ok_or(Error::Parse { offset: 17, reason: format!("unknown phase {}", ids[3]) })?;
        let count = u32::from_le_bytes(need(18, 4)?.try_into().unwrap()) as usize;
        if let Some(pos) = need(22, 6)?.iter().position(|&b| b != 0) {
            return Err(Error::Parse { offset: 22 + pos, reason: "reserved bytes must be zero".into() });
        }
        let body = need(HEADER_LEN, 4 * count)?;
        let mut p1 = Vec::with_capacity(count);
        for (j, chunk) in body.chunks_exact(4).enumerate() {
            let p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parse { offset: HEADER_LEN + 4 * j, reason: format!("probability {p} outside [0, 1]") });
            }
            p1.push(p);
        }
        let packet = Self { frame_id, stage, sender: ids[0], recipient: ids[1], user_id: ids[2], phase, payload: BitSoftMessage::new(p1)? };
        Ok((packet, HEADER_LEN + 4 * count))
    }
}

/// Delivery between receivers. Packets are buffered per (sender,
/// recipient) pair and handed out in ascending sender order.
pub trait Transport {
    fn send(&mut self, packet: &ExchangePacket) -> Result<()>;
    fn receive(&mut self, recipient: usize) -> Result<Vec<ExchangePacket>>;
}

/// Direct hand-over of packet values.
#[derive(Debug, Clone)]
pub struct InMemoryTransport {
    queues: Vec<Vec<Vec<ExchangePacket>>>,
}

impl InMemoryTransport {
    pub fn new(users: usize) -> Self {
        Self { queues: vec![vec![Vec::new(); users]; users] }
    }
}

fn slot<T>(table: &mut [Vec<T>], recipient: usize, sender: usize) -> Result<&mut T> {
    table
        .get_mut(recipient)
        .and_then(|row| row.get_mut(sender))
        .ok_or_else(|| protocol(format!("no link from {sender} to {recipient}")))
}

impl Transport for InMemoryTransport {
    fn send(&mut self, packet: &ExchangePacket) -> Result<()> {
        // Same precision as the wire so both transports agree exactly.
        let mut packet = packet.clone();
        packet.payload = packet.payload.to_f32_precision();
        slot(&mut self.queues, packet.recipient as usize, packet.sender as usize)?.push(packet);
        Ok(())
    }

    fn receive(&mut self, recipient: usize) -> Result<Vec<ExchangePacket>> {
        let row = self.queues.get_mut(recipient).ok_or_else(|| protocol(format!("unknown recipient {recipient}")))?;
        Ok(row.iter_mut().flat_map(std::mem::take).collect())
    }
}

/// Packets serialized into per-link byte streams and parsed on receipt.
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    streams: Vec<Vec<Vec<u8>>>,
    bytes_sent: usize,
}

impl LoopbackTransport {
    pub fn new(users: usize) -> Self {
        Self { streams: vec![vec![Vec::new(); users]; users], bytes_sent: 0 }
    }

    pub fn bytes_sent(&self) -> usize {
        self.bytes_sent
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, packet: &ExchangePacket) -> Result<()> {
        let bytes = packet.encode();
        self.bytes_sent += bytes.len();
        slot(&mut self.streams, packet.recipient as usize, packet.sender as usize)?.extend_from_slice(&bytes);
        Ok(())
    }

    fn receive(&mut self, recipient: usize) -> Result<Vec<ExchangePacket>> {
        let row = self.streams.get_mut(recipient).ok_or_else(|| protocol(format!("unknown recipient {recipient}")))?;
        let mut out = Vec::new();
        for stream in row.iter_mut() {
            let bytes = std::mem::take(stream);
            let mut pos = 0;
            while pos < bytes.len() {
                let (packet, used) = ExchangePacket::decode(&bytes[pos..]).map_err(|e| match e {
                    Error::Parse { offset, reason } => Error::Parse { offset: pos + offset, reason },
                    other => other,
                })?;
                out.push(packet);
                pos += used;
            }
        }
        Ok(out)
    }
}

/// Receiver `state`'s demapper extrinsic about user `k`'s bits, addressed to
/// receiver `k`.
pub fn build_owner_bound(state: &ReceiverState, setup: &ReceiverSetup, k: usize, frame_id: u64, stage: u16) -> Result<ExchangePacket> {
    let l = state.index;
    if k == l || k >= state.users() {
        return Err(protocol(format!("receiver {l} cannot send owner-bound packet to {k}")));
    }
    let ext = state.demap_ext[k].as_ref().ok_or_else(|| protocol(format!("receiver {l} has no demapper extrinsic for user {k}")))?;
    let payload = BitSoftMessage::new(setup.chain.interleavers[k].deinterleave(ext.p1())?)?;
    Ok(ExchangePacket { frame_id, stage, sender: l as u8, recipient: k as u8, user_id: k as u8, phase: Phase::DemapExtrinsic, payload })
}

/// Receiver `state`'s combined message about its own bits for receiver `k`:
/// own demapper extrinsic times decoder extrinsic times the demapper
/// extrinsics received in this stage from every receiver other than `k`.
pub fn build_peer_bound(state: &ReceiverState, setup: &ReceiverSetup, k: usize, frame_id: u64, stage: u16) -> Result<ExchangePacket> {
    let l = state.index;
    if k == l || k >= state.users() {
        return Err(protocol(format!("receiver {l} cannot send owner-combined packet to {k}")));
    }
    let own = state.demap_ext[l].as_ref().ok_or_else(|| protocol(format!("receiver {l} has no own demapper extrinsic")))?;
    let dec = state.coded_extrinsic.as_ref().ok_or_else(|| protocol(format!("receiver {l} has not decoded yet")))?;
    let mut inputs = vec![own, dec];
    for (j, slot) in state.owner_in.iter().enumerate() {
        if j == l || j == k {
            continue;
        }
        match slot {
            Some(r) if r.stage == stage => inputs.push(&r.payload),
            _ => return Err(protocol(format!("receiver {l} is missing stage {stage} input from receiver {j}"))),
        }
    }
    let (product, _) = bit_message_product(&inputs)?;
    let payload = BitSoftMessage::new(setup.chain.interleavers[l].deinterleave(product.p1())?)?;
    Ok(ExchangePacket { frame_id, stage, sender: l as u8, recipient: k as u8, user_id: l as u8, phase: Phase::OwnerCombined, payload })
}

/// Stores validated packets of the current stage in the receiver's
/// exchange buffers, which persist until overwritten by a later stage.
pub fn apply_incoming(state: &mut ReceiverState, setup: &ReceiverSetup, packets: &[ExchangePacket], frame_id: u64, stage: u16) -> Result<()> {
    let cfg = &setup.chain.config;
    for p in packets {
        p.validate(cfg.users, cfg.coded_bits)?;
        if p.recipient as usize != state.index {
            return Err(protocol(format!("packet for receiver {} delivered to {}", p.recipient, state.index)));
        }
        if p.frame_id != frame_id || p.stage != stage {
            return Err(protocol(format!("packet from frame {} stage {} arrived during frame {frame_id} stage {stage}", p.frame_id, p.stage)));
        }
        let sender = p.sender as usize;
        let user = p.user_id as usize;
        let buffer = match p.phase {
            Phase::DemapExtrinsic => &mut state.owner_in[sender],
            Phase::OwnerCombined => &mut state.peer_in[sender],
        };
        if matches!(buffer, Some(r) if r.stage == stage) {
            return Err(protocol(format!("duplicate {:?} packet from {sender} in stage {stage}", p.phase)));
        }
        let payload = BitSoftMessage::new(setup.chain.interleavers[user].interleave(p.payload.p1())?)?;
        *buffer = Some(Received { stage, payload });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub frame_id: u64,
    /// Process receivers in descending index order.
    pub reverse_order: bool,
}

/// Result of one frame across all receivers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// `errors[t][k]`: information-bit errors of user `k` after iteration `t + 1`.
    pub errors: Vec<Vec<usize>>,
    /// Final hard decisions per user.
    pub decisions: Vec<Vec<u8>>,
    pub packets: usize,
    pub diagnostics: Diagnostics,
}

fn count_errors(states: &[ReceiverState], truth: &[Vec<u8>]) -> Result<Vec<usize>> {
    states
        .iter()
        .zip(truth)
        .map(|(s, u)| {
            let d = s.decisions().ok_or_else(|| protocol("receiver has not decoded"))?;
            Ok(d.iter().zip(u).filter(|(a, b)| a != b).count())
        })
        .collect()
}

/// Runs all receivers of one frame: initialization, then local iterations
/// with exchange stages after the scheduled iterations.
///
/// `y[l]` is receiver `l`'s observation, `truth[k]` user `k`'s information
/// bits (only used to count errors).
pub fn run_frame(
    setup: &ReceiverSetup,
    schedule: &ExchangeSchedule,
    y: Vec<Vec<C64>>,
    genies: Vec<Genie>,
    truth: &[Vec<u8>],
    transport: &mut dyn Transport,
    options: RunOptions,
) -> Result<FrameOutcome> {
    let users = setup.users();
    if y.len() != users || genies.len() != users || truth.len() != users {
        return Err(Error::InvalidArgument(format!("expected inputs for {users} receivers")));
    }
    let mut states = y
        .into_iter()
        .zip(genies)
        .enumerate()
        .map(|(l, (y, g))| ReceiverState::new(setup, l, y, g))
        .collect::<Result<Vec<_>>>()?;
    let order: Vec<usize> = if options.reverse_order { (0..users).rev().collect() } else { (0..users).collect() };
    let frame_id = options.frame_id;

    for &l in &order {
        states[l].initialize(setup)?;
    }
    let mut errors = vec![count_errors(&states, truth)?];
    let mut packets = 0;
    let mut next_exchange = schedule.times().iter().peekable();
    let mut stage: u16 = 0;
    for t in 1..schedule.iterations() {
        if next_exchange.next_if_eq(&&t).is_some() {
            stage += 1;
            for build in [build_owner_bound, build_peer_bound] {
                // Every packet of a phase is built before any is delivered.
                for &l in &order {
                    for k in (0..users).filter(|&k| k != l) {
                        transport.send(&build(&states[l], setup, k, frame_id, stage)?)?;
                        packets += 1;
                    }
                }
                for &l in &order {
                    let incoming = transport.receive(l)?;
                    apply_incoming(&mut states[l], setup, &incoming, frame_id, stage)?;
                }
            }
        }
        for &l in &order {
            states[l].local_iteration(setup)?;
        }
        errors.push(count_errors(&states, truth)?);
    }

    let mut diagnostics = Diagnostics::default();
    for s in &states {
        diagnostics += s.diagnostics;
    }
    let decisions = states.iter().map(|s| s.decisions().unwrap_or_default()).collect();
    Ok(FrameOutcome { errors, decisions, packets, diagnostics })
}
