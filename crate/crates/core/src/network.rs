//! Point-to-point links and the recovery wire protocol.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic u16 = 0x5354 | kind u8 | src u64 | dst u64 | seq u32 | len u32 | payload | crc32
//! ```
//!
//! The CRC is CRC-32/IEEE (reflected 0x04C11DB7) over every preceding byte.
//! `RecoveryRequest` carries the opaque auth token as its payload.
//! `RecoveryComplete` carries the image summary `total u64 | bootloader u64 |
//! digest u64` and closes a stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u64;

/// Destination of a request that the network layer routes to a donor.
pub const BROADCAST: NodeId = u64::MAX;
pub const FRAME_MAGIC: u16 = 0x5354;
/// Header and checksum bytes added to every payload.
pub const FRAME_OVERHEAD: usize = 2 + 1 + 8 + 8 + 4 + 4 + 4;
pub const DEFAULT_SUPPLY_VOLTAGE: f64 = 5.0;
pub const UART_DEFAULT_RATE: f64 = 115_200.0;

const NS_PER_S: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("link {a}-{b} is down at t = {time_ns} ns")]
    LinkDown { a: NodeId, b: NodeId, time_ns: u64 },
    #[error("invalid link parameters: {0}")]
    InvalidParams(String),
    #[error("send time {send_ns} ns precedes link clock {clock_ns} ns")]
    SendInPast { send_ns: u64, clock_ns: u64 },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Ethernet,
    Wifi,
    Uart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    pub kind: LinkKind,
    /// bits/s
    pub data_rate: f64,
    /// J/bit
    pub energy_per_bit: f64,
    /// V
    pub supply_voltage: f64,
    /// A drawn by the interface while transferring; reported only.
    pub extra_current: f64,
    /// s
    pub propagation_delay: f64,
}

impl LinkParams {
    /// 89 Mbps at 8.44 nJ/bit, 0.37 A extra draw.
    pub fn ethernet() -> Self {
        LinkParams {
            kind: LinkKind::Ethernet,
            data_rate: 89e6,
            energy_per_bit: 8.44e-9,
            supply_voltage: DEFAULT_SUPPLY_VOLTAGE,
            extra_current: 0.37,
            propagation_delay: 0.0,
        }
    }

    /// 782 Kbps at 190 nJ/bit, 0.35 A extra draw.
    pub fn wifi() -> Self {
        LinkParams {
            kind: LinkKind::Wifi,
            data_rate: 782e3,
            energy_per_bit: 190e-9,
            supply_voltage: DEFAULT_SUPPLY_VOLTAGE,
            extra_current: 0.35,
            propagation_delay: 0.0,
        }
    }

    /// No energy calibration exists for the serial link.
    pub fn uart() -> Self {
        LinkParams {
            kind: LinkKind::Uart,
            data_rate: UART_DEFAULT_RATE,
            energy_per_bit: 0.0,
            supply_voltage: DEFAULT_SUPPLY_VOLTAGE,
            extra_current: 0.0,
            propagation_delay: 0.0,
        }
    }

    pub fn defaults_for(kind: LinkKind) -> Self {
        match kind {
            LinkKind::Ethernet => Self::ethernet(),
            LinkKind::Wifi => Self::wifi(),
            LinkKind::Uart => Self::uart(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::InvalidParams(m.into()));
        if !(self.data_rate > 0.0 && self.data_rate.is_finite()) {
            return bad("data_rate must be positive");
        }
        if !(self.energy_per_bit >= 0.0 && self.energy_per_bit.is_finite()) {
            return bad("energy_per_bit must be non-negative");
        }
        if !(self.supply_voltage >= 0.0 && self.extra_current >= 0.0) {
            return bad("supply_voltage and extra_current must be non-negative");
        }
        if !(self.propagation_delay >= 0.0 && self.propagation_delay.is_finite()) {
            return bad("propagation_delay must be non-negative");
        }
        Ok(())
    }

    /// Whole nanoseconds to clock `bits` onto the wire.
    pub fn serialization_ns(&self, bits: u64) -> u64 {
        (bits as f64 / self.data_rate * NS_PER_S).round() as u64
    }

    pub fn propagation_ns(&self) -> u64 {
        (self.propagation_delay * NS_PER_S).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferCost {
    /// s
    pub latency: f64,
    /// J
    pub energy: f64,
}

/// Cost of moving `bytes` raw bytes in one go, with no framing.
pub fn transfer_cost(bytes: u64, link: &LinkParams) -> TransferCost {
    let bits = 8 * bytes;
    TransferCost {
        latency: bits as f64 / link.data_rate + link.propagation_delay,
        energy: bits as f64 * link.energy_per_bit,
    }
}

/// Cost of a payload split into `chunk_size` frames, each carrying
/// [`FRAME_OVERHEAD`] extra bytes.
pub fn framed_transfer_cost(payload: u64, chunk_size: u64, link: &LinkParams) -> TransferCost {
    assert!(chunk_size > 0);
    let frames = payload.div_ceil(chunk_size);
    transfer_cost(payload + frames * FRAME_OVERHEAD as u64, link)
}

/// Energy implied by the interface's extra current over `latency` seconds.
pub fn current_model_energy(link: &LinkParams, latency: f64) -> f64 {
    link.extra_current * link.supply_voltage * latency
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageBody {
    RecoveryRequest { auth_token: Vec<u8> },
    FirmwareChunk { seq: u32, payload: Vec<u8> },
    RecoveryComplete { total_len: u64, bootloader_len: u64, digest: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub body: MessageBody,
}

impl Message {
    pub fn kind_code(&self) -> u8 {
        match self.body {
            MessageBody::RecoveryRequest { .. } => 1,
            MessageBody::FirmwareChunk { .. } => 2,
            MessageBody::RecoveryComplete { .. } => 3,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.body {
            MessageBody::RecoveryRequest { .. } => "recovery_request",
            MessageBody::FirmwareChunk { .. } => "firmware_chunk",
            MessageBody::RecoveryComplete { .. } => "recovery_complete",
        }
    }

    fn seq_and_payload(&self) -> (u32, Vec<u8>) {
        match &self.body {
            MessageBody::RecoveryRequest { auth_token } => (0, auth_token.clone()),
            MessageBody::FirmwareChunk { seq, payload } => (*seq, payload.clone()),
            MessageBody::RecoveryComplete { total_len, bootloader_len, digest } => {
                let mut p = Vec::with_capacity(24);
                p.extend_from_slice(&total_len.to_le_bytes());
                p.extend_from_slice(&bootloader_len.to_le_bytes());
                p.extend_from_slice(&digest.to_le_bytes());
                (0, p)
            }
        }
    }

    pub fn payload_len(&self) -> usize {
        match &self.body {
            MessageBody::RecoveryRequest { auth_token } => auth_token.len(),
            MessageBody::FirmwareChunk { payload, .. } => payload.len(),
            MessageBody::RecoveryComplete { .. } => 24,
        }
    }

    /// Bytes on the wire.
    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload_len()
    }
}

pub fn frame(msg: &Message) -> Vec<u8> {
    let (seq, payload) = msg.seq_and_payload();
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    out.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
    out.push(msg.kind_code());
    out.extend_from_slice(&msg.src.to_le_bytes());
    out.extend_from_slice(&msg.dst.to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn parse(bytes: &[u8]) -> Result<Message> {
    let bad = |m: String| Err(NetworkError::MalformedFrame(m));
    if bytes.len() < FRAME_OVERHEAD {
        return bad(format!("{} bytes is shorter than a header", bytes.len()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
    if magic != FRAME_MAGIC {
        return bad(format!("bad magic {magic:#06x}"));
    }
    let kind = bytes[2];
    let src = u64_at(3);
    let dst = u64_at(11);
    let seq = u32_at(19);
    let len = u32_at(23) as usize;
    if bytes.len() != FRAME_OVERHEAD + len {
        return bad(format!("length field {len} does not match frame of {} bytes", bytes.len()));
    }
    let body_end = 27 + len;
    let crc = u32_at(body_end);
    if crc32fast::hash(&bytes[..body_end]) != crc {
        return bad("checksum mismatch".into());
    }
    let payload = bytes[27..body_end].to_vec();
    let body = match kind {
        1 if seq == 0 => MessageBody::RecoveryRequest { auth_token: payload },
        2 => MessageBody::FirmwareChunk { seq, payload },
        3 if seq == 0 && len == 24 => {
            let w = |i: usize| u64::from_le_bytes(payload[i..i + 8].try_into().unwrap());
            MessageBody::RecoveryComplete { total_len: w(0), bootloader_len: w(8), digest: w(16) }
        }
        _ => return bad(format!("invalid kind {kind} for seq {seq}, length {len}")),
    };
    Ok(Message { src, dst, body })
}

/// Scheduled passage of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delivery {
    /// First bit leaves the sender.
    pub start_ns: u64,
    /// Last bit leaves the sender; the transmitter is free again.
    pub tx_done_ns: u64,
    pub arrival_ns: u64,
    pub bits: u64,
    pub energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkAccounting {
    pub messages: u64,
    pub bits: u64,
    pub energy: f64,
    /// s the link spent transmitting
    pub busy_time: f64,
    pub current_model_energy: f64,
}

/// A bidirectional link with one FIFO transmitter per direction.
#[derive(Clone, Debug)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub params: LinkParams,
    /// Half-open `[start, end)` windows in ns.
    pub outages: Vec<(u64, u64)>,
    busy_until: [u64; 2],
    pub accounting: LinkAccounting,
    busy_ns: u64,
}

impl Link {
    pub fn new(a: NodeId, b: NodeId, params: LinkParams, outages: Vec<(u64, u64)>) -> Self {
        Link { a, b, params, outages, busy_until: [0; 2], accounting: LinkAccounting::default(), busy_ns: 0 }
    }

    pub fn connects(&self, x: NodeId, y: NodeId) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }

    pub fn peer_of(&self, x: NodeId) -> Option<NodeId> {
        if self.a == x {
            Some(self.b)
        } else if self.b == x {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn is_up(&self, t: u64) -> bool {
        !self.outages.iter().any(|&(s, e)| s <= t && t < e)
    }

    fn down_during(&self, from: u64, to: u64) -> bool {
        self.outages.iter().any(|&(s, e)| s < to.max(from + 1) && from < e)
    }

    /// Time at which a frame from `src` could start transmitting.
    pub fn free_at(&self, src: NodeId) -> u64 {
        self.busy_until[(src != self.a) as usize]
    }

    /// Queues `msg` behind earlier frames in the same direction.
    pub fn deliver(&mut self, msg: &Message, send_ns: u64) -> Result<Delivery> {
        let dir = (msg.src != self.a) as usize;
        let bits = 8 * msg.wire_len() as u64;
        let start = send_ns.max(self.busy_until[dir]);
        let tx_done = start + self.params.serialization_ns(bits);
        let arrival = tx_done + self.params.propagation_ns();
        if self.down_during(send_ns, arrival) {
            return Err(NetworkError::LinkDown { a: self.a, b: self.b, time_ns: send_ns });
        }
        self.busy_until[dir] = tx_done;
        let energy = bits as f64 * self.params.energy_per_bit;
        self.busy_ns += tx_done - start;
        let acc = &mut self.accounting;
        acc.messages += 1;
        acc.bits += bits;
        acc.energy += energy;
        acc.busy_time = self.busy_ns as f64 / NS_PER_S;
        acc.current_model_energy = current_model_energy(&self.params, acc.busy_time);
        Ok(Delivery { start_ns: start, tx_done_ns: tx_done, arrival_ns: arrival, bits, energy })
    }
}
