//! MCU state machine of one node and its EPROM recovery routines.
//!
//! States and edges:
//!
//! ```text
//! S0 -PowerOn-> S1 -IntegrityPass-> S2 -BootloaderDone-> S3 <-BusAccess/BusRelease-> S4
//! S1 -IntegrityFail-> S6
//! S3,S4 -SaveForRecovery-> S5 -RebootToRequest-> S6 | -RebootToAssist-> S7
//! S6,S7 -Reboot-> S1
//! S1..S7 -PowerOff-> S0
//! ```
//!
//! Boot (S1 → S2 → S3) completes within a single call. HALT does not change
//! the state; it freezes the application in S3/S4.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{ExecutionState, EpromLayout, FirmwareImage, IntegrityReport, MemoryError, SttramArray, SyntheticFirmware, fnv1a64};
use crate::network::{Message, MessageBody, NodeId, BROADCAST};

pub const DEFAULT_CHUNK_SIZE: usize = 1024;
pub const DEFAULT_INSTRUCTIONS_PER_SECOND: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum McuState {
    #[serde(rename = "S0")]
    PoweredOff,
    #[serde(rename = "S1")]
    PowerOnBoot,
    #[serde(rename = "S2")]
    Bootloader,
    #[serde(rename = "S3")]
    Executing,
    #[serde(rename = "S4")]
    BusAccess,
    #[serde(rename = "S5")]
    SavingState,
    #[serde(rename = "S6")]
    SupportRequest,
    #[serde(rename = "S7")]
    SupportAssist,
}

impl McuState {
    pub const ALL: [McuState; 8] = [
        McuState::PoweredOff,
        McuState::PowerOnBoot,
        McuState::Bootloader,
        McuState::Executing,
        McuState::BusAccess,
        McuState::SavingState,
        McuState::SupportRequest,
        McuState::SupportAssist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        ["S0", "S1", "S2", "S3", "S4", "S5", "S6", "S7"][self.index()]
    }

    pub fn is_running(self) -> bool {
        matches!(self, McuState::Executing | McuState::BusAccess)
    }
}

impl fmt::Display for McuState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McuEvent {
    PowerOn,
    PowerOff,
    IntegrityPass,
    IntegrityFail,
    BootloaderDone,
    BusAccess,
    BusRelease,
    SaveForRecovery,
    RebootToRequest,
    RebootToAssist,
    Reboot,
}

impl McuEvent {
    pub const ALL: [McuEvent; 11] = [
        McuEvent::PowerOn,
        McuEvent::PowerOff,
        McuEvent::IntegrityPass,
        McuEvent::IntegrityFail,
        McuEvent::BootloaderDone,
        McuEvent::BusAccess,
        McuEvent::BusRelease,
        McuEvent::SaveForRecovery,
        McuEvent::RebootToRequest,
        McuEvent::RebootToAssist,
        McuEvent::Reboot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            McuEvent::PowerOn => "power_on",
            McuEvent::PowerOff => "power_off",
            McuEvent::IntegrityPass => "integrity_pass",
            McuEvent::IntegrityFail => "integrity_fail",
            McuEvent::BootloaderDone => "bootloader_done",
            McuEvent::BusAccess => "bus_access",
            McuEvent::BusRelease => "bus_release",
            McuEvent::SaveForRecovery => "save_for_recovery",
            McuEvent::RebootToRequest => "reboot_to_request",
            McuEvent::RebootToAssist => "reboot_to_assist",
            McuEvent::Reboot => "reboot",
        }
    }
}

use McuEvent as E;
use McuState as S;

/// The complete edge set.
pub const EDGES: [(McuState, McuEvent, McuState); 19] = [
    (S::PoweredOff, E::PowerOn, S::PowerOnBoot),
    (S::PowerOnBoot, E::IntegrityPass, S::Bootloader),
    (S::PowerOnBoot, E::IntegrityFail, S::SupportRequest),
    (S::Bootloader, E::BootloaderDone, S::Executing),
    (S::Executing, E::BusAccess, S::BusAccess),
    (S::BusAccess, E::BusRelease, S::Executing),
    (S::Executing, E::SaveForRecovery, S::SavingState),
    (S::BusAccess, E::SaveForRecovery, S::SavingState),
    (S::SavingState, E::RebootToRequest, S::SupportRequest),
    (S::SavingState, E::RebootToAssist, S::SupportAssist),
    (S::SupportRequest, E::Reboot, S::PowerOnBoot),
    (S::SupportAssist, E::Reboot, S::PowerOnBoot),
    (S::PowerOnBoot, E::PowerOff, S::PoweredOff),
    (S::Bootloader, E::PowerOff, S::PoweredOff),
    (S::Executing, E::PowerOff, S::PoweredOff),
    (S::BusAccess, E::PowerOff, S::PoweredOff),
    (S::SavingState, E::PowerOff, S::PoweredOff),
    (S::SupportRequest, E::PowerOff, S::PoweredOff),
    (S::SupportAssist, E::PowerOff, S::PoweredOff),
];

/// Successor of `state` under `event`, or `IllegalTransition`.
pub fn transition(state: McuState, event: McuEvent) -> Result<McuState> {
    let next = match (state, event) {
        (S::PoweredOff, E::PowerOn) => S::PowerOnBoot,
        (S::PowerOnBoot, E::IntegrityPass) => S::Bootloader,
        (S::PowerOnBoot, E::IntegrityFail) => S::SupportRequest,
        (S::Bootloader, E::BootloaderDone) => S::Executing,
        (S::Executing, E::BusAccess) => S::BusAccess,
        (S::BusAccess, E::BusRelease) => S::Executing,
        (S::Executing | S::BusAccess, E::SaveForRecovery) => S::SavingState,
        (S::SavingState, E::RebootToRequest) => S::SupportRequest,
        (S::SavingState, E::RebootToAssist) => S::SupportAssist,
        (S::SupportRequest | S::SupportAssist, E::Reboot) => S::PowerOnBoot,
        (s, E::PowerOff) if s != S::PoweredOff => S::PoweredOff,
        _ => return Err(NodeError::IllegalTransition { state, trigger: event.name().into() }),
    };
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interrupt {
    Halt,
    HaltCleared,
    PRequest,
    PAssist { requester: NodeId },
}

impl Interrupt {
    pub fn name(self) -> &'static str {
        match self {
            Interrupt::Halt => "HALT",
            Interrupt::HaltCleared => "HALT_CLEARED",
            Interrupt::PRequest => "P_REQUEST",
            Interrupt::PAssist { .. } => "P_ASSIST",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Normal,
    SupportRequest,
    SupportAssist,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("illegal transition: {trigger} in {state}")]
    IllegalTransition { state: McuState, trigger: String },
    #[error("out-of-order chunk: expected seq {expected}, got {got}")]
    OutOfOrderChunk { expected: u32, got: u32 },
    #[error("donor {node} failed its own integrity check ({bits} sensor bits)")]
    DonorCorrupted { node: NodeId, bits: u64 },
    #[error("assist refused in {state} (halted: {halted})")]
    AssistRefused { state: McuState, halted: bool },
    #[error("application is halted")]
    Halted,
    #[error("stream ended after {received} of {expected} bytes")]
    IncompleteTransfer { expected: u64, received: u64 },
    #[error("recovered digest {got:016x} differs from donor digest {expected:016x}")]
    DigestMismatch { expected: u64, got: u64 },
    #[error("unexpected {0} message")]
    UnexpectedMessage(&'static str),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// Observable effects of a node operation, in the order they happened.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Transition { from: McuState, event: McuEvent, to: McuState },
    IntegrityChecked(IntegrityReport),
    StateSaved { program_counter: u64 },
    StateRestored { program_counter: u64 },
    CleanStart,
    Send(Message),
    ChunkWritten { seq: u32, offset: u64, len: usize },
    SensorsReset,
    RecoveryDone { bytes: u64, digest: u64 },
    AssistDone { bytes: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferProgress {
    pub peer: Option<NodeId>,
    pub next_index: u64,
    pub next_seq: u32,
    /// Known up front by a donor, at the end by a requester.
    pub total: Option<u64>,
}

impl TransferProgress {
    fn fresh(peer: Option<NodeId>, total: Option<u64>) -> Self {
        TransferProgress { peer, next_index: 0, next_seq: 0, total }
    }
}

/// Firmware store of a node: a materialized array, or a synthetic image of
/// which only a prefix lives in the array as a corruption witness.
#[derive(Clone, Debug)]
pub struct ProgramMemory {
    array: SttramArray,
    synthetic: Option<SyntheticStore>,
}

#[derive(Clone, Debug)]
struct SyntheticStore {
    image: SyntheticFirmware,
    bootloader_len: u64,
    identity: u64,
    prefix_digest: u64,
    complete: bool,
}

impl ProgramMemory {
    pub fn materialized(mut array: SttramArray, img: &FirmwareImage) -> Result<Self> {
        array.program_firmware(img)?;
        Ok(ProgramMemory { array, synthetic: None })
    }

    pub fn synthetic(mut array: SttramArray, image: SyntheticFirmware, bootloader_len: u64) -> Result<Self> {
        let prefix_len = image.size.min(array.data_capacity());
        let prefix = image.read(0, prefix_len as usize);
        array.write_data(0, &prefix)?;
        array.set_firmware_extent(bootloader_len.min(prefix_len), prefix_len);
        Ok(ProgramMemory {
            array,
            synthetic: Some(SyntheticStore {
                image,
                bootloader_len,
                identity: image.digest(),
                prefix_digest: fnv1a64([prefix.as_slice()]),
                complete: true,
            }),
        })
    }

    pub fn array(&self) -> &SttramArray {
        &self.array
    }

    pub fn array_mut(&mut self) -> &mut SttramArray {
        &mut self.array
    }

    pub fn is_synthetic(&self) -> bool {
        self.synthetic.is_some()
    }

    pub fn firmware_len(&self) -> u64 {
        match &self.synthetic {
            Some(s) => s.image.size,
            None => self.array.firmware_len(),
        }
    }

    pub fn bootloader_len(&self) -> u64 {
        match &self.synthetic {
            Some(s) => s.bootloader_len,
            None => self.array.bootloader_len(),
        }
    }

    /// Firmware digest. A synthetic image reports its identity while the
    /// array prefix is intact and the last rewrite completed.
    pub fn digest(&self) -> u64 {
        let d = self.array.firmware_digest();
        match &self.synthetic {
            Some(s) if s.complete && d == s.prefix_digest => s.identity,
            Some(s) => !s.identity ^ d,
            None => d,
        }
    }

    pub fn read(&self, offset: u64, len: usize) -> Vec<u8> {
        match &self.synthetic {
            Some(s) => s.image.read(offset, len),
            None => self.array.read_data(offset, len.min((self.array.firmware_len() - offset) as usize)),
        }
    }

    fn begin_rewrite(&mut self) {
        if let Some(s) = &mut self.synthetic {
            s.complete = false;
        }
    }

    fn write(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        match &self.synthetic {
            Some(_) => {
                let cap = self.array.firmware_len();
                if offset < cap {
                    let n = ((cap - offset) as usize).min(bytes.len());
                    self.array.write_data(offset, &bytes[..n])?;
                }
                Ok(())
            }
            None => Ok(self.array.write_data(offset, bytes)?),
        }
    }

    fn finish_rewrite(&mut self, total: u64, bootloader_len: u64, digest: u64) -> Result<u64> {
        match &mut self.synthetic {
            Some(s) => {
                s.image.size = total;
                s.bootloader_len = bootloader_len;
                s.identity = digest;
                s.complete = true;
            }
            None => self.array.set_firmware_extent(bootloader_len, total),
        }
        let got = self.digest();
        if got != digest {
            return Err(NodeError::DigestMismatch { expected: digest, got });
        }
        Ok(got)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub chunk_size: usize,
    pub integrity_poll_period_ns: u64,
    pub instructions_per_second: u64,
    pub auth_token: Vec<u8>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            integrity_poll_period_ns: 10_000,
            instructions_per_second: DEFAULT_INSTRUCTIONS_PER_SECOND,
            auth_token: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    state: McuState,
    mode: Mode,
    halted: bool,
    memory: ProgramMemory,
    eprom: EpromLayout,
    pending_transfer: Option<TransferProgress>,
    /// Drop chunks until a stream restarts at seq 0.
    resync: bool,
    donor_checked: bool,
    config: NodeConfig,
    pc_base: u64,
    running_since: Option<u64>,
}

impl Node {
    pub fn new(id: NodeId, memory: ProgramMemory, config: NodeConfig) -> Self {
        assert!(config.chunk_size > 0);
        Node {
            id,
            state: McuState::PoweredOff,
            mode: Mode::Normal,
            halted: false,
            memory,
            eprom: EpromLayout::default(),
            pending_transfer: None,
            resync: false,
            donor_checked: false,
            config,
            pc_base: 0,
            running_since: None,
        }
    }

    pub fn state(&self) -> McuState {
        self.state
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn memory(&self) -> &ProgramMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut ProgramMemory {
        &mut self.memory
    }

    pub fn eprom(&self) -> &EpromLayout {
        &self.eprom
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn pending_transfer(&self) -> Option<&TransferProgress> {
        self.pending_transfer.as_ref()
    }

    pub fn program_counter(&self, now: u64) -> u64 {
        match self.running_since {
            Some(t0) => {
                let elapsed = now.saturating_sub(t0) as u128;
                self.pc_base + (elapsed * self.config.instructions_per_second as u128 / 1_000_000_000) as u64
            }
            None => self.pc_base,
        }
    }

    fn freeze(&mut self, now: u64) {
        self.pc_base = self.program_counter(now);
        self.running_since = None;
    }

    fn fire(&mut self, event: McuEvent, out: &mut Vec<Action>) -> Result<()> {
        let from = self.state;
        self.state = transition(from, event)?;
        out.push(Action::Transition { from, event, to: self.state });
        Ok(())
    }

    fn illegal(&self, trigger: &str) -> NodeError {
        NodeError::IllegalTransition { state: self.state, trigger: trigger.into() }
    }

    fn snapshot(&self, pc: u64) -> ExecutionState {
        let mut regs = Vec::with_capacity(16);
        regs.extend_from_slice(&pc.to_le_bytes());
        regs.extend_from_slice(&self.id.to_le_bytes());
        ExecutionState::new(pc, regs)
    }

    fn save_state(&mut self, now: u64, out: &mut Vec<Action>) {
        self.freeze(now);
        let s = self.snapshot(self.pc_base);
        self.eprom.save_state(s);
        out.push(Action::StateSaved { program_counter: self.pc_base });
    }

    /// S1 onward: integrity check, then the bootloader or Support Request.
    fn boot(&mut self, now: u64, out: &mut Vec<Action>) -> Result<()> {
        debug_assert_eq!(self.state, McuState::PowerOnBoot);
        let report = self.memory.array().check_integrity();
        let passed = report.passed;
        out.push(Action::IntegrityChecked(report));
        if !passed {
            self.fire(McuEvent::IntegrityFail, out)?;
            self.enter_support_request(now, out);
            return Ok(());
        }
        self.fire(McuEvent::IntegrityPass, out)?;
        self.fire(McuEvent::BootloaderDone, out)?;
        self.mode = Mode::Normal;
        match self.eprom.load_state().cloned() {
            Some(s) => {
                self.eprom.erase_state();
                self.pc_base = s.program_counter;
                out.push(Action::StateRestored { program_counter: s.program_counter });
            }
            None => {
                self.pc_base = 0;
                out.push(Action::CleanStart);
            }
        }
        self.running_since = Some(now);
        Ok(())
    }

    fn enter_support_request(&mut self, now: u64, out: &mut Vec<Action>) {
        self.mode = Mode::SupportRequest;
        self.pending_transfer = Some(TransferProgress::fresh(None, None));
        self.send_request(now, out);
    }

    fn send_request(&mut self, _now: u64, out: &mut Vec<Action>) {
        self.memory.begin_rewrite();
        self.pending_transfer = Some(TransferProgress::fresh(None, None));
        self.resync = true;
        out.push(Action::Send(Message {
            src: self.id,
            dst: BROADCAST,
            body: MessageBody::RecoveryRequest { auth_token: self.config.auth_token.clone() },
        }));
    }

    fn reboot(&mut self, now: u64, out: &mut Vec<Action>) -> Result<()> {
        self.pending_transfer = None;
        self.mode = Mode::Normal;
        self.fire(McuEvent::Reboot, out)?;
        self.boot(now, out)
    }

    pub fn power_on(&mut self, now: u64) -> Result<Vec<Action>> {
        let mut out = Vec::new();
        self.fire(McuEvent::PowerOn, &mut out)?;
        self.halted = false;
        self.boot(now, &mut out)?;
        Ok(out)
    }

    /// Volatile state is lost; STTRAM and EPROM persist.
    pub fn power_off(&mut self, _now: u64) -> Result<Vec<Action>> {
        let mut out = Vec::new();
        self.fire(McuEvent::PowerOff, &mut out)?;
        self.halted = false;
        self.mode = Mode::Normal;
        self.pending_transfer = None;
        self.running_since = None;
        Ok(out)
    }

    pub fn bus_access(&mut self, _now: u64) -> Result<Vec<Action>> {
        if self.halted {
            return Err(NodeError::Halted);
        }
        let mut out = Vec::new();
        self.fire(McuEvent::BusAccess, &mut out)?;
        Ok(out)
    }

    pub fn bus_release(&mut self, _now: u64) -> Result<Vec<Action>> {
        if self.halted {
            return Err(NodeError::Halted);
        }
        let mut out = Vec::new();
        self.fire(McuEvent::BusRelease, &mut out)?;
        Ok(out)
    }

    pub fn on_interrupt(&mut self, now: u64, irq: Interrupt) -> Result<Vec<Action>> {
        if self.state == McuState::PoweredOff {
            return Err(self.illegal(irq.name()));
        }
        let mut out = Vec::new();
        match irq {
            Interrupt::Halt => {
                if !self.state.is_running() {
                    return Err(self.illegal(irq.name()));
                }
                if !self.halted {
                    self.save_state(now, &mut out);
                    self.halted = true;
                }
            }
            Interrupt::HaltCleared => {
                if !self.halted {
                    return Err(self.illegal(irq.name()));
                }
                self.halted = false;
                self.running_since = Some(now);
            }
            Interrupt::PRequest => {
                if !self.state.is_running() || self.halted {
                    return Err(self.illegal(irq.name()));
                }
                self.fire(McuEvent::SaveForRecovery, &mut out)?;
                self.save_state(now, &mut out);
                self.fire(McuEvent::RebootToRequest, &mut out)?;
                self.enter_support_request(now, &mut out);
            }
            Interrupt::PAssist { requester } => {
                if !self.state.is_running() || self.halted {
                    return Err(NodeError::AssistRefused { state: self.state, halted: self.halted });
                }
                self.fire(McuEvent::SaveForRecovery, &mut out)?;
                self.save_state(now, &mut out);
                self.fire(McuEvent::RebootToAssist, &mut out)?;
                self.mode = Mode::SupportAssist;
                self.donor_checked = false;
                self.pending_transfer =
                    Some(TransferProgress::fresh(Some(requester), Some(self.memory.firmware_len())));
            }
        }
        Ok(out)
    }

    /// One pass of the Support Request routine. `None` (re)sends the request;
    /// a chunk is received, written and the index advanced; the closing
    /// message resets the sensors and reboots.
    pub fn run_support_request_step(&mut self, now: u64, incoming: Option<&Message>) -> Result<Vec<Action>> {
        if self.state != McuState::SupportRequest {
            return Err(self.illegal("support_request_step"));
        }
        let mut out = Vec::new();
        let Some(msg) = incoming else {
            self.send_request(now, &mut out);
            return Ok(out);
        };
        match &msg.body {
            MessageBody::RecoveryRequest { .. } => Err(NodeError::UnexpectedMessage("recovery_request")),
            MessageBody::FirmwareChunk { seq, payload } => {
                let seq = *seq;
                let progress = self.pending_transfer.get_or_insert_with(|| TransferProgress::fresh(None, None));
                if seq == 0 {
                    *progress = TransferProgress::fresh(Some(msg.src), None);
                    self.resync = false;
                } else if self.resync {
                    return Ok(out);
                } else if seq != progress.next_seq || progress.peer != Some(msg.src) {
                    let expected = progress.next_seq;
                    *progress = TransferProgress::fresh(None, None);
                    self.resync = true;
                    return Err(NodeError::OutOfOrderChunk { expected, got: seq });
                }
                let offset = progress.next_index;
                progress.next_index += payload.len() as u64;
                progress.next_seq += 1;
                self.memory.write(offset, payload)?;
                out.push(Action::ChunkWritten { seq, offset, len: payload.len() });
                Ok(out)
            }
            MessageBody::RecoveryComplete { total_len, bootloader_len, digest } => {
                let received = self.pending_transfer.as_ref().map_or(0, |p| p.next_index);
                let from_donor = self.pending_transfer.as_ref().and_then(|p| p.peer) == Some(msg.src);
                if self.resync || !from_donor || received != *total_len {
                    self.pending_transfer = Some(TransferProgress::fresh(None, None));
                    self.resync = true;
                    return Err(NodeError::IncompleteTransfer { expected: *total_len, received });
                }
                if let Err(e) = self.memory.finish_rewrite(*total_len, *bootloader_len, *digest) {
                    self.pending_transfer = Some(TransferProgress::fresh(None, None));
                    self.resync = true;
                    return Err(e);
                }
                self.memory.array_mut().reset_sensors();
                out.push(Action::SensorsReset);
                out.push(Action::RecoveryDone { bytes: received, digest: *digest });
                self.reboot(now, &mut out)?;
                Ok(out)
            }
        }
    }

    /// One pass of the Support Assist routine: read the next chunk and send
    /// it, or close the stream and reboot.
    pub fn run_support_assist_step(&mut self, now: u64) -> Result<Vec<Action>> {
        if self.state != McuState::SupportAssist {
            return Err(self.illegal("support_assist_step"));
        }
        if !self.donor_checked {
            let report = self.memory.array().check_integrity();
            if !report.passed {
                return Err(NodeError::DonorCorrupted { node: self.id, bits: report.corrupted_sensor_bits });
            }
            self.donor_checked = true;
        }
        let mut out = Vec::new();
        let progress = self.pending_transfer.as_mut().expect("S7 always carries a transfer");
        let total = progress.total.unwrap_or(0);
        let dst = progress.peer.expect("S7 always has a requester");
        if progress.next_index < total {
            let len = (self.config.chunk_size as u64).min(total - progress.next_index) as usize;
            let payload = self.memory.read(progress.next_index, len);
            let seq = progress.next_seq;
            progress.next_index += len as u64;
            progress.next_seq += 1;
            out.push(Action::Send(Message { src: self.id, dst, body: MessageBody::FirmwareChunk { seq, payload } }));
            return Ok(out);
        }
        out.push(Action::Send(Message {
            src: self.id,
            dst,
            body: MessageBody::RecoveryComplete {
                total_len: total,
                bootloader_len: self.memory.bootloader_len(),
                digest: self.memory.digest(),
            },
        }));
        out.push(Action::AssistDone { bytes: total });
        self.reboot(now, &mut out)?;
        Ok(out)
    }

    /// Restarts the current stream from byte 0 for the same requester.
    pub fn restart_assist(&mut self, requester: NodeId) -> Result<()> {
        match &mut self.pending_transfer {
            Some(p) if self.state == McuState::SupportAssist && p.peer == Some(requester) => {
                p.next_index = 0;
                p.next_seq = 0;
                Ok(())
            }
            _ => Err(NodeError::AssistRefused { state: self.state, halted: self.halted }),
        }
    }

    /// Leaves Support Assist without sending, after the donor found itself
    /// corrupted.
    pub fn abort_assist(&mut self, now: u64) -> Result<Vec<Action>> {
        if self.state != McuState::SupportAssist {
            return Err(self.illegal("abort_assist"));
        }
        let mut out = Vec::new();
        self.reboot(now, &mut out)?;
        Ok(out)
    }

    /// Integrity-checker poll. `field_present` is whether an attack is still
    /// acting on this node.
    pub fn poll_sensors(&self, field_present: bool) -> Option<Interrupt> {
        if !self.state.is_running() {
            return None;
        }
        if self.halted {
            return (!field_present).then_some(Interrupt::HaltCleared);
        }
        (!self.memory.array().check_integrity().passed).then_some(Interrupt::Halt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetics::MtjParams;
    use crate::memory::new_array;
    use std::collections::{BTreeSet, VecDeque};

    fn array() -> SttramArray {
        new_array(2048, 64, 1024, MtjParams::data_cell(), MtjParams::active_sensor()).unwrap()
    }

    fn node_with(id: NodeId, img: &FirmwareImage, chunk_size: usize) -> Node {
        let cfg = NodeConfig { chunk_size, ..NodeConfig::default() };
        Node::new(id, ProgramMemory::materialized(array(), img).unwrap(), cfg)
    }

    fn node(id: NodeId) -> Node {
        node_with(id, &FirmwareImage::generated(3000, 200, 1), 1024)
    }

    fn sent(actions: &[Action]) -> Vec<&Message> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn edge_table_matches_transition_function() {
        let edges: BTreeSet<_> = EDGES.iter().cloned().collect();
        assert_eq!(edges.len(), EDGES.len());
        for s in McuState::ALL {
            for e in McuEvent::ALL {
                match transition(s, e) {
                    Ok(t) => assert!(edges.contains(&(s, e, t)), "{s} {e:?} -> {t} undeclared"),
                    Err(NodeError::IllegalTransition { .. }) => {
                        assert!(!edges.iter().any(|&(a, b, _)| a == s && b == e))
                    }
                    Err(other) => panic!("{other}"),
                }
            }
        }
    }

    #[test]
    fn all_states_reachable() {
        let mut seen = BTreeSet::from([McuState::PoweredOff]);
        let mut queue = VecDeque::from([McuState::PoweredOff]);
        while let Some(s) = queue.pop_front() {
            for e in McuEvent::ALL {
                if let Ok(t) = transition(s, e) {
                    if seen.insert(t) {
                        queue.push_back(t);
                    }
                }
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn reboots_land_in_boot_state() {
        for s in [McuState::SupportRequest, McuState::SupportAssist] {
            assert_eq!(transition(s, McuEvent::Reboot).unwrap(), McuState::PowerOnBoot);
        }
        assert!(transition(McuState::SavingState, McuEvent::Reboot).is_err());
    }

    #[test]
    fn pristine_boot() {
        let mut n = node(1);
        let acts = n.power_on(0).unwrap();
        assert_eq!(n.state(), McuState::Executing);
        let path: Vec<_> = acts
            .iter()
            .filter_map(|a| match a {
                Action::Transition { to, .. } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(path, vec![McuState::PowerOnBoot, McuState::Bootloader, McuState::Executing]);
        assert!(acts.contains(&Action::CleanStart));
        assert!(n.power_on(1).is_err());
    }

    #[test]
    fn corrupted_boot_requests_recovery() {
        let mut n = node(1);
        n.memory_mut().array_mut().flip_bit(1024, 5);
        let acts = n.power_on(0).unwrap();
        assert_eq!(n.state(), McuState::SupportRequest);
        assert_eq!(n.mode(), Mode::SupportRequest);
        let msgs = sent(&acts);
        assert_eq!(msgs.len(), 1);
        assert!(matches!(msgs[0].body, MessageBody::RecoveryRequest { .. }));
    }

    #[test]
    fn saved_state_is_restored_once() {
        let mut n = node(1);
        n.eprom.save_state(ExecutionState::new(1234, vec![]));
        let acts = n.power_on(0).unwrap();
        assert!(acts.contains(&Action::StateRestored { program_counter: 1234 }));
        assert_eq!(n.eprom().load_state(), None);
        assert_eq!(n.program_counter(0), 1234);
        assert_eq!(n.program_counter(1_000), 1235);
    }

    #[test]
    fn halt_freezes_application() {
        let mut n = node(1);
        n.power_on(0).unwrap();
        let acts = n.on_interrupt(5_000, Interrupt::Halt).unwrap();
        assert_eq!(acts, vec![Action::StateSaved { program_counter: 5 }]);
        assert!(n.halted());
        assert_eq!(n.eprom().load_state().unwrap().program_counter, 5);
        assert_eq!(n.program_counter(9_000), 5);
        assert!(matches!(n.bus_access(6_000), Err(NodeError::Halted)));
        assert!(n.on_interrupt(6_000, Interrupt::PRequest).is_err());
        assert!(matches!(
            n.on_interrupt(6_000, Interrupt::PAssist { requester: 2 }),
            Err(NodeError::AssistRefused { halted: true, .. })
        ));
    }

    #[test]
    fn halt_cleared_requires_halt() {
        let mut n = node(1);
        n.power_on(0).unwrap();
        assert!(matches!(
            n.on_interrupt(0, Interrupt::HaltCleared),
            Err(NodeError::IllegalTransition { .. })
        ));
        assert!(node(2).on_interrupt(0, Interrupt::Halt).is_err());
    }

    #[test]
    fn halt_cleared_then_request() {
        let mut n = node(1);
        n.power_on(0).unwrap();
        n.on_interrupt(7_000, Interrupt::Halt).unwrap();
        n.on_interrupt(20_000, Interrupt::HaltCleared).unwrap();
        let acts = n.on_interrupt(20_000, Interrupt::PRequest).unwrap();
        assert_eq!(n.state(), McuState::SupportRequest);
        assert!(acts.contains(&Action::StateSaved { program_counter: 7 }));
        assert_eq!(sent(&acts).len(), 1);
        assert!(n.pending_transfer().is_some());
    }

    #[test]
    fn assist_enters_s7() {
        let mut n = node(1);
        n.power_on(0).unwrap();
        n.on_interrupt(0, Interrupt::PAssist { requester: 2 }).unwrap();
        assert_eq!(n.state(), McuState::SupportAssist);
        assert_eq!(n.mode(), Mode::SupportAssist);
        let acts = n.run_support_assist_step(0).unwrap();
        let m = sent(&acts);
        assert!(matches!(&m[0].body, MessageBody::FirmwareChunk { seq: 0, payload } if payload.len() == 1024));
        assert_eq!(m[0].dst, 2);
    }

    #[test]
    fn request_entry_sends_one_request() {
        let mut n = node(1);
        n.memory_mut().array_mut().flip_bit(0, 0);
        n.power_on(0).unwrap();
        let acts = n.run_support_request_step(0, None).unwrap();
        assert_eq!(sent(&acts).len(), 1);
        assert!(n.run_support_assist_step(0).is_err());
    }

    #[test]
    fn chunk_advances_index() {
        let mut n = node(1);
        n.memory_mut().array_mut().flip_bit(0, 0);
        n.power_on(0).unwrap();
        let chunk = Message { src: 2, dst: 1, body: MessageBody::FirmwareChunk { seq: 0, payload: vec![0xAB] } };
        let acts = n.run_support_request_step(0, Some(&chunk)).unwrap();
        assert_eq!(acts, vec![Action::ChunkWritten { seq: 0, offset: 0, len: 1 }]);
        assert_eq!(n.pending_transfer().unwrap().next_index, 1);
        assert_eq!(n.memory().array().read_data(0, 1), vec![0xAB]);
        let skip = Message { src: 2, dst: 1, body: MessageBody::FirmwareChunk { seq: 2, payload: vec![1] } };
        assert_eq!(
            n.run_support_request_step(0, Some(&skip)),
            Err(NodeError::OutOfOrderChunk { expected: 1, got: 2 })
        );
        // later chunks are dropped until the stream restarts
        assert_eq!(n.run_support_request_step(0, Some(&skip)), Ok(vec![]));
    }

    /// Runs donor and requester against each other until both reboot.
    fn recover(donor: &mut Node, victim: &mut Node, now: u64) -> Vec<Action> {
        let mut victim_actions = Vec::new();
        let mut n_chunks = 0;
        loop {
            let acts = donor.run_support_assist_step(now).unwrap();
            for m in sent(&acts) {
                if matches!(m.body, MessageBody::FirmwareChunk { .. }) {
                    n_chunks += 1;
                }
                victim_actions.extend(victim.run_support_request_step(now, Some(m)).unwrap());
            }
            if donor.state() != McuState::SupportAssist {
                break;
            }
        }
        assert_eq!(n_chunks as u64, donor.memory().firmware_len().div_ceil(donor.config().chunk_size as u64));
        victim_actions
    }

    #[test]
    fn three_byte_image_in_three_chunks() {
        let img = FirmwareImage::new(vec![1], vec![2, 3]);
        let mut donor = node_with(1, &img, 1);
        let mut victim = node_with(2, &img, 1);
        donor.power_on(0).unwrap();
        victim.memory_mut().array_mut().write_data(0, &[9, 9, 9]).unwrap();
        victim.memory_mut().array_mut().flip_bit(0, 1);
        victim.power_on(0).unwrap();
        donor.on_interrupt(0, Interrupt::PAssist { requester: 2 }).unwrap();
        let mut chunks = 0;
        loop {
            let acts = donor.run_support_assist_step(0).unwrap();
            for m in sent(&acts) {
                if matches!(m.body, MessageBody::FirmwareChunk { .. }) {
                    chunks += 1;
                }
                victim.run_support_request_step(0, Some(m)).unwrap();
            }
            if acts.iter().any(|a| matches!(a, Action::Transition { event: McuEvent::Reboot, .. })) {
                break;
            }
        }
        assert_eq!(chunks, 3);
        assert_eq!(victim.memory().digest(), img.digest);
        assert_eq!(victim.state(), McuState::Executing);
    }

    #[test]
    fn full_recovery_restores_both_nodes() {
        let img = FirmwareImage::generated(5000, 300, 4);
        let mut donor = node_with(1, &img, 700);
        let mut victim = node_with(2, &img, 700);
        donor.power_on(0).unwrap();
        victim.power_on(0).unwrap();
        victim.on_interrupt(3_000, Interrupt::Halt).unwrap();
        let scramble = victim.memory().array().group_mask(crate::memory::CellClass::Data, crate::magnetics::Bit::One);
        victim.memory_mut().array_mut().xor_mask(&scramble);
        victim.memory_mut().array_mut().flip_bit(1024, 0);
        victim.on_interrupt(9_000, Interrupt::HaltCleared).unwrap();
        victim.on_interrupt(9_000, Interrupt::PRequest).unwrap();
        donor.on_interrupt(10_000, Interrupt::PAssist { requester: 2 }).unwrap();
        let acts = recover(&mut donor, &mut victim, 11_000);
        assert!(acts.contains(&Action::SensorsReset));
        assert!(acts.contains(&Action::StateRestored { program_counter: 3 }));
        assert_eq!(victim.state(), McuState::Executing);
        assert_eq!(donor.state(), McuState::Executing);
        assert_eq!(victim.memory().digest(), img.digest);
        assert!(victim.memory().array().check_integrity().passed);
        assert_eq!(donor.program_counter(11_000), 10);
        assert_eq!(victim.eprom().load_state(), None);
        assert!(victim.pending_transfer().is_none() && donor.pending_transfer().is_none());
    }

    #[test]
    fn corrupted_donor_refuses() {
        let mut donor = node(1);
        donor.power_on(0).unwrap();
        donor.on_interrupt(0, Interrupt::PAssist { requester: 2 }).unwrap();
        donor.memory_mut().array_mut().flip_bit(0, 3);
        assert!(matches!(donor.run_support_assist_step(0), Err(NodeError::DonorCorrupted { node: 1, bits: 1 })));
        let acts = donor.abort_assist(0).unwrap();
        assert!(!acts.iter().any(|a| matches!(a, Action::Send(Message { body: MessageBody::FirmwareChunk { .. }, .. }))));
        assert_eq!(donor.state(), McuState::SupportRequest);
    }

    #[test]
    fn incomplete_stream_is_rejected() {
        let mut n = node(1);
        n.memory_mut().array_mut().flip_bit(0, 0);
        n.power_on(0).unwrap();
        let c0 = Message { src: 2, dst: 1, body: MessageBody::FirmwareChunk { seq: 0, payload: vec![1, 2] } };
        n.run_support_request_step(0, Some(&c0)).unwrap();
        let done = Message {
            src: 2,
            dst: 1,
            body: MessageBody::RecoveryComplete { total_len: 3, bootloader_len: 0, digest: 0 },
        };
        assert!(matches!(n.run_support_request_step(0, Some(&done)), Err(NodeError::IncompleteTransfer { .. })));
        assert_eq!(n.state(), McuState::SupportRequest);
    }

    #[test]
    fn polling() {
        let mut n = node(1);
        assert_eq!(n.poll_sensors(false), None);
        n.power_on(0).unwrap();
        assert_eq!(n.poll_sensors(true), None);
        n.memory_mut().array_mut().flip_bit(1024, 9);
        assert_eq!(n.poll_sensors(true), Some(Interrupt::Halt));
        n.on_interrupt(0, Interrupt::Halt).unwrap();
        assert_eq!(n.poll_sensors(true), None);
        assert_eq!(n.poll_sensors(false), Some(Interrupt::HaltCleared));
    }

    #[test]
    fn synthetic_store_identity() {
        let img = SyntheticFirmware { size: 1_000_000, seed: 3 };
        let mut donor = Node::new(1, ProgramMemory::synthetic(array(), img, 4096).unwrap(), NodeConfig::default());
        let mut victim = Node::new(2, ProgramMemory::synthetic(array(), img, 4096).unwrap(), NodeConfig::default());
        assert_eq!(donor.memory().digest(), img.digest());
        victim.memory_mut().array_mut().flip_bit(1, 1);
        assert_ne!(victim.memory().digest(), img.digest());
        victim.memory_mut().array_mut().flip_bit(0, 0);
        donor.power_on(0).unwrap();
        victim.power_on(0).unwrap();
        donor.on_interrupt(0, Interrupt::PAssist { requester: 2 }).unwrap();
        let acts = recover(&mut donor, &mut victim, 0);
        assert!(acts.iter().any(|a| matches!(a, Action::RecoveryDone { bytes: 1_000_000, .. })));
        assert_eq!(victim.memory().digest(), img.digest());
    }

    #[test]
    fn power_off_clears_volatile_state() {
        let mut n = node(1);
        n.memory_mut().array_mut().flip_bit(0, 0);
        n.power_on(0).unwrap();
        assert!(n.pending_transfer().is_some());
        n.power_off(10).unwrap();
        assert_eq!(n.state(), McuState::PoweredOff);
        assert!(n.pending_transfer().is_none());
        assert!(n.power_off(11).is_err());
    }
}
