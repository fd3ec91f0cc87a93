//! Discrete-event simulation of a homogeneous network of STTRAM nodes.
//!
//! The dispatch loop owns every node and link. Events carry integer
//! nanosecond timestamps and dispatch in `(time, lane, insertion)` order,
//! where the environment lane (attacks, power) precedes node lanes. A run is
//! a pure function of the scenario, so identical scenarios produce identical
//! traces and metrics.
//!
//! Attacks resolve their cell dynamics once per (cell class, stored bit)
//! group over a bounded physics window. Each group's cells change at the
//! group's first read-out change; at the end of the window the groups whose
//! final state is unflipped change back.
//!
//! Integrity polls are lazy: a poll is only scheduled on the poll grid when
//! its outcome can differ from the previous one, after a sensor flip or while
//! waiting for a field to subside.

pub mod bundled;
pub mod metrics;
pub mod scenario;
pub mod scheduler;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::magnetics::{Bit, FieldProfile, MagneticsError};
use crate::memory::{new_array, BitMask, CellClass, ExposureCache, ExposureTable, FirmwareImage, SyntheticFirmware};
use crate::network::{Delivery, Link, Message, MessageBody, NodeId, BROADCAST, FRAME_OVERHEAD};
use crate::node::{Action, Interrupt, McuEvent, McuState, Node, NodeConfig, NodeError, ProgramMemory};

pub use metrics::{LinkMetrics, MetricsReport, NodeMetrics, Termination};
pub use scenario::{
    load_scenario, to_ns, ArrayGeometry, AttackEvent, AttackMode, FirmwareSource, LinkSpec, NodeSpec, Scenario,
    ScenarioError, Window,
};
pub use scheduler::{Lane, SchedulePast, Scheduler};
pub use trace::{Trace, TraceRecord};

/// First retry interval of a Support Request that sees no traffic.
pub const RETRY_BASE_NS: u64 = 100_000_000;
pub const RETRY_CAP_NS: u64 = 10_000_000_000;
/// Re-requests without progress before a requester gives up.
pub const MAX_RETRIES: u32 = 16;
pub const AUTH_TOKEN: &[u8] = b"STS1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("firmware for node {node}: {message}")]
    Firmware { node: NodeId, message: String },
    #[error("deadlock at t = {time_ns} ns: {dump}")]
    Deadlock { time_ns: u64, dump: String },
    #[error(transparent)]
    Schedule(#[from] SchedulePast),
    #[error("node {node}: {source}")]
    Node { node: NodeId, source: NodeError },
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
}

impl EngineError {
    /// Errors caused by the input rather than by the simulation.
    pub fn is_input_error(&self) -> bool {
        matches!(self, EngineError::Scenario(_) | EngineError::Firmware { .. })
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub trace: Trace,
}

/// Field acting on each node at `t_ns`, in node-id order. Attack windows are
/// half-open; the latest-starting attack wins where several overlap.
pub fn attack_environment(s: &Scenario, t_ns: u64) -> Vec<(NodeId, Option<FieldProfile>)> {
    let mut ids: Vec<NodeId> = s.nodes.iter().map(|n| n.id).collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let profile = s
                .attacks
                .iter()
                .filter(|a| a.target == id && a.active_at(t_ns))
                .max_by_key(|a| a.start_ns())
                .map(|a| a.profile.clone());
            (id, profile)
        })
        .collect()
}

pub fn run(s: &Scenario) -> Result<RunOutput> {
    run_with_cache(s, &mut ExposureCache::new())
}

/// Like [`run`], sharing exposure outcomes with other runs through `cache`.
pub fn run_with_cache(s: &Scenario, cache: &mut ExposureCache) -> Result<RunOutput> {
    s.validate()?;
    let mut sim = Sim::new(s, cache)?;
    sim.run()
}

#[derive(Clone, Debug)]
enum Ev {
    PowerOn(NodeId),
    PowerOff(NodeId),
    AttackStart(usize),
    AttackOnset { attack: usize, group: usize },
    AttackSettle(usize),
    AttackEnd(usize),
    Poll(NodeId),
    Arrival { msg: Message },
    AssistStep { node: NodeId, gen: u64 },
    Retry { node: NodeId, gen: u64 },
}

#[derive(Clone, Debug, Default)]
struct Session {
    link: Option<usize>,
    seq0_start: Option<u64>,
    last_chunk_arrival: Option<u64>,
    bits: u64,
}

struct NodeRt {
    node: Node,
    poll_ns: u64,
    pending_polls: BTreeSet<u64>,
    assist_gen: u64,
    retry_gen: u64,
    retry_attempt: u32,
    last_activity: u64,
    /// Shortest stall worth a re-request: four full chunk frames.
    stall_floor_ns: u64,
    donor_cursor: usize,
    session: Option<Session>,
    down_since: Option<u64>,
    downtime_ns: u64,
    halted_since: Option<u64>,
    halt_ns: u64,
    m: NodeMetrics,
}

impl NodeRt {
    fn grid_ceil(&self, t: u64) -> u64 {
        t.div_ceil(self.poll_ns) * self.poll_ns
    }

    fn grid_after(&self, t: u64) -> u64 {
        (t / self.poll_ns + 1) * self.poll_ns
    }

    fn retry_interval(&self) -> u64 {
        let backoff = RETRY_BASE_NS.saturating_mul(1 << self.retry_attempt.min(30)).min(RETRY_CAP_NS);
        backoff.max(self.stall_floor_ns)
    }
}

#[derive(Default)]
struct AttackRt {
    table: Option<ExposureTable>,
    masks: Vec<BitMask>,
    applied: [bool; 4],
    sensor_onset: Option<u64>,
    data_onset: Option<u64>,
}

struct Sim<'a> {
    s: &'a Scenario,
    cache: &'a mut ExposureCache,
    sched: Scheduler<Ev>,
    nodes: Vec<NodeRt>,
    index: BTreeMap<NodeId, usize>,
    links: Vec<Link>,
    attacks: Vec<AttackRt>,
    trace: Trace,
    reference_digest: u64,
    dispatched: u64,
}

fn bit_label(b: Bit) -> &'static str {
    if b.is_one() {
        "1"
    } else {
        "0"
    }
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

fn build_memory(sc: &Scenario, spec: &NodeSpec) -> Result<ProgramMemory> {
    let g = &sc.array;
    let fw_err = |message: String| EngineError::Firmware { node: spec.id, message };
    let array = new_array(g.rows, g.cols, g.sensor_interval, spec.data_cell.clone(), spec.sensor_cell.clone())
        .map_err(|e| fw_err(e.to_string()))?;
    let mem = match &spec.firmware {
        FirmwareSource::Generated { size, bootloader } => {
            let img = FirmwareImage::generated(*size as usize, *bootloader as usize, sc.seed);
            ProgramMemory::materialized(array, &img)
        }
        FirmwareSource::Synthetic { size, bootloader } => {
            ProgramMemory::synthetic(array, SyntheticFirmware { size: *size, seed: sc.seed }, *bootloader)
        }
        FirmwareSource::File { path, bootloader } => {
            let p = Path::new(path);
            let full = match (&sc.base_dir, p.is_relative()) {
                (Some(base), true) => base.join(p),
                _ => p.to_path_buf(),
            };
            let img = FirmwareImage::load(&full, *bootloader as usize).map_err(|e| fw_err(e.to_string()))?;
            ProgramMemory::materialized(array, &img)
        }
    };
    mem.map_err(|e| fw_err(e.to_string()))
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario, cache: &'a mut ExposureCache) -> Result<Self> {
        let mut specs: Vec<&NodeSpec> = sc.nodes.iter().collect();
        specs.sort_by_key(|n| n.id);
        let links: Vec<Link> = sc
            .links
            .iter()
            .map(|l| Link::new(l.between[0], l.between[1], l.params.clone(), l.outages.iter().map(Window::ns).collect()))
            .collect();
        let frame_bits = 8 * (sc.chunk_size + FRAME_OVERHEAD) as u64;
        let mut nodes = Vec::with_capacity(specs.len());
        let mut index = BTreeMap::new();
        for spec in specs {
            let memory = build_memory(sc, spec)?;
            let config = NodeConfig {
                chunk_size: sc.chunk_size,
                integrity_poll_period_ns: to_ns(spec.integrity_poll_period),
                instructions_per_second: spec.instructions_per_second,
                auth_token: AUTH_TOKEN.to_vec(),
            };
            let stall_floor_ns = links
                .iter()
                .filter(|l| l.peer_of(spec.id).is_some())
                .map(|l| 4 * (l.params.serialization_ns(frame_bits) + l.params.propagation_ns()))
                .max()
                .unwrap_or(0);
            index.insert(spec.id, nodes.len());
            nodes.push(NodeRt {
                node: Node::new(spec.id, memory, config.clone()),
                poll_ns: config.integrity_poll_period_ns,
                pending_polls: BTreeSet::new(),
                assist_gen: 0,
                retry_gen: 0,
                retry_attempt: 0,
                last_activity: 0,
                stall_floor_ns,
                donor_cursor: 0,
                session: None,
                down_since: Some(0),
                downtime_ns: 0,
                halted_since: None,
                halt_ns: 0,
                m: NodeMetrics { id: spec.id, ..Default::default() },
            });
        }
        let reference_digest = nodes[0].node.memory().digest();
        let mut trace = Trace::default();
        trace.header.push(format!("sttram-sentinel trace v{}", env!("CARGO_PKG_VERSION")));
        trace.header.push(format!("scenario {}", sc.to_json_compact()));
        trace.header.push(format!("reference_digest {reference_digest:016x}"));
        Ok(Sim {
            s: sc,
            cache,
            sched: Scheduler::new(),
            nodes,
            index,
            links,
            attacks: sc.attacks.iter().map(|_| AttackRt::default()).collect(),
            trace,
            reference_digest,
            dispatched: 0,
        })
    }

    fn idx(&self, id: NodeId) -> usize {
        self.index[&id]
    }

    fn tr(&mut self, now: u64, node: Option<NodeId>, event: &str, detail: Vec<(&str, String)>) {
        self.trace.push(now, node, event, detail);
    }

    fn node_err(id: NodeId) -> impl Fn(NodeError) -> EngineError {
        move |source| EngineError::Node { node: id, source }
    }

    fn seed_events(&mut self) -> Result<()> {
        for spec in &self.s.nodes {
            let mut windows = spec.power_off.clone();
            windows.sort_by(|a, b| a.start.total_cmp(&b.start));
            if !windows.iter().any(|w| w.contains(0.0)) {
                self.sched.schedule(0, None, Ev::PowerOn(spec.id))?;
            }
            for w in windows {
                let (a, b) = w.ns();
                if a > 0 {
                    self.sched.schedule(a, None, Ev::PowerOff(spec.id))?;
                }
                self.sched.schedule(b, None, Ev::PowerOn(spec.id))?;
            }
        }
        for (i, a) in self.s.attacks.iter().enumerate() {
            self.sched.schedule(a.start_ns(), None, Ev::AttackStart(i))?;
            self.sched.schedule(a.end_ns(), None, Ev::AttackEnd(i))?;
        }
        Ok(())
    }

    fn run(&mut self) -> Result<RunOutput> {
        log::debug!("run: {} nodes, {} links, {} attacks", self.nodes.len(), self.links.len(), self.attacks.len());
        self.seed_events()?;
        let limit = self.s.duration_limit_ns();
        let termination = loop {
            match self.sched.peek_time() {
                None => break Termination::Quiescent,
                Some(t) if t > limit => {
                    self.sched.advance_to(limit);
                    break Termination::DurationLimit;
                }
                Some(_) => {}
            }
            let (t, _, ev) = self.sched.dispatch_next().expect("peeked");
            self.dispatched += 1;
            self.handle(t, ev)?;
        };
        let end = self.sched.now();
        if termination == Termination::Quiescent {
            let stuck: Vec<String> = self
                .nodes
                .iter()
                .filter(|rt| !matches!(rt.node.state(), McuState::PoweredOff | McuState::Executing | McuState::BusAccess))
                .map(|rt| {
                    format!(
                        "node {} in {} (halted {}, transfer {:?}, retries {})",
                        rt.node.id,
                        rt.node.state(),
                        rt.node.halted(),
                        rt.node.pending_transfer(),
                        rt.retry_attempt
                    )
                })
                .collect();
            if !stuck.is_empty() {
                return Err(EngineError::Deadlock { time_ns: end, dump: stuck.join("; ") });
            }
        }
        log::debug!("run finished at {end} ns after {} events ({termination:?})", self.dispatched);
        Ok(RunOutput { metrics: self.report(termination, end), trace: std::mem::take(&mut self.trace) })
    }

    fn report(&mut self, termination: Termination, end: u64) -> MetricsReport {
        let mut order: Vec<usize> = (0..self.s.attacks.len()).collect();
        order.sort_by_key(|&i| self.s.attacks[i].start_ns());
        for rt in &mut self.nodes {
            let id = rt.node.id;
            rt.m.detection_lead_time = order.iter().find_map(|&i| {
                let a = &self.attacks[i];
                match (self.s.attacks[i].target == id, a.sensor_onset, a.data_onset) {
                    (true, Some(sn), Some(dt)) => Some((dt as f64 - sn as f64) * 1e-9),
                    _ => None,
                }
            });
            let down = rt.downtime_ns + rt.down_since.map_or(0, |t| end.saturating_sub(t));
            let halt = rt.halt_ns + rt.halted_since.map_or(0, |t| end.saturating_sub(t));
            rt.m.downtime = down as f64 * 1e-9;
            rt.m.halt_duration = halt as f64 * 1e-9;
            rt.m.final_state = Some(rt.node.state());
            rt.m.final_digest_match = rt.node.memory().digest() == self.reference_digest;
        }
        MetricsReport {
            seed: self.s.seed,
            termination,
            end_time: end as f64 * 1e-9,
            events_dispatched: self.dispatched,
            reference_digest: format!("{:016x}", self.reference_digest),
            nodes: self.nodes.iter().map(|rt| rt.m.clone()).collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkMetrics { between: [l.a, l.b], kind: l.params.kind, accounting: l.accounting.clone() })
                .collect(),
        }
    }

    fn handle(&mut self, now: u64, ev: Ev) -> Result<()> {
        match ev {
            Ev::PowerOn(id) => {
                self.tr(now, Some(id), "power_on", vec![]);
                let i = self.idx(id);
                let acts = self.nodes[i].node.power_on(now).map_err(Self::node_err(id))?;
                self.apply(i, now, acts)?;
            }
            Ev::PowerOff(id) => {
                let i = self.idx(id);
                let rt = &mut self.nodes[i];
                if let Some(t) = rt.halted_since.take() {
                    rt.halt_ns += now - t;
                }
                rt.session = None;
                rt.pending_polls.clear();
                self.tr(now, Some(id), "power_off", vec![]);
                let acts = self.nodes[i].node.power_off(now).map_err(Self::node_err(id))?;
                self.apply(i, now, acts)?;
            }
            Ev::AttackStart(a) => self.attack_start(now, a)?,
            Ev::AttackOnset { attack, group } => self.attack_onset(now, attack, group)?,
            Ev::AttackSettle(a) => self.attack_settle(now, a),
            Ev::AttackEnd(a) => {
                let target = self.s.attacks[a].target;
                self.tr(now, None, "attack_end", vec![("attack", s(a)), ("target", s(target))]);
                let i = self.idx(target);
                if self.nodes[i].node.halted() {
                    self.schedule_clear_poll(i, now)?;
                }
            }
            Ev::Poll(id) => self.poll(now, id)?,
            Ev::Arrival { msg } => self.arrival(now, msg)?,
            Ev::AssistStep { node, gen } => self.assist_step(now, node, gen)?,
            Ev::Retry { node, gen } => self.retry(now, node, gen)?,
        }
        Ok(())
    }

    fn field_present(&self, id: NodeId, now: u64) -> bool {
        self.s.attacks.iter().any(|a| a.target == id && a.active_at(now))
    }

    fn schedule_poll(&mut self, i: usize, t: u64) -> Result<()> {
        if self.nodes[i].pending_polls.insert(t) {
            let id = self.nodes[i].node.id;
            self.sched.schedule(t, Some(id), Ev::Poll(id))?;
        }
        Ok(())
    }

    /// Poll at the first grid point where the field on a halted node is gone.
    fn schedule_clear_poll(&mut self, i: usize, now: u64) -> Result<()> {
        let id = self.nodes[i].node.id;
        let end = self.s.attacks.iter().filter(|a| a.target == id && a.active_at(now)).map(|a| a.end_ns()).max();
        let rt = &self.nodes[i];
        let t = match end {
            Some(e) => rt.grid_ceil(e),
            None => rt.grid_after(now),
        };
        self.schedule_poll(i, t)
    }

    fn attack_start(&mut self, now: u64, a: usize) -> Result<()> {
        let ev = &self.s.attacks[a];
        let i = self.idx(ev.target);
        let window = ev.physics_window_s();
        let window_ns = to_ns(window).max(1);
        self.tr(
            now,
            None,
            "attack_start",
            vec![
                ("attack", s(a)),
                ("target", s(ev.target)),
                ("mode", s(if ev.mode == AttackMode::Active { "active" } else { "passive" })),
                ("kind", serde_json::to_value(ev.profile.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
                ("amplitude", s(ev.profile.amplitude)),
                ("window_ns", s(window_ns)),
            ],
        );
        let array = self.nodes[i].node.memory().array();
        let table = self.cache.table(array.data_params(), array.sensor_params(), &ev.profile, window)?;
        let masks: Vec<BitMask> = ExposureTable::groups().iter().map(|&(c, b)| array.group_mask(c, b)).collect();
        for (g, &(c, b)) in ExposureTable::groups().iter().enumerate() {
            if let (false, Some(tau)) = (masks[g].is_empty(), table.get(c, b).first_change_time) {
                let at = now + to_ns(tau).min(window_ns);
                self.sched.schedule(at, None, Ev::AttackOnset { attack: a, group: g })?;
            }
        }
        self.sched.schedule(now + window_ns, None, Ev::AttackSettle(a))?;
        self.attacks[a].table = Some(table);
        self.attacks[a].masks = masks;
        Ok(())
    }

    fn attack_onset(&mut self, now: u64, a: usize, g: usize) -> Result<()> {
        let target = self.s.attacks[a].target;
        let i = self.idx(target);
        let (class, bit) = ExposureTable::groups()[g];
        let rt = &mut self.attacks[a];
        rt.applied[g] = true;
        let bits = self.nodes[i].node.memory_mut().array_mut().xor_mask(&rt.masks[g]);
        let event = match class {
            CellClass::Sensor => {
                rt.sensor_onset.get_or_insert(now);
                "sensor_flip"
            }
            CellClass::Data => {
                rt.data_onset.get_or_insert(now);
                "data_flip"
            }
        };
        self.tr(now, Some(target), event, vec![("attack", s(a)), ("polarity", s(bit_label(bit))), ("bits", s(bits))]);
        let n = &self.nodes[i].node;
        if class == CellClass::Sensor && n.state().is_running() && !n.halted() {
            let t = self.nodes[i].grid_ceil(now);
            self.schedule_poll(i, t)?;
        }
        Ok(())
    }

    fn attack_settle(&mut self, now: u64, a: usize) {
        let target = self.s.attacks[a].target;
        let i = self.idx(target);
        let rt = &self.attacks[a];
        let table = rt.table.as_ref().expect("settle follows start");
        let mut reverted = 0;
        let mut kept = 0;
        for (g, &(c, b)) in ExposureTable::groups().iter().enumerate() {
            if !rt.applied[g] {
                continue;
            }
            if table.get(c, b).flipped {
                kept += rt.masks[g].count();
            } else {
                reverted += self.nodes[i].node.memory_mut().array_mut().xor_mask(&rt.masks[g]);
            }
        }
        self.tr(now, Some(target), "attack_settle", vec![("attack", s(a)), ("flipped", s(kept)), ("reverted", s(reverted))]);
    }

    fn poll(&mut self, now: u64, id: NodeId) -> Result<()> {
        let i = self.idx(id);
        self.nodes[i].pending_polls.remove(&now);
        let field = self.field_present(id, now);
        let err = Self::node_err(id);
        match self.nodes[i].node.poll_sensors(field) {
            Some(Interrupt::Halt) => {
                let acts = self.nodes[i].node.on_interrupt(now, Interrupt::Halt).map_err(&err)?;
                let pc = self.nodes[i].node.program_counter(now);
                self.tr(now, Some(id), "interrupt", vec![("irq", s("HALT")), ("pc", s(pc))]);
                let rt = &mut self.nodes[i];
                rt.m.attacks_detected += 1;
                rt.m.halt_program_counter.get_or_insert(pc);
                rt.halted_since = Some(now);
                self.apply(i, now, acts)?;
                self.schedule_clear_poll(i, now)?;
            }
            Some(Interrupt::HaltCleared) => {
                let acts = self.nodes[i].node.on_interrupt(now, Interrupt::HaltCleared).map_err(&err)?;
                self.tr(now, Some(id), "interrupt", vec![("irq", s("HALT_CLEARED"))]);
                let rt = &mut self.nodes[i];
                if let Some(t) = rt.halted_since.take() {
                    rt.halt_ns += now - t;
                }
                self.apply(i, now, acts)?;
                self.tr(now, Some(id), "interrupt", vec![("irq", s("P_REQUEST"))]);
                let acts = self.nodes[i].node.on_interrupt(now, Interrupt::PRequest).map_err(&err)?;
                self.apply(i, now, acts)?;
            }
            Some(other) => unreachable!("poll raised {other:?}"),
            None => {
                if self.nodes[i].node.halted() {
                    self.schedule_clear_poll(i, now)?;
                }
            }
        }
        Ok(())
    }

    fn pick_donor(&self, src: NodeId, now: u64) -> Option<NodeId> {
        let mut peers: Vec<(NodeId, usize)> =
            self.links.iter().enumerate().filter_map(|(li, l)| l.peer_of(src).map(|p| (p, li))).collect();
        peers.sort_unstable();
        if peers.is_empty() {
            return None;
        }
        let start = self.nodes[self.idx(src)].donor_cursor % peers.len();
        (0..peers.len()).map(|k| peers[(start + k) % peers.len()]).find(|&(_, li)| self.links[li].is_up(now)).map(|p| p.0)
    }

    fn send(&mut self, now: u64, mut msg: Message) -> Result<Option<Delivery>> {
        let src = msg.src;
        if msg.dst == BROADCAST {
            match self.pick_donor(src, now) {
                Some(d) => msg.dst = d,
                None => {
                    self.tr(now, Some(src), "undeliverable", vec![("kind", s(msg.kind_name()))]);
                    return Ok(None);
                }
            }
        }
        let dst = msg.dst;
        let seq = match &msg.body {
            MessageBody::FirmwareChunk { seq, .. } => Some(*seq),
            _ => None,
        };
        let Some(li) = self.links.iter().position(|l| l.connects(src, dst)) else {
            self.tr(now, Some(src), "undeliverable", vec![("kind", s(msg.kind_name())), ("dst", s(dst))]);
            return Ok(None);
        };
        match self.links[li].deliver(&msg, now) {
            Ok(d) => {
                let j = self.idx(dst);
                if let (Some(q), Some(sess)) = (seq, self.nodes[j].session.as_mut()) {
                    sess.bits += d.bits;
                    sess.link = Some(li);
                    if q == 0 {
                        sess.seq0_start = Some(d.start_ns);
                    }
                }
                if seq.is_none_or(|q| q == 0) {
                    let mut detail = vec![("kind", s(msg.kind_name())), ("dst", s(dst))];
                    if let Some(q) = seq {
                        detail.push(("seq", s(q)));
                    }
                    detail.push(("bytes", s(msg.wire_len())));
                    detail.push(("arrival_ns", s(d.arrival_ns)));
                    self.tr(now, Some(src), "send", detail);
                }
                self.sched.schedule(d.arrival_ns, Some(dst), Ev::Arrival { msg })?;
                Ok(Some(d))
            }
            Err(_) => {
                let mut detail = vec![("kind", s(msg.kind_name())), ("dst", s(dst))];
                if let Some(q) = seq {
                    detail.push(("seq", s(q)));
                }
                self.tr(now, Some(src), "link_down", detail);
                Ok(None)
            }
        }
    }

    /// Interprets node actions in order. Returns the delivery of the last
    /// message sent, if it got onto a link.
    fn apply(&mut self, i: usize, now: u64, actions: Vec<Action>) -> Result<Option<Delivery>> {
        let id = self.nodes[i].node.id;
        let mut last = None;
        for act in actions {
            match act {
                Action::Transition { from, event, to } => {
                    self.tr(
                        now,
                        Some(id),
                        "transition",
                        vec![("from", s(from.label())), ("event", s(event.name())), ("to", s(to.label()))],
                    );
                    self.on_transition(i, now, from, event, to)?;
                }
                Action::IntegrityChecked(r) => self.tr(
                    now,
                    Some(id),
                    "integrity",
                    vec![("passed", s(r.passed)), ("sensor_bits", s(r.corrupted_sensor_bits))],
                ),
                Action::StateSaved { program_counter } => {
                    self.tr(now, Some(id), "state_saved", vec![("pc", s(program_counter))])
                }
                Action::StateRestored { program_counter } => {
                    let m = &mut self.nodes[i].m;
                    if m.halt_program_counter.is_some() && m.resumed_program_counter.is_none() {
                        m.resumed_program_counter = Some(program_counter);
                    }
                    self.tr(now, Some(id), "state_restored", vec![("pc", s(program_counter))]);
                }
                Action::CleanStart => self.tr(now, Some(id), "clean_start", vec![]),
                Action::Send(msg) => last = self.send(now, msg)?,
                Action::ChunkWritten { seq, offset, len } => {
                    if seq == 0 {
                        self.tr(now, Some(id), "sttram_write", vec![("seq", s(seq)), ("offset", s(offset)), ("len", s(len))]);
                    }
                }
                Action::SensorsReset => self.tr(now, Some(id), "sensors_reset", vec![]),
                Action::RecoveryDone { bytes, digest } => {
                    let rt = &mut self.nodes[i];
                    let sess = rt.session.take().unwrap_or_default();
                    let latency_ns = match (sess.seq0_start, sess.last_chunk_arrival) {
                        (Some(a), Some(b)) => b.saturating_sub(a),
                        _ => 0,
                    };
                    let latency = latency_ns as f64 * 1e-9;
                    let (epb, cmodel) = match sess.link {
                        Some(li) => {
                            let p = &self.links[li].params;
                            (p.energy_per_bit, crate::network::current_model_energy(p, latency))
                        }
                        None => (0.0, 0.0),
                    };
                    let m = &mut rt.m;
                    m.recoveries += 1;
                    m.recovery_bytes += bytes;
                    m.recovery_bits += sess.bits;
                    m.recovery_latency += latency;
                    m.recovery_energy += sess.bits as f64 * epb;
                    m.current_model_energy += cmodel;
                    self.tr(
                        now,
                        Some(id),
                        "recovery_done",
                        vec![("bytes", s(bytes)), ("digest", format!("{digest:016x}")), ("latency_ns", s(latency_ns))],
                    );
                }
                Action::AssistDone { bytes } => {
                    self.nodes[i].m.assists_served += 1;
                    self.tr(now, Some(id), "assist_done", vec![("bytes", s(bytes))]);
                }
            }
        }
        Ok(last)
    }

    fn on_transition(&mut self, i: usize, now: u64, from: McuState, event: McuEvent, to: McuState) -> Result<()> {
        let id = self.nodes[i].node.id;
        let rt = &mut self.nodes[i];
        if event == McuEvent::IntegrityFail {
            rt.m.attacks_detected += 1;
        }
        match (from.is_running(), to.is_running()) {
            (false, true) => {
                if let Some(t) = rt.down_since.take() {
                    rt.downtime_ns += now - t;
                }
            }
            (true, false) => rt.down_since = Some(now),
            _ => {}
        }
        if from == McuState::SupportRequest {
            rt.retry_gen += 1;
            rt.session = None;
        }
        if from == McuState::SupportAssist {
            rt.assist_gen += 1;
        }
        if to == McuState::SupportRequest {
            rt.retry_gen += 1;
            rt.retry_attempt = 0;
            rt.last_activity = now;
            rt.session = Some(Session::default());
            let (gen, at) = (rt.retry_gen, now + rt.retry_interval());
            self.sched.schedule(at, Some(id), Ev::Retry { node: id, gen })?;
        }
        if to == McuState::SupportAssist {
            rt.assist_gen += 1;
            let gen = rt.assist_gen;
            self.sched.schedule(now, Some(id), Ev::AssistStep { node: id, gen })?;
        }
        Ok(())
    }

    fn arrival(&mut self, now: u64, msg: Message) -> Result<()> {
        let id = msg.dst;
        let i = self.idx(id);
        let err = Self::node_err(id);
        let chunk_seq = match &msg.body {
            MessageBody::FirmwareChunk { seq, .. } => Some(*seq),
            _ => None,
        };
        let state = self.nodes[i].node.state();
        if chunk_seq.is_none_or(|q| q == 0) {
            let mut detail = vec![("kind", s(msg.kind_name())), ("src", s(msg.src))];
            if let Some(q) = chunk_seq {
                detail.push(("seq", s(q)));
            }
            detail.push(("state", s(state.label())));
            self.tr(now, Some(id), "recv", detail);
        }
        match &msg.body {
            MessageBody::RecoveryRequest { .. } => {
                let n = &self.nodes[i].node;
                if n.state().is_running() && !n.halted() {
                    self.tr(now, Some(id), "interrupt", vec![("irq", s("P_ASSIST")), ("requester", s(msg.src))]);
                    let n = &mut self.nodes[i].node;
                    let acts = n.on_interrupt(now, Interrupt::PAssist { requester: msg.src }).map_err(&err)?;
                    self.apply(i, now, acts)?;
                } else if self.nodes[i].node.restart_assist(msg.src).is_ok() {
                    self.tr(now, Some(id), "assist_restart", vec![("requester", s(msg.src))]);
                } else {
                    let halted = self.nodes[i].node.halted();
                    self.tr(
                        now,
                        Some(id),
                        "assist_refused",
                        vec![("requester", s(msg.src)), ("state", s(state.label())), ("halted", s(halted))],
                    );
                }
            }
            MessageBody::FirmwareChunk { .. } | MessageBody::RecoveryComplete { .. } => {
                if state != McuState::SupportRequest {
                    return Ok(());
                }
                match self.nodes[i].node.run_support_request_step(now, Some(&msg)) {
                    Ok(acts) => {
                        if acts.iter().any(|a| matches!(a, Action::ChunkWritten { .. })) {
                            let rt = &mut self.nodes[i];
                            rt.last_activity = now;
                            if let Some(sess) = rt.session.as_mut() {
                                sess.last_chunk_arrival = Some(now);
                            }
                        }
                        self.apply(i, now, acts)?;
                    }
                    Err(
                        e @ (NodeError::OutOfOrderChunk { .. }
                        | NodeError::IncompleteTransfer { .. }
                        | NodeError::DigestMismatch { .. }),
                    ) => {
                        self.tr(now, Some(id), "transfer_error", vec![("error", s(&e))]);
                        self.rerequest(i, now)?;
                    }
                    Err(e) => return Err(err(e)),
                }
            }
        }
        Ok(())
    }

    fn rerequest(&mut self, i: usize, now: u64) -> Result<()> {
        let id = self.nodes[i].node.id;
        let acts = self.nodes[i].node.run_support_request_step(now, None).map_err(Self::node_err(id))?;
        self.nodes[i].last_activity = now;
        self.apply(i, now, acts)?;
        Ok(())
    }

    fn assist_step(&mut self, now: u64, id: NodeId, gen: u64) -> Result<()> {
        let i = self.idx(id);
        if self.nodes[i].assist_gen != gen || self.nodes[i].node.state() != McuState::SupportAssist {
            return Ok(());
        }
        let acts = match self.nodes[i].node.run_support_assist_step(now) {
            Ok(acts) => acts,
            Err(NodeError::DonorCorrupted { bits, .. }) => {
                self.tr(now, Some(id), "donor_corrupted", vec![("sensor_bits", s(bits))]);
                self.nodes[i].m.attacks_detected += 1;
                let acts = self.nodes[i].node.abort_assist(now).map_err(Self::node_err(id))?;
                self.apply(i, now, acts)?;
                return Ok(());
            }
            Err(e) => return Err(Self::node_err(id)(e)),
        };
        let delivery = self.apply(i, now, acts)?;
        let rt = &self.nodes[i];
        if rt.assist_gen == gen && rt.node.state() == McuState::SupportAssist {
            let next = match delivery {
                Some(d) => d.tx_done_ns,
                None => now + rt.stall_floor_ns / 4,
            };
            self.sched.schedule(next.max(now + 1), Some(id), Ev::AssistStep { node: id, gen })?;
        }
        Ok(())
    }

    fn retry(&mut self, now: u64, id: NodeId, gen: u64) -> Result<()> {
        let i = self.idx(id);
        let rt = &mut self.nodes[i];
        if rt.retry_gen != gen || rt.node.state() != McuState::SupportRequest {
            return Ok(());
        }
        let interval = rt.retry_interval();
        if now - rt.last_activity < interval {
            let at = rt.last_activity + interval;
            self.sched.schedule(at, Some(id), Ev::Retry { node: id, gen })?;
            return Ok(());
        }
        if rt.retry_attempt >= MAX_RETRIES {
            self.tr(now, Some(id), "retry_exhausted", vec![("attempts", s(MAX_RETRIES))]);
            return Ok(());
        }
        rt.retry_attempt += 1;
        rt.donor_cursor += 1;
        let attempt = rt.retry_attempt;
        let at = now + rt.retry_interval();
        self.tr(now, Some(id), "retry", vec![("attempt", s(attempt))]);
        self.rerequest(i, now)?;
        self.sched.schedule(at, Some(id), Ev::Retry { node: id, gen })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetics::{MtjParams, Vec3};
    use crate::network::LinkParams;

    const HK: f64 = 0.05;

    fn base(size: u64) -> Scenario {
        let node = |id| NodeSpec {
            id,
            firmware: FirmwareSource::Generated { size, bootloader: 64 },
            integrity_poll_period: 1e-6,
            data_cell: MtjParams::data_cell(),
            sensor_cell: MtjParams::active_sensor(),
            power_off: vec![],
            instructions_per_second: 1_000_000,
        };
        Scenario {
            seed: 7,
            nodes: vec![node(1), node(2)],
            links: vec![LinkSpec { between: [1, 2], params: LinkParams::ethernet(), outages: vec![] }],
            attacks: vec![],
            duration_limit_s: 3600.0,
            chunk_size: 256,
            array: ArrayGeometry { rows: 256, cols: 64, sensor_interval: 32 },
            base_dir: None,
        }
    }

    fn dc_attack(target: NodeId, start: f64) -> AttackEvent {
        AttackEvent {
            target,
            start,
            duration: 3e-6,
            profile: FieldProfile::dc(2.0 * HK, Vec3::Z),
            mode: AttackMode::Active,
            physics_window: Some(100e-9),
        }
    }

    #[test]
    fn environment_is_half_open() {
        let mut s = base(1000);
        s.attacks.push(dc_attack(2, 1e-6));
        assert!(attack_environment(&s, 0).iter().all(|(_, p)| p.is_none()));
        let inside = attack_environment(&s, 2_000);
        assert_eq!(inside[0], (1, None));
        assert_eq!(inside[1].1, Some(FieldProfile::dc(2.0 * HK, Vec3::Z)));
        assert!(attack_environment(&s, 4_000).iter().all(|(_, p)| p.is_none()));
        assert!(attack_environment(&s, 3_999)[1].1.is_some());
    }

    #[test]
    fn quiet_network_stays_in_s3() {
        let out = run(&base(1000)).unwrap();
        assert_eq!(out.metrics.termination, Termination::Quiescent);
        for n in &out.metrics.nodes {
            assert_eq!(n.final_state, Some(McuState::Executing));
            assert_eq!(n.recovery_bytes, 0);
            assert_eq!(n.recovery_energy, 0.0);
            assert!(n.final_digest_match);
            assert_eq!(n.downtime, 0.0);
        }
        assert!(out.metrics.links.iter().all(|l| l.accounting.bits == 0));
    }

    #[test]
    fn active_attack_recovers_victim() {
        let mut s = base(1500);
        s.attacks.push(dc_attack(1, 10.3e-6));
        let out = run(&s).unwrap();
        let m = &out.metrics;
        let v = m.node(1).unwrap();
        assert_eq!(v.final_state, Some(McuState::Executing));
        assert!(v.final_digest_match && m.node(2).unwrap().final_digest_match);
        assert_eq!(v.recovery_bytes, 1500);
        assert_eq!(v.recovery_bits, 8 * (1500 + 6 * FRAME_OVERHEAD as u64));
        assert_eq!(v.attacks_detected, 1);
        assert!(v.halt_program_counter.is_some());
        assert_eq!(v.resumed_program_counter, v.halt_program_counter);
        assert_eq!(m.node(2).unwrap().assists_served, 1);
        let halt = out.trace.records.iter().find(|r| r.get("irq") == Some("HALT")).unwrap();
        let first_sensor = out.trace.first("sensor_flip").unwrap();
        assert!(halt.time_ns >= first_sensor.time_ns);
        let end = out.trace.first("attack_end").unwrap();
        let preq = out.trace.records.iter().find(|r| r.get("irq") == Some("P_REQUEST")).unwrap();
        assert!(preq.time_ns >= end.time_ns);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut s = base(1500);
        s.attacks.push(dc_attack(2, 5e-6));
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.trace.to_text(), b.trace.to_text());
        assert_eq!(a.metrics.to_json(), b.metrics.to_json());
    }

    #[test]
    fn synthetic_scales_linearly() {
        let chunk = 256u64;
        let mut small = base(chunk * 6);
        small.attacks.push(dc_attack(1, 10.3e-6));
        let mut big = small.clone();
        let k = 1000u64;
        for n in &mut big.nodes {
            n.firmware = FirmwareSource::Synthetic { size: chunk * 6 * k, bootloader: 64 };
        }
        let a = run(&small).unwrap().metrics;
        let b = run(&big).unwrap().metrics;
        let (a, b) = (a.node(1).unwrap(), b.node(1).unwrap());
        assert!(b.final_digest_match);
        assert_eq!(b.recovery_bytes, k * a.recovery_bytes);
        assert_eq!(b.recovery_bits, k * a.recovery_bits);
        assert!((b.recovery_latency / a.recovery_latency - k as f64).abs() < 1e-9);
        assert!((b.recovery_energy / a.recovery_energy - k as f64).abs() < 1e-9);
    }

    #[test]
    fn lone_victim_deadlocks() {
        let mut s = base(1000);
        s.nodes.truncate(1);
        s.links.clear();
        s.nodes[0].power_off = vec![Window { start: 1e-3, end: 2e-3 }];
        s.attacks.push(AttackEvent { mode: AttackMode::Passive, ..dc_attack(1, 1.2e-3) });
        match run(&s) {
            Err(EngineError::Deadlock { dump, .. }) => assert!(dump.contains("S6"), "{dump}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outage_delays_recovery_until_link_returns() {
        let mut s = base(1500);
        s.attacks.push(dc_attack(1, 10.3e-6));
        s.links[0].outages = vec![Window { start: 0.0, end: 0.5 }];
        let out = run(&s).unwrap();
        let v = out.metrics.node(1).unwrap();
        assert!(v.final_digest_match);
        assert_eq!(v.final_state, Some(McuState::Executing));
        assert!(out.trace.first("recovery_done").unwrap().time_ns >= 500_000_000);
        assert!(out.trace.first("retry").is_some());
    }

    #[test]
    fn three_nodes_use_lowest_donor() {
        let mut s = base(1000);
        let mut third = s.nodes[0].clone();
        third.id = 3;
        s.nodes.push(third);
        s.links.push(LinkSpec { between: [3, 1], params: LinkParams::wifi(), outages: vec![] });
        s.attacks.push(dc_attack(3, 10.3e-6));
        let out = run(&s).unwrap();
        let assist = out.trace.records.iter().find(|r| r.get("irq") == Some("P_ASSIST")).unwrap();
        assert_eq!(assist.node, Some(1));
        assert!(out.metrics.nodes.iter().all(|n| n.final_digest_match));
    }
}
