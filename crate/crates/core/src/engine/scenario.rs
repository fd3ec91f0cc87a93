//! Scenario documents: JSON in, fully defaulted and validated out.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{FieldKind, FieldProfile, MtjParams};
use crate::memory::{DEFAULT_COLS, DEFAULT_ROWS, DEFAULT_SENSOR_INTERVAL};
use crate::network::{LinkKind, LinkParams, NodeId, BROADCAST};
use crate::node::{DEFAULT_CHUNK_SIZE, DEFAULT_INSTRUCTIONS_PER_SECOND};

pub const DEFAULT_POLL_PERIOD_S: f64 = 10e-6;
pub const DEFAULT_DURATION_LIMIT_S: f64 = 3600.0;
/// Simulated settling time after a ramp before the exposure is resolved.
pub const DEFAULT_SETTLE_S: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("semantic error: {0}")]
    Semantic(String),
}

/// Converts seconds to whole nanoseconds.
pub fn to_ns(s: f64) -> u64 {
    (s * 1e9).round() as u64
}

/// Half-open `[start, end)` interval in seconds, written `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for Window {
    fn from([start, end]: [f64; 2]) -> Self {
        Window { start, end }
    }
}

impl From<Window> for [f64; 2] {
    fn from(w: Window) -> Self {
        [w.start, w.end]
    }
}

impl Window {
    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn covers(&self, start: f64, end: f64) -> bool {
        self.start <= start && end <= self.end
    }

    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        self.start < end && start < self.end
    }

    pub fn ns(&self) -> (u64, u64) {
        (to_ns(self.start), to_ns(self.end))
    }

    fn check(&self, what: &str) -> Result<(), ScenarioError> {
        if !(self.start >= 0.0 && self.end > self.start && self.end.is_finite()) {
            return Err(ScenarioError::Semantic(format!(
                "{what} window [{}, {}] must satisfy 0 <= start < end",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    pub sensor_interval: usize,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry { rows: DEFAULT_ROWS, cols: DEFAULT_COLS, sensor_interval: DEFAULT_SENSOR_INTERVAL }
    }
}

impl ArrayGeometry {
    pub fn data_capacity(&self) -> u64 {
        let data_rows = self.rows - self.rows.div_ceil(self.sensor_interval.max(1));
        (data_rows * (self.cols / 8)) as u64
    }
}

/// Where a node's firmware comes from. `generated` and `synthetic` content
/// is derived from the scenario seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FirmwareSource {
    Generated {
        size: u64,
        #[serde(default)]
        bootloader: u64,
    },
    Synthetic {
        size: u64,
        #[serde(default)]
        bootloader: u64,
    },
    File {
        path: String,
        #[serde(default)]
        bootloader: u64,
    },
}

impl FirmwareSource {
    pub fn bootloader(&self) -> u64 {
        match self {
            FirmwareSource::Generated { bootloader, .. }
            | FirmwareSource::Synthetic { bootloader, .. }
            | FirmwareSource::File { bootloader, .. } => *bootloader,
        }
    }
}

fn default_poll() -> f64 {
    DEFAULT_POLL_PERIOD_S
}

fn default_ips() -> u64 {
    DEFAULT_INSTRUCTIONS_PER_SECOND
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub firmware: FirmwareSource,
    /// s
    #[serde(default = "default_poll")]
    pub integrity_poll_period: f64,
    #[serde(default = "MtjParams::data_cell")]
    pub data_cell: MtjParams,
    #[serde(default = "MtjParams::active_sensor")]
    pub sensor_cell: MtjParams,
    #[serde(default)]
    pub power_off: Vec<Window>,
    #[serde(default = "default_ips")]
    pub instructions_per_second: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkParamsDoc {
    kind: LinkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_per_bit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supply_voltage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra_current: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    propagation_delay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSpecDoc {
    between: [NodeId; 2],
    params: LinkParamsDoc,
    #[serde(default)]
    outages: Vec<Window>,
}

/// A direct link. Parameters not given in the document take the defaults of
/// the link kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "LinkSpecDoc", into = "LinkSpecDoc")]
pub struct LinkSpec {
    pub between: [NodeId; 2],
    pub params: LinkParams,
    pub outages: Vec<Window>,
}

impl From<LinkSpecDoc> for LinkSpec {
    fn from(d: LinkSpecDoc) -> Self {
        let base = LinkParams::defaults_for(d.params.kind);
        let p = d.params;
        LinkSpec {
            between: d.between,
            params: LinkParams {
                kind: p.kind,
                data_rate: p.data_rate.unwrap_or(base.data_rate),
                energy_per_bit: p.energy_per_bit.unwrap_or(base.energy_per_bit),
                supply_voltage: p.supply_voltage.unwrap_or(base.supply_voltage),
                extra_current: p.extra_current.unwrap_or(base.extra_current),
                propagation_delay: p.propagation_delay.unwrap_or(base.propagation_delay),
            },
            outages: d.outages,
        }
    }
}

impl From<LinkSpec> for LinkSpecDoc {
    fn from(l: LinkSpec) -> Self {
        let p = l.params;
        LinkSpecDoc {
            between: l.between,
            params: LinkParamsDoc {
                kind: p.kind,
                data_rate: Some(p.data_rate),
                energy_per_bit: Some(p.energy_per_bit),
                supply_voltage: Some(p.supply_voltage),
                extra_current: Some(p.extra_current),
                propagation_delay: Some(p.propagation_delay),
            },
            outages: l.outages,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Active,
    Passive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEvent {
    pub target: NodeId,
    /// s
    pub start: f64,
    /// s
    pub duration: f64,
    pub profile: FieldProfile,
    pub mode: AttackMode,
    /// Simulated span of cell dynamics, s. Defaults to the ramp time plus one
    /// microsecond of settling, capped at `duration`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physics_window: Option<f64>,
}

impl AttackEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn physics_window_s(&self) -> f64 {
        let ramp = if self.profile.kind == FieldKind::RampAc { self.profile.ramp_time } else { 0.0 };
        self.physics_window.unwrap_or(ramp + DEFAULT_SETTLE_S).min(self.duration)
    }

    pub fn start_ns(&self) -> u64 {
        to_ns(self.start)
    }

    pub fn end_ns(&self) -> u64 {
        to_ns(self.end())
    }

    /// Field present at `t_ns`: `[start, start + duration)`.
    pub fn active_at(&self, t_ns: u64) -> bool {
        self.start_ns() <= t_ns && t_ns < self.end_ns()
    }
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn default_limit() -> f64 {
    DEFAULT_DURATION_LIMIT_S
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackEvent>,
    #[serde(default = "default_limit")]
    pub duration_limit_s: f64,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default)]
    pub array: ArrayGeometry,
    /// Directory that relative firmware paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Parses and validates a scenario document.
pub fn load_scenario(document: &[u8]) -> Result<Scenario, ScenarioError> {
    let s: Scenario = serde_json::from_slice(document).map_err(|e| ScenarioError::Schema(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

impl Scenario {
    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Single-line JSON, as echoed into trace headers.
    pub fn to_json_compact(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn duration_limit_ns(&self) -> u64 {
        to_ns(self.duration_limit_s)
    }

    pub fn powered_at(&self, id: NodeId, t: f64) -> bool {
        self.node(id).is_some_and(|n| !n.power_off.iter().any(|w| w.contains(t)))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let sem = |m: String| Err(ScenarioError::Semantic(m));
        if self.nodes.is_empty() {
            return sem("a scenario needs at least one node".into());
        }
        if !(self.duration_limit_s > 0.0 && self.duration_limit_s.is_finite() && self.duration_limit_s < 1.8e10) {
            return sem(format!("duration_limit_s {} must be positive and finite", self.duration_limit_s));
        }
        if self.chunk_size == 0 || self.chunk_size > u32::MAX as usize {
            return sem(format!("chunk_size {} out of range", self.chunk_size));
        }
        let g = &self.array;
        if g.sensor_interval < 2 || g.rows < g.sensor_interval || g.cols < 8 || g.cols % 8 != 0 {
            return sem(format!(
                "array {}x{} with sensor interval {} is invalid",
                g.rows, g.cols, g.sensor_interval
            ));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id == BROADCAST {
                return sem(format!("node id {} is reserved", n.id));
            }
            if !ids.insert(n.id) {
                return sem(format!("duplicate node id {}", n.id));
            }
            if !(n.integrity_poll_period > 0.0 && to_ns(n.integrity_poll_period) > 0) {
                return sem(format!("node {}: integrity_poll_period must be at least 1 ns", n.id));
            }
            if n.instructions_per_second == 0 {
                return sem(format!("node {}: instructions_per_second must be positive", n.id));
            }
            for (what, p) in [("data_cell", &n.data_cell), ("sensor_cell", &n.sensor_cell)] {
                if let Err(e) = p.validate() {
                    return sem(format!("node {}: {what}: {e}", n.id));
                }
            }
            if n.sensor_cell.susceptibility_factor <= n.data_cell.susceptibility_factor {
                return sem(format!("node {}: sensor cells must be more susceptible than data cells", n.id));
            }
            let mut windows = n.power_off.clone();
            for w in &windows {
                w.check(&format!("node {} power_off", n.id))?;
            }
            windows.sort_by(|a, b| a.start.total_cmp(&b.start));
            if windows.windows(2).any(|p| p[1].start < p[0].end) {
                return sem(format!("node {}: power_off windows overlap", n.id));
            }
            match &n.firmware {
                FirmwareSource::Generated { size, bootloader } => {
                    if size > &g.data_capacity() {
                        return sem(format!(
                            "node {}: firmware of {size} bytes exceeds data capacity {}",
                            n.id,
                            g.data_capacity()
                        ));
                    }
                    if bootloader > size {
                        return sem(format!("node {}: bootloader larger than firmware", n.id));
                    }
                }
                FirmwareSource::Synthetic { size, bootloader } => {
                    if bootloader > size {
                        return sem(format!("node {}: bootloader larger than firmware", n.id));
                    }
                }
                FirmwareSource::File { path, .. } => {
                    if path.is_empty() {
                        return sem(format!("node {}: empty firmware path", n.id));
                    }
                }
            }
        }
        if self.nodes.windows(2).any(|p| p[0].firmware != p[1].firmware) {
            return sem("nodes must share one firmware image (homogeneous network)".into());
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            let [a, b] = l.between;
            for x in [a, b] {
                if !ids.contains(&x) {
                    return sem(format!("link endpoint {x} is not a declared node"));
                }
            }
            if a == b {
                return sem(format!("link from node {a} to itself"));
            }
            if !pairs.insert((a.min(b), a.max(b))) {
                return sem(format!("duplicate link between {a} and {b}"));
            }
            if let Err(e) = l.params.validate() {
                return sem(format!("link {a}-{b}: {e}"));
            }
            for w in &l.outages {
                w.check(&format!("link {a}-{b} outage"))?;
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            let Some(n) = self.node(a.target) else {
                return sem(format!("attack {i} targets undeclared node {}", a.target));
            };
            if !(a.start >= 0.0 && a.start.is_finite()) {
                return sem(format!("attack {i}: start must be >= 0"));
            }
            if !(a.duration > 0.0 && a.duration.is_finite() && to_ns(a.duration) > 0) {
                return sem(format!("attack {i}: duration must be at least 1 ns"));
            }
            if let Err(e) = a.profile.validate() {
                return sem(format!("attack {i}: {e}"));
            }
            if let Some(w) = a.physics_window {
                if !(w > 0.0 && w.is_finite()) {
                    return sem(format!("attack {i}: physics_window must be positive"));
                }
            }
            let (s, e) = (a.start, a.end());
            match a.mode {
                AttackMode::Passive => {
                    if !n.power_off.iter().any(|w| w.covers(s, e)) {
                        return sem(format!("attack {i}: passive attack on node {} while it is powered", a.target));
                    }
                }
                AttackMode::Active => {
                    if n.power_off.iter().any(|w| w.overlaps(s, e)) {
                        return sem(format!("attack {i}: active attack on node {} while it is off", a.target));
                    }
                }
            }
        }
        Ok(())
    }
}
