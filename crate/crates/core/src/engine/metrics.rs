//! Per-node and per-link results of a run.

use serde::{Deserialize, Serialize};

use crate::network::{LinkAccounting, LinkKind, NodeId};
use crate::node::McuState;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub id: NodeId,
    /// HALT interrupts plus failed boot integrity checks.
    pub attacks_detected: u64,
    /// s from the first sensor flip to the first data flip of the first
    /// attack where both happened.
    pub detection_lead_time: Option<f64>,
    /// s spent halted
    pub halt_duration: f64,
    pub halt_program_counter: Option<u64>,
    pub resumed_program_counter: Option<u64>,
    pub recoveries: u64,
    pub recovery_bytes: u64,
    /// Frame bits of the firmware chunks received during recoveries.
    pub recovery_bits: u64,
    /// s from the start of the seq-0 chunk to the arrival of the last chunk.
    pub recovery_latency: f64,
    /// J, recovery_bits × energy per bit
    pub recovery_energy: f64,
    /// J, extra current × supply voltage × recovery_latency
    pub current_model_energy: f64,
    pub assists_served: u64,
    /// s outside S3/S4
    pub downtime: f64,
    pub final_state: Option<McuState>,
    pub final_digest_match: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub between: [NodeId; 2],
    pub kind: LinkKind,
    #[serde(flatten)]
    pub accounting: LinkAccounting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Quiescent,
    DurationLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub termination: Termination,
    /// s
    pub end_time: f64,
    pub events_dispatched: u64,
    pub reference_digest: String,
    pub nodes: Vec<NodeMetrics>,
    pub links: Vec<LinkMetrics>,
}

const CSV_COLUMNS: [&str; 17] = [
    "id",
    "attacks_detected",
    "detection_lead_time",
    "halt_duration",
    "halt_program_counter",
    "resumed_program_counter",
    "recoveries",
    "recovery_bytes",
    "recovery_bits",
    "recovery_latency",
    "recovery_energy",
    "current_model_energy",
    "assists_served",
    "downtime",
    "final_state",
    "final_digest_match",
    "end_time",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl MetricsReport {
    pub fn node(&self, id: NodeId) -> Option<&NodeMetrics> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// One row per node. Link totals are JSON-only.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for n in &self.nodes {
            let row = [
                n.id.to_string(),
                n.attacks_detected.to_string(),
                opt(&n.detection_lead_time),
                n.halt_duration.to_string(),
                opt(&n.halt_program_counter),
                opt(&n.resumed_program_counter),
                n.recoveries.to_string(),
                n.recovery_bytes.to_string(),
                n.recovery_bits.to_string(),
                n.recovery_latency.to_string(),
                n.recovery_energy.to_string(),
                n.current_model_energy.to_string(),
                n.assists_served.to_string(),
                n.downtime.to_string(),
                n.final_state.map(|s| s.label().to_string()).unwrap_or_default(),
                n.final_digest_match.to_string(),
                self.end_time.to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
