#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sttram_sentinel::engine::{
    ArrayGeometry, AttackEvent, AttackMode, FirmwareSource, LinkSpec, NodeSpec, Scenario, Trace, Window,
};
use sttram_sentinel::magnetics::{FieldProfile, MtjParams, Vec3, DEFAULT_GAMMA, DEFAULT_H_K};
use sttram_sentinel::network::LinkParams;
use sttram_sentinel::node::{McuEvent, McuState, EDGES};

pub const HK: f64 = DEFAULT_H_K;

pub fn f0() -> f64 {
    DEFAULT_GAMMA * HK / (2.0 * std::f64::consts::PI)
}

/// A small pool keeps the exposure cache hot across thousands of runs.
pub fn profile_pool() -> Vec<FieldProfile> {
    vec![
        FieldProfile::dc(2.0 * HK, Vec3::Z),
        FieldProfile::dc(1.5 * HK, Vec3::new(0.0, 0.0, -1.0)),
        FieldProfile::dc(0.5 * HK, Vec3::Z),
        FieldProfile::ac(2.0 * HK, Vec3::new(1.0, 0.0, 1.0).normalized(), f0()),
    ]
}

/// Random small network: 1 to 4 nodes, any link topology, power cycles,
/// outages and up to three attacks.
pub fn random_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    let n = rng.gen_range(1..=4);
    let mut ids: Vec<u64> = (1..=9).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    let size = rng.gen_range(1..=100u64);
    let firmware = FirmwareSource::Generated { size, bootloader: rng.gen_range(0..=size) };
    let sensor = if rng.gen_bool(0.5) { MtjParams::active_sensor() } else { MtjParams::passive_sensor() };
    let poll = *[0.5e-6, 1e-6, 10e-6].choose(rng).unwrap();
    let ms = |rng: &mut ChaCha8Rng| rng.gen_range(0..10_000) as f64 * 1e-6;
    let nodes: Vec<NodeSpec> = ids
        .iter()
        .map(|&id| {
            let mut power_off = Vec::new();
            if rng.gen_bool(0.3) {
                let a = ms(rng);
                power_off.push(Window { start: a, end: a + rng.gen_range(1..5_000) as f64 * 1e-6 });
            }
            NodeSpec {
                id,
                firmware: firmware.clone(),
                integrity_poll_period: poll,
                data_cell: MtjParams::data_cell(),
                sensor_cell: sensor.clone(),
                power_off,
                instructions_per_second: 1_000_000,
            }
        })
        .collect();
    let mut links = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.7) {
                let params = match rng.gen_range(0..3) {
                    0 => LinkParams::ethernet(),
                    1 => LinkParams::wifi(),
                    _ => LinkParams::uart(),
                };
                let mut outages = Vec::new();
                if rng.gen_bool(0.2) {
                    let a = ms(rng);
                    outages.push(Window { start: a, end: a + rng.gen_range(1..200_000) as f64 * 1e-6 });
                }
                links.push(LinkSpec { between: [ids[i], ids[j]], params, outages });
            }
        }
    }
    let pool = profile_pool();
    let mut attacks = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let target = *ids.choose(rng).unwrap();
        let start = ms(rng);
        let duration = *[1e-6, 5e-6, 50e-6].choose(rng).unwrap();
        let spec = nodes.iter().find(|s| s.id == target).unwrap();
        let end = start + duration;
        let mode = if spec.power_off.iter().any(|w| w.covers(start, end)) {
            AttackMode::Passive
        } else if spec.power_off.iter().any(|w| w.overlaps(start, end)) {
            continue;
        } else {
            AttackMode::Active
        };
        attacks.push(AttackEvent {
            target,
            start,
            duration,
            profile: pool.choose(rng).unwrap().clone(),
            mode,
            physics_window: Some(20e-9),
        });
    }
    Scenario {
        seed: rng.gen(),
        nodes,
        links,
        attacks,
        duration_limit_s: 50.0,
        chunk_size: rng.gen_range(1..=64),
        array: ArrayGeometry { rows: 64, cols: 16, sensor_interval: 16 },
        base_dir: None,
    }
}

fn state(label: &str) -> Option<McuState> {
    McuState::ALL.into_iter().find(|s| s.label() == label)
}

fn event(name: &str) -> Option<McuEvent> {
    McuEvent::ALL.into_iter().find(|e| e.name() == name)
}

/// Checks every traced transition against the edge set; returns the number
/// of transitions seen and the edges exercised.
pub fn check_transitions(
    trace: &Trace,
    seen: &mut BTreeSet<(McuState, McuEvent, McuState)>,
) -> Result<usize, String> {
    let edges: BTreeSet<_> = EDGES.iter().copied().collect();
    let mut count = 0;
    for r in trace.events("transition") {
        let parsed = (
            r.get("from").and_then(state),
            r.get("event").and_then(event),
            r.get("to").and_then(state),
        );
        let (Some(a), Some(e), Some(b)) = parsed else {
            return Err(format!("unparseable transition record: {r}"));
        };
        if !edges.contains(&(a, e, b)) {
            return Err(format!("undeclared transition {a} -{}-> {b}", e.name()));
        }
        seen.insert((a, e, b));
        count += 1;
    }
    Ok(count)
}
