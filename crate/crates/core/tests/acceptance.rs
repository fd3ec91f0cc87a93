//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sttram_sentinel::engine::{self, bundled, EngineError, RunOutput, Scenario};
use sttram_sentinel::magnetics::{
    integrate_with, max_stable_step, simulate_exposure, switching_threshold, Bit, FieldKind, FieldProfile,
    Magnetization, MtjParams, SpinCurrent, Vec3,
};
use sttram_sentinel::memory::{
    AssistOp, EpromLayout, ExposureCache, RequestOp, SUPPORT_ASSIST_LEN, SUPPORT_REQUEST_LEN,
};
use sttram_sentinel::node::{transition, McuEvent, McuState, EDGES};

use common::{check_transitions, random_scenario, HK};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario(name: &str) -> Result<Scenario, String> {
    bundled::bundled(name).ok_or(format!("{name} not bundled"))?.map_err(|e| format!("{name}: {e}"))
}

fn run_named(name: &str) -> Result<(RunOutput, f64), String> {
    let s = scenario(name)?;
    let t = Instant::now();
    let out = engine::run(&s).map_err(|e| format!("{name}: {e}"))?;
    Ok((out, t.elapsed().as_secs_f64()))
}

fn victim(out: &RunOutput, name: &str) -> Result<sttram_sentinel::engine::NodeMetrics, String> {
    out.metrics
        .nodes
        .iter()
        .find(|n| n.recoveries > 0)
        .cloned()
        .ok_or(format!("{name}: no node recovered"))
}

fn c1_latency() -> Outcome {
    let mut parts = Vec::new();
    for (name, lo, hi) in [("table3_ethernet", 8.1, 9.9), ("table3_wifi", 972.0, 1074.0)] {
        let (out, wall) = run_named(name)?;
        let v = victim(&out, name)?;
        ensure((lo..=hi).contains(&v.recovery_latency), || {
            format!("{name} latency {} s outside [{lo}, {hi}]", v.recovery_latency)
        })?;
        ensure(wall < 5.0, || format!("{name} took {wall:.2} s wall clock"))?;
        parts.push(format!("{name} {:.4} s in {wall:.2} s", v.recovery_latency));
    }
    Ok(parts.join(", "))
}

fn c2_energy() -> Outcome {
    let mut parts = Vec::new();
    for name in ["table3_ethernet", "table3_wifi"] {
        let s = scenario(name)?;
        let (out, _) = run_named(name)?;
        let v = victim(&out, name)?;
        let epb = s.links[0].params.energy_per_bit;
        let exact = v.recovery_bits as f64 * epb;
        ensure(v.recovery_energy == exact, || format!("{name}: {} J != bits × epb {exact} J", v.recovery_energy))?;
        let payload = 8.0 * v.recovery_bytes as f64 * epb;
        let rel = (v.recovery_energy - payload) / payload;
        ensure(rel.abs() <= 0.03, || format!("{name}: framing adds {:.2}%", 100.0 * rel))?;
        ensure(v.current_model_energy > 0.0, || format!("{name}: current-model energy missing"))?;
        parts.push(format!(
            "{name} {:.4} J ({:+.2}% over payload), current model {:.2} J",
            v.recovery_energy,
            100.0 * rel,
            v.current_model_energy
        ));
    }
    Ok(parts.join(", "))
}

fn c3_polarity() -> Outcome {
    let p = MtjParams::data_cell();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut one_sided = 0;
    for _ in 0..200 {
        let amp = rng.gen_range(f64::EPSILON..=1.0) * 3.0 * HK;
        let dir = if rng.gen_bool(0.5) { Vec3::Z } else { -Vec3::Z };
        let duration = rng.gen_range(0.1e-6..=1.0e-6);
        let prof = FieldProfile::dc(amp, dir);
        let f = |b| simulate_exposure(b, &p, &prof, duration).map(|o| o.flipped).map_err(|e| e.to_string());
        let (z, o) = (f(Bit::Zero)?, f(Bit::One)?);
        ensure(!(z && o), || format!("DC {amp} T along {dir:?} flipped both polarities"))?;
        one_sided += (z || o) as u32;
    }
    let f0 = p.gamma * p.h_k / (2.0 * std::f64::consts::PI);
    let ac = FieldProfile::ac(2.0 * HK, Vec3::new(1.0, 0.0, 1.0).normalized(), f0);
    let flips = |b| simulate_exposure(b, &p, &ac, 20.0 / f0).map(|o| o.flipped).map_err(|e| e.to_string());
    ensure(flips(Bit::Zero)? && flips(Bit::One)?, || "AC witness did not flip both polarities".into())?;
    Ok(format!("200 DC profiles unipolar ({one_sided} flipped one polarity), AC witness bipolar"))
}

fn c4_sensor_first() -> Outcome {
    let mut checked = Vec::new();
    for name in bundled::names() {
        let s = scenario(name)?;
        let ramps: Vec<_> = s.attacks.iter().filter(|a| a.profile.kind == FieldKind::RampAc).collect();
        if ramps.is_empty() {
            continue;
        }
        let mut above = false;
        for a in &ramps {
            let spec = s.node(a.target).ok_or("attack target missing")?;
            let th = switching_threshold(&spec.data_cell, spec.data_cell.easy_axis, 1e-6).map_err(|e| e.to_string())?;
            above |= a.profile.amplitude > th;
        }
        if !above {
            continue;
        }
        let (out, _) = run_named(name)?;
        let t = &out.trace;
        let sensor = t.first("sensor_flip").ok_or(format!("{name}: no sensor flip"))?.time_ns;
        let data = t.first("data_flip").ok_or(format!("{name}: no data flip"))?.time_ns;
        let halt = t
            .events("interrupt")
            .find(|r| r.get("irq") == Some("HALT"))
            .ok_or(format!("{name}: no HALT"))?
            .time_ns;
        ensure(sensor < data, || format!("{name}: sensor flip {sensor} ns not before data flip {data} ns"))?;
        ensure(halt < data, || format!("{name}: HALT {halt} ns not before data flip {data} ns"))?;
        let lead = out.metrics.nodes.iter().filter_map(|n| n.detection_lead_time).next();
        ensure(lead.is_some_and(|l| l > 0.0), || format!("{name}: detection lead time {lead:?}"))?;
        checked.push(format!("{name} (sensor {sensor} ns, HALT {halt} ns, data {data} ns)"));
    }
    ensure(!checked.is_empty(), || "no bundled RAMP_AC scenario above the data threshold".into())?;
    Ok(checked.join(", "))
}

fn c5_active_recovery() -> Outcome {
    let name = "active_attack_64k";
    let (out, _) = run_named(name)?;
    for n in &out.metrics.nodes {
        ensure(n.final_state == Some(McuState::Executing), || format!("node {} ends in {:?}", n.id, n.final_state))?;
        ensure(n.final_digest_match, || format!("node {} digest mismatch", n.id))?;
    }
    let v = victim(&out, name)?;
    ensure(v.halt_program_counter.is_some() && v.halt_program_counter == v.resumed_program_counter, || {
        format!("halt pc {:?} resumed pc {:?}", v.halt_program_counter, v.resumed_program_counter)
    })?;
    Ok(format!(
        "{} nodes in S3 with matching digests, victim {} resumed at pc {}",
        out.metrics.nodes.len(),
        v.id,
        v.resumed_program_counter.unwrap()
    ))
}

fn c6_passive_boot() -> Outcome {
    let name = "passive_attack_boot";
    let (out, _) = run_named(name)?;
    let t = &out.trace;
    ensure(!t.events("interrupt").any(|r| r.get("irq") == Some("HALT")), || "HALT in trace".into())?;
    let v = victim(&out, name)?.id;
    let mine: Vec<_> = t.records.iter().filter(|r| r.node == Some(v)).collect();
    let step = |from: usize, pred: &dyn Fn(&sttram_sentinel::engine::TraceRecord) -> bool, what: &str| {
        mine[from..].iter().position(|r| pred(r)).map(|i| from + i).ok_or(format!("missing {what}"))
    };
    let power = step(0, &|r| r.event == "power_on", "power_on")?;
    let on = step(power, &|r| r.event == "integrity" && r.get("passed") == Some("false"), "failed integrity check")?;
    let s6 = step(on, &|r| r.event == "transition" && r.get("to") == Some("S6"), "S6")?;
    let done = step(s6, &|r| r.event == "recovery_done", "recovery_done")?;
    let s3 = step(done, &|r| r.event == "transition" && r.get("to") == Some("S3"), "reboot to S3")?;
    Ok(format!(
        "node {v}: power_on {} ns, S6 {} ns, recovery_done {} ns, S3 {} ns, no HALT",
        mine[on].time_ns, mine[s6].time_ns, mine[done].time_ns, mine[s3].time_ns
    ))
}

fn c7_state_machine() -> Outcome {
    let edges: BTreeSet<_> = EDGES.iter().copied().collect();
    for s in McuState::ALL {
        for e in McuEvent::ALL {
            let declared = edges.iter().find(|(a, b, _)| *a == s && *b == e).map(|x| x.2);
            ensure(transition(s, e).ok() == declared, || format!("{s} on {} disagrees with the edge set", e.name()))?;
        }
    }
    let started = Instant::now();
    let mut cache = ExposureCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = BTreeSet::new();
    let (mut transitions, mut deadlocks) = (0, 0);
    for i in 0..10_000 {
        let s = random_scenario(&mut rng);
        match engine::run_with_cache(&s, &mut cache) {
            Ok(out) => transitions += check_transitions(&out.trace, &mut seen).map_err(|e| format!("run {i}: {e}"))?,
            Err(EngineError::Deadlock { .. }) => deadlocks += 1,
            Err(e) => return Err(format!("run {i}: {e}\n{}", s.to_json())),
        }
    }
    Ok(format!(
        "{} pairs match, 10000 runs ({deadlocks} deadlocked) took {} transitions over {}/{} edges in {:.1} s",
        McuState::ALL.len() * McuEvent::ALL.len(),
        transitions,
        seen.len(),
        EDGES.len(),
        started.elapsed().as_secs_f64()
    ))
}

fn c8_numerics() -> Outcome {
    let p = MtjParams::data_cell();
    let prof = FieldProfile::dc(2.0 * HK, Vec3::Z);
    let dt = max_stable_step(&p, &prof);
    let duration = 100e-9;
    let mut drift: f64 = 0.0;
    let mut run = |dt: f64| -> Result<Vec3, String> {
        let m0 = Magnetization::for_bit(Bit::One, p.easy_axis);
        integrate_with(m0, &prof, &SpinCurrent::disabled(), &p, duration, dt, |_, m| {
            drift = drift.max((m.norm() - 1.0).abs());
        })
        .map_err(|e| e.to_string())
    };
    let coarse = run(dt)?;
    let half = run(dt / 2.0)?;
    let reference = run(dt / 8.0)?;
    let ac = FieldProfile::ac(2.0 * HK, Vec3::new(1.0, 0.0, 1.0).normalized(), 1.4e9);
    let m0 = Magnetization::for_bit(Bit::Zero, p.easy_axis);
    integrate_with(m0, &ac, &SpinCurrent::disabled(), &p, 20e-9, max_stable_step(&p, &ac), |_, m| {
        drift = drift.max((m.norm() - 1.0).abs());
    })
    .map_err(|e| e.to_string())?;
    ensure(drift < 1e-9, || format!("norm drift {drift:e}"))?;
    let ratio = (coarse - reference).norm() / (half - reference).norm();
    ensure(ratio >= 8.0, || format!("RK4 error ratio {ratio:.2}"))?;
    let th = switching_threshold(&p, p.easy_axis, 1e-6).map_err(|e| e.to_string())?;
    let rel = (th - p.h_k) / p.h_k;
    ensure(rel.abs() <= 0.05, || format!("threshold {th} T is {:+.2}% from h_k", 100.0 * rel))?;
    Ok(format!("max drift {drift:.1e}, error ratio {ratio:.1}, threshold {:+.2}% of h_k", 100.0 * rel))
}

fn c9_determinism() -> Outcome {
    let mut names = Vec::new();
    for name in bundled::names() {
        let (a, _) = run_named(name)?;
        let (b, _) = run_named(name)?;
        ensure(a.trace.to_text() == b.trace.to_text(), || format!("{name}: traces differ"))?;
        ensure(a.metrics.to_json() == b.metrics.to_json(), || format!("{name}: metrics differ"))?;
        names.push(name);
    }
    Ok(format!("{} bundled scenarios repeat byte for byte", names.len()))
}

fn c10_eprom() -> Outcome {
    ensure(SUPPORT_REQUEST_LEN == 5 && SUPPORT_ASSIST_LEN == 4, || "routine lengths changed".into())?;
    ensure(SUPPORT_REQUEST_LEN + SUPPORT_ASSIST_LEN < 10, || "routines use 10 bytes or more".into())?;
    let e = EpromLayout::default();
    ensure(e.support_request().len() == 5 && e.support_assist().len() == 4, || "layout sizes differ".into())?;
    ensure(e.request_routine() == RequestOp::ROUTINE.to_vec(), || "request routine does not decode".into())?;
    ensure(e.assist_routine() == AssistOp::ROUTINE.to_vec(), || "assist routine does not decode".into())?;
    Ok(format!(
        "request {} B + assist {} B = {} B",
        SUPPORT_REQUEST_LEN,
        SUPPORT_ASSIST_LEN,
        SUPPORT_REQUEST_LEN + SUPPORT_ASSIST_LEN
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, c1_latency),
        (2, c2_energy),
        (3, c3_polarity),
        (4, c4_sensor_first),
        (5, c5_active_recovery),
        (6, c6_passive_boot),
        (7, c7_state_machine),
        (8, c8_numerics),
        (9, c9_determinism),
        (10, c10_eprom),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        match check() {
            Ok(detail) => println!("criterion {n}: PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
