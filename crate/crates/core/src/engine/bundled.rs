//! Scenarios shipped with the crate, addressable by name.

use super::scenario::{load_scenario, Scenario, ScenarioError};

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        [$(($name, include_str!(concat!("../../scenarios/", $name, ".json")))),*]
    };
}

pub const BUNDLED: [(&str, &str); 6] = bundle!(
    "table3_ethernet",
    "table3_wifi",
    "passive_attack_boot",
    "active_attack_64k",
    "ramp_ac_90",
    "ramp_ac_60",
);

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

pub fn bundled(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    bundled_source(name).map(|src| load_scenario(src.as_bytes()))
}

pub fn names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}
