//! Scenario configs shipped with the simulator.

use crate::config::{ConfigError, ScenarioConfig};

pub const CONFIGS: &[(&str, &str)] = &[
    ("honest-baseline", include_str!("../configs/honest-baseline.json")),
    ("attack-battery", include_str!("../configs/attack-battery.json")),
    ("desync-recovery", include_str!("../configs/desync-recovery.json")),
    ("cross-domain", include_str!("../configs/cross-domain.json")),
    ("puf-stats", include_str!("../configs/puf-stats.json")),
    ("rffi-stats", include_str!("../configs/rffi-stats.json")),
];

pub fn text(name: &str) -> Option<&'static str> {
    CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn load(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    text(name).map(ScenarioConfig::from_json)
}
