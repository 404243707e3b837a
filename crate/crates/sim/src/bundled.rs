//! Scenario files shipped with the crate.

use crate::config::{ConfigError, ScenarioConfig};

pub const SCENARIOS: [(&str, &str); 7] = [
    ("takeoff_single", include_str!("../../../scenarios/takeoff_single.toml")),
    ("wedge_transit", include_str!("../../../scenarios/wedge_transit.toml")),
    ("reconfigure", include_str!("../../../scenarios/reconfigure.toml")),
    ("leader_failover", include_str!("../../../scenarios/leader_failover.toml")),
    ("follower_loss", include_str!("../../../scenarios/follower_loss.toml")),
    ("coordinator_takeover", include_str!("../../../scenarios/coordinator_takeover.toml")),
    ("lossy_link", include_str!("../../../scenarios/lossy_link.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| *n)
}

/// Looks up a bundled scenario by name, with or without `.toml`.
pub fn get(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Parses a bundled scenario.
///
/// # Panics
/// If `name` is not bundled.
pub fn load(name: &str) -> Result<ScenarioConfig, ConfigError> {
    ScenarioConfig::parse(get(name).unwrap_or_else(|| panic!("no bundled scenario {name}")))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_bundled_scenarios_parse() {
        for (name, _) in super::SCENARIOS {
            super::load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(super::get("wedge_transit.toml").is_some());
        assert!(super::get("nope").is_none());
    }
}
