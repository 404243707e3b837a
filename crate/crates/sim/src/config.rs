//! Scenario files (TOML) and their validation.
//!
//! Errors carry the 1-based line of the offending entry when one can be
//! pinned down.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use swarmlink_core::coordinator::MembershipConfig;
use swarmlink_core::messages::{OperatorCommand, UavAction};
use swarmlink_core::middleware::sim::NetworkModel;
use swarmlink_core::model::{FormationSpec, NodeId, UavClass, UavId, Vec3};
use swarmlink_core::vehicle::{Setpoint, VehicleParams};
use toml::Spanned;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        ConfigError { line, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinatorSite {
    /// The ground station runs the coordinator.
    #[default]
    Gcs,
    /// No ground coordinator; the lowest-id UAV takes the role.
    Onboard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub seed: u64,
    pub dt_ms: u64,
    pub duration_s: f64,
    pub coordinator: CoordinatorSite,
    pub onboard_fallback: bool,
}

impl SimSettings {
    pub fn dt_us(&self) -> u64 {
        self.dt_ms * 1000
    }

    pub fn ticks(&self) -> u64 {
        (self.duration_s * 1e6 / self.dt_us() as f64).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UavSpec {
    pub id: UavId,
    pub class: UavClass,
    pub start_pos: Vec3,
    pub params: VehicleParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Node 0 is the ground station.
    KillUav(NodeId),
    SilenceHeartbeats(UavId),
    PartitionLink(NodeId, NodeId),
    RestoreLink(NodeId, NodeId),
}

impl Fault {
    pub fn name(&self) -> &'static str {
        match self {
            Fault::KillUav(_) => "kill_uav",
            Fault::SilenceHeartbeats(_) => "silence_heartbeats",
            Fault::PartitionLink(..) => "partition_link",
            Fault::RestoreLink(..) => "restore_link",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventAction {
    Operator(OperatorCommand),
    Fault(Fault),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent {
    pub t_us: u64,
    pub line: usize,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub sim: SimSettings,
    pub network: NetworkModel,
    pub membership: MembershipConfig,
    pub uavs: Vec<UavSpec>,
    pub events: Vec<ScheduledEvent>,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at(None, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            ConfigError::at(line, e.message().trim().to_string())
        })?;
        resolve(raw, text)
    }

    /// Replaces the run seed; the network seed follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.network.seed = seed;
        self
    }

    pub fn uav(&self, id: UavId) -> Option<&UavSpec> {
        self.uavs.iter().find(|u| u.id == id)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    sim: RawSim,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    membership: MembershipConfig,
    uavs: Vec<Spanned<RawUav>>,
    #[serde(default)]
    events: Vec<Spanned<RawEvent>>,
}

fn default_dt() -> u64 {
    100
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt_ms: u64,
    duration_s: f64,
    #[serde(default)]
    coordinator: CoordinatorSite,
    #[serde(default)]
    onboard_fallback: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    seed: Option<u64>,
    #[serde(default)]
    latency_mean_ms: f64,
    #[serde(default)]
    latency_jitter_ms: f64,
    #[serde(default)]
    drop_probability: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUav {
    id: u16,
    #[serde(default = "generic")]
    class: UavClass,
    start_pos: [f64; 3],
    #[serde(default)]
    params: VehicleParams,
}

fn generic() -> UavClass {
    UavClass::Generic
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    t_s: f64,
    action: String,
    #[serde(default)]
    args: Option<toml::Table>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IdArgs {
    id: u16,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkArgs {
    a: u16,
    b: u16,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointArgs {
    position: [f64; 3],
    #[serde(default)]
    yaw: f64,
    speed_mps: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GimbalArgs {
    id: u16,
    target: [f64; 3],
}

fn args<T: for<'de> Deserialize<'de>>(action: &str, table: Option<toml::Table>) -> Result<T, String> {
    let table = table.unwrap_or_default();
    T::deserialize(toml::Value::Table(table)).map_err(|e| format!("bad args for {action}: {}", e.message().trim()))
}

fn uav_id(raw: u16) -> Result<UavId, String> {
    UavId::new(raw).map_err(|_| "uav id 0 is reserved for the ground station".to_string())
}

fn parse_action(action: &str, table: Option<toml::Table>) -> Result<EventAction, String> {
    use OperatorCommand as Op;
    let op = |c| Ok(EventAction::Operator(c));
    let fault = |f| Ok(EventAction::Fault(f));
    let no_args = |table: Option<toml::Table>| match table {
        Some(t) if !t.is_empty() => Err(format!("{action} takes no args")),
        _ => Ok(()),
    };
    match action {
        "arm_all" => no_args(table).and_then(|_| op(Op::ArmAll)),
        "takeoff_all" => no_args(table).and_then(|_| op(Op::TakeoffAll)),
        "offboard_all" | "engage_offboard_all" => no_args(table).and_then(|_| op(Op::EngageOffboardAll)),
        "rtl_all" => no_args(table).and_then(|_| op(Op::RtlAll)),
        "land_all" => no_args(table).and_then(|_| op(Op::LandAll)),
        "set_formation" => {
            let formation: FormationSpec = args(action, table)?;
            op(Op::SetFormation { formation })
        }
        "set_leader" => {
            let a: IdArgs = args(action, table)?;
            op(Op::SetLeader { id: uav_id(a.id)? })
        }
        "leader_waypoint" => {
            let a: WaypointArgs = args(action, table)?;
            let setpoint = Setpoint::new(a.position.into(), a.yaw).map_err(|e| e.to_string())?;
            op(Op::LeaderWaypoint { setpoint, speed_mps: a.speed_mps })
        }
        "uav_command" => {
            // the remaining keys are the tagged action itself
            let mut rest = table.unwrap_or_default();
            let id: IdArgs = args(action, rest.remove("id").map(|v| toml::Table::from_iter([("id".to_string(), v)])))?;
            let command: UavAction = args(action, Some(rest))?;
            op(Op::UavCommand { id: uav_id(id.id)?, command })
        }
        "gimbal_point" => {
            let a: GimbalArgs = args(action, table)?;
            op(Op::GimbalPoint { id: uav_id(a.id)?, target: a.target.into() })
        }
        "kill_uav" => {
            let a: IdArgs = args(action, table)?;
            fault(Fault::KillUav(NodeId(a.id)))
        }
        "silence_heartbeats" => {
            let a: IdArgs = args(action, table)?;
            fault(Fault::SilenceHeartbeats(uav_id(a.id)?))
        }
        "partition_link" => {
            let a: LinkArgs = args(action, table)?;
            fault(Fault::PartitionLink(NodeId(a.a), NodeId(a.b)))
        }
        "restore_link" => {
            let a: LinkArgs = args(action, table)?;
            fault(Fault::RestoreLink(NodeId(a.a), NodeId(a.b)))
        }
        other => Err(format!("unknown action {other:?}")),
    }
}

fn resolve(raw: RawScenario, text: &str) -> Result<ScenarioConfig, ConfigError> {
    let s = raw.sim;
    if s.dt_ms == 0 {
        return Err(ConfigError::at(None, "sim.dt_ms must be > 0"));
    }
    if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
        return Err(ConfigError::at(None, format!("sim.duration_s must be > 0, got {}", s.duration_s)));
    }
    if s.duration_s * 1000.0 / s.dt_ms as f64 > 10_000_000.0 {
        return Err(ConfigError::at(None, "scenario has more than 10 million ticks"));
    }
    let sim = SimSettings {
        seed: s.seed,
        dt_ms: s.dt_ms,
        duration_s: s.duration_s,
        coordinator: s.coordinator,
        onboard_fallback: s.onboard_fallback || s.coordinator == CoordinatorSite::Onboard,
    };
    let network = NetworkModel {
        seed: raw.network.seed.unwrap_or(s.seed),
        latency_mean_ms: raw.network.latency_mean_ms,
        latency_jitter_ms: raw.network.latency_jitter_ms,
        drop_probability: raw.network.drop_probability,
    };
    network.validate().map_err(|e| ConfigError::at(None, format!("network: {e}")))?;
    raw.membership.validate().map_err(|e| ConfigError::at(None, format!("membership: {e}")))?;

    if raw.uavs.is_empty() {
        return Err(ConfigError::at(None, "scenario needs at least one uav"));
    }
    let mut uavs = Vec::new();
    let mut seen = BTreeMap::new();
    for u in raw.uavs {
        let line = line_of(text, u.span().start);
        let u = u.into_inner();
        let id = uav_id(u.id).map_err(|m| ConfigError::at(Some(line), m))?;
        if let Some(prev) = seen.insert(id, line) {
            return Err(ConfigError::at(Some(line), format!("duplicate uav id {id} (first defined on line {prev})")));
        }
        let start_pos: Vec3 = u.start_pos.into();
        if !start_pos.is_finite() {
            return Err(ConfigError::at(Some(line), "start_pos must be finite"));
        }
        u.params.validate().map_err(|e| ConfigError::at(Some(line), format!("uav {id} params: {e}")))?;
        uavs.push(UavSpec { id, class: u.class, start_pos, params: u.params });
    }
    uavs.sort_by_key(|u| u.id);
    let is_node = |n: NodeId| n.is_ground_station() || UavId::try_from(n).is_ok_and(|id| seen.contains_key(&id));

    let mut events = Vec::new();
    let mut last_t = 0.0;
    let mut partitioned = BTreeSet::new();
    for ev in raw.events {
        let line = line_of(text, ev.span().start);
        let ev = ev.into_inner();
        let err = |m: String| ConfigError::at(Some(line), m);
        if !(ev.t_s.is_finite() && ev.t_s >= 0.0) {
            return Err(err(format!("t_s must be >= 0, got {}", ev.t_s)));
        }
        if ev.t_s < last_t {
            return Err(err(format!("events must be sorted by t_s ({} after {last_t})", ev.t_s)));
        }
        last_t = ev.t_s;
        let action = parse_action(&ev.action, ev.args).map_err(err)?;
        match action {
            EventAction::Operator(cmd) => {
                if let Some(id) = cmd.target_uav() {
                    if !seen.contains_key(&id) {
                        return Err(err(format!("{} references unknown uav {id}", ev.action)));
                    }
                }
            }
            EventAction::Fault(f) => match f {
                Fault::KillUav(n) if !is_node(n) => return Err(err(format!("kill_uav references unknown node {n}"))),
                Fault::SilenceHeartbeats(id) if !seen.contains_key(&id) => {
                    return Err(err(format!("silence_heartbeats references unknown uav {id}")))
                }
                Fault::PartitionLink(a, b) | Fault::RestoreLink(a, b) => {
                    if a == b || !is_node(a) || !is_node(b) {
                        return Err(err(format!("{} needs two distinct known nodes, got {a} and {b}", f.name())));
                    }
                    let key = (a.min(b), a.max(b));
                    if matches!(f, Fault::PartitionLink(..)) {
                        partitioned.insert(key);
                    } else if !partitioned.remove(&key) {
                        return Err(err(format!("restore_link {a}-{b} without a prior partition_link")));
                    }
                }
                _ => {}
            },
        }
        events.push(ScheduledEvent { t_us: (ev.t_s * 1e6).round() as u64, line, action });
    }

    Ok(ScenarioConfig { sim, network, membership: raw.membership, uavs, events })
}
