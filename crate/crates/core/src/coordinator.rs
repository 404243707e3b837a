//! Membership, leader election, slot assignment and setpoint fan-out.
//!
//! The coordinator is sans-IO: the owner feeds it decoded heartbeats,
//! telemetry and operator commands, calls [`Coordinator::tick`] at 5 Hz and
//! publishes whatever comes back. It runs the same way on the ground station
//! and on a UAV that took over.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formation::{assign_slots, compute_formation_offsets, follower_setpoint};
use crate::messages::{self, qos, GcsCommandMsg, GimbalCommand, Heartbeat, NodeCommand, OperatorCommand, Telemetry, UavCommandMsg};
use crate::middleware::{QosProfile, TopicName};
use crate::mission::MissionState;
use crate::model::{FormationSpec, MemberView, ModelError, NodeId, Pose, SwarmRole, SwarmSnapshot, UavClass, UavId, Vec3, Velocity};
use crate::vehicle::{Setpoint, TrackingSetpoint};

/// Coordinator tick period (5 Hz).
pub const TICK_PERIOD_US: u64 = 200_000;
/// Silence on `swarm/state`, in heartbeat periods, before a UAV takes over.
pub const TAKEOVER_SILENCE_PERIODS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordinatorError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("invalid membership config: {0}")]
    InvalidConfig(String),
    #[error("coordinator produced an invalid snapshot: {0}")]
    InvalidSnapshot(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderPolicy {
    LowestId,
    Pinned(UavId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembershipConfig {
    pub heartbeat_period_ms: u64,
    pub stale_after_missed: u32,
    pub leader_policy: LeaderPolicy,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig { heartbeat_period_ms: 500, stale_after_missed: 3, leader_policy: LeaderPolicy::LowestId }
    }
}

impl MembershipConfig {
    pub fn validate(&self) -> Result<(), CoordinatorError> {
        if self.heartbeat_period_ms == 0 {
            return Err(CoordinatorError::InvalidConfig("heartbeat_period_ms must be > 0".into()));
        }
        if self.stale_after_missed == 0 {
            return Err(CoordinatorError::InvalidConfig("stale_after_missed must be >= 1".into()));
        }
        Ok(())
    }

    pub fn heartbeat_period_us(&self) -> u64 {
        self.heartbeat_period_ms * 1000
    }

    pub fn stale_after_us(&self) -> u64 {
        self.heartbeat_period_ms * self.stale_after_missed as u64 * 1000
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub id: UavId,
    pub class: UavClass,
    pub mission_state: MissionState,
    pub pose: Pose,
    pub velocity: Velocity,
    /// Time the pose was sampled at the UAV.
    pub pose_time_us: u64,
    pub last_seen_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipDelta {
    Joined(UavId),
    Updated(UavId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expiry {
    pub expired: Vec<UavId>,
    pub leader_lost: Option<UavId>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    members: BTreeMap<UavId, Member>,
    leader: Option<UavId>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn members(&self) -> &BTreeMap<UavId, Member> {
        &self.members
    }

    pub fn get(&self, id: UavId) -> Option<&Member> {
        self.members.get(&id)
    }

    pub fn contains(&self, id: UavId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn leader(&self) -> Option<UavId> {
        self.leader
    }

    pub fn set_leader(&mut self, leader: Option<UavId>) {
        self.leader = leader;
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Heartbeat stamped at the time it was received.
    pub fn ingest_heartbeat(&mut self, publisher: NodeId, hb: &Heartbeat, now_us: u64) -> Result<MembershipDelta, CoordinatorError> {
        self.ingest_heartbeat_at(publisher, hb, now_us, now_us)
    }

    /// `stamp_us` is the sender's timestamp; pose and state only move forward in it.
    pub fn ingest_heartbeat_at(
        &mut self,
        publisher: NodeId,
        hb: &Heartbeat,
        stamp_us: u64,
        now_us: u64,
    ) -> Result<MembershipDelta, CoordinatorError> {
        if publisher.is_ground_station() {
            return Err(CoordinatorError::ProtocolViolation("heartbeat from the ground station id".into()));
        }
        if publisher != hb.id.node() {
            return Err(CoordinatorError::ProtocolViolation(format!("node {publisher} sent a heartbeat for uav {}", hb.id)));
        }
        if !hb.pose.is_valid() {
            return Err(CoordinatorError::ProtocolViolation(format!("uav {} sent an invalid pose", hb.id)));
        }
        match self.members.get_mut(&hb.id) {
            Some(m) => {
                m.last_seen_us = m.last_seen_us.max(now_us);
                m.class = hb.class;
                if stamp_us >= m.pose_time_us {
                    if stamp_us > m.pose_time_us {
                        m.pose = hb.pose;
                        m.pose_time_us = stamp_us;
                    }
                    m.mission_state = hb.mission_state;
                }
                Ok(MembershipDelta::Updated(hb.id))
            }
            None => {
                self.members.insert(
                    hb.id,
                    Member {
                        id: hb.id,
                        class: hb.class,
                        mission_state: hb.mission_state,
                        pose: hb.pose,
                        velocity: Velocity::default(),
                        pose_time_us: stamp_us,
                        last_seen_us: now_us,
                    },
                );
                Ok(MembershipDelta::Joined(hb.id))
            }
        }
    }

    /// Refreshes pose, velocity and state of a known member. Telemetry alone
    /// never keeps a member alive; only heartbeats do.
    pub fn ingest_telemetry(&mut self, publisher: NodeId, t: &Telemetry) -> Result<bool, CoordinatorError> {
        if publisher != t.id.node() {
            return Err(CoordinatorError::ProtocolViolation(format!("node {publisher} sent telemetry for uav {}", t.id)));
        }
        if !t.state.pose.is_valid() || !t.state.velocity.0.is_finite() {
            return Err(CoordinatorError::ProtocolViolation(format!("uav {} sent invalid telemetry", t.id)));
        }
        let Some(m) = self.members.get_mut(&t.id) else {
            return Ok(false);
        };
        if t.t_us >= m.pose_time_us {
            m.pose = t.state.pose;
            m.velocity = t.state.velocity;
            m.pose_time_us = t.t_us;
            m.mission_state = t.mission_state;
        }
        Ok(true)
    }

    pub fn expire_members(&mut self, now_us: u64, cfg: &MembershipConfig) -> Expiry {
        let limit = cfg.stale_after_us();
        let expired: Vec<UavId> = self.members.values().filter(|m| now_us.saturating_sub(m.last_seen_us) > limit).map(|m| m.id).collect();
        for id in &expired {
            self.members.remove(id);
        }
        let leader_lost = match self.leader {
            Some(l) if expired.contains(&l) => {
                self.leader = None;
                Some(l)
            }
            _ => None,
        };
        Expiry { expired, leader_lost }
    }

    pub fn remove(&mut self, id: UavId) -> Option<Member> {
        if self.leader == Some(id) {
            self.leader = None;
        }
        self.members.remove(&id)
    }
}

/// Pure election rule; only looks at registry contents.
pub fn elect_leader(registry: &Registry, cfg: &MembershipConfig) -> Option<UavId> {
    let eligible = |m: &&Member| m.mission_state.is_leader_eligible();
    if let LeaderPolicy::Pinned(id) = cfg.leader_policy {
        if registry.get(id).filter(|m| eligible(m)).is_some() {
            return Some(id);
        }
    }
    registry.members.values().filter(eligible).map(|m| m.id).next()
}

/// Whether `me` should start coordinating after `observed_silence_us` without
/// any snapshot on `swarm/state`. `registry` holds the members this UAV still
/// considers alive.
pub fn assume_coordinator(me: UavId, registry: &Registry, observed_silence_us: u64, cfg: &MembershipConfig) -> bool {
    if observed_silence_us <= TAKEOVER_SILENCE_PERIODS * cfg.heartbeat_period_us() {
        return false;
    }
    registry.members.keys().all(|&id| id >= me)
}

/// A message the coordinator wants published.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outgoing {
    pub to: UavId,
    pub command_id: Option<u64>,
    pub kind: OutgoingKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutgoingKind {
    Command(NodeCommand),
    Gimbal(Vec3),
}

impl Outgoing {
    pub fn topic(&self) -> TopicName {
        match self.kind {
            OutgoingKind::Command(_) => TopicName::uav_cmd(self.to),
            OutgoingKind::Gimbal(_) => TopicName::uav_gimbal_cmd(self.to),
        }
    }

    pub fn qos(&self) -> QosProfile {
        match self.kind {
            OutgoingKind::Command(_) => qos::UAV_CMD,
            OutgoingKind::Gimbal(_) => qos::GIMBAL_CMD,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match self.kind {
            OutgoingKind::Command(command) => messages::encode(&UavCommandMsg { command_id: self.command_id, command }),
            OutgoingKind::Gimbal(target) => messages::encode(&GimbalCommand { command_id: self.command_id, target }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            OutgoingKind::Command(c) => c.name(),
            OutgoingKind::Gimbal(_) => "gimbal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinatorAction {
    Expired(UavId),
    LeaderLost(UavId),
    Elected { leader: Option<UavId>, previous: Option<UavId> },
    Applied { command_id: u64, command: &'static str },
    Rejected { command_id: u64, command: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub actions: Vec<CoordinatorAction>,
    pub commands: Vec<Outgoing>,
    pub snapshot: SwarmSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LeaderWaypoint {
    setpoint: Setpoint,
    speed_mps: Option<f64>,
}

pub struct Coordinator {
    node: NodeId,
    cfg: MembershipConfig,
    registry: Registry,
    formation: Option<FormationSpec>,
    waypoint: Option<LeaderWaypoint>,
    pending: VecDeque<GcsCommandMsg>,
    force_election: bool,
    slots: BTreeMap<UavId, u32>,
}

impl Coordinator {
    pub fn new(node: NodeId, cfg: MembershipConfig) -> Result<Self, CoordinatorError> {
        cfg.validate()?;
        Ok(Coordinator {
            node,
            cfg,
            registry: Registry::new(),
            formation: None,
            waypoint: None,
            pending: VecDeque::new(),
            force_election: false,
            slots: BTreeMap::new(),
        })
    }

    /// A coordinator picking up where a silent one left off: members come
    /// from the caller's own heartbeat registry, formation and leader from
    /// the last snapshot it saw.
    pub fn take_over(
        node: NodeId,
        cfg: MembershipConfig,
        registry: Registry,
        last: Option<&SwarmSnapshot>,
    ) -> Result<Self, CoordinatorError> {
        let mut c = Coordinator::new(node, cfg)?;
        c.registry = registry;
        if let Some(s) = last {
            c.formation = s.formation;
            let leader = s.leader.filter(|l| c.registry.contains(*l));
            c.registry.set_leader(leader);
        }
        Ok(c)
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn config(&self) -> &MembershipConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn formation(&self) -> Option<FormationSpec> {
        self.formation
    }

    pub fn leader(&self) -> Option<UavId> {
        self.registry.leader()
    }

    pub fn slots(&self) -> &BTreeMap<UavId, u32> {
        &self.slots
    }

    pub fn on_heartbeat(
        &mut self,
        publisher: NodeId,
        hb: &Heartbeat,
        stamp_us: u64,
        now_us: u64,
    ) -> Result<MembershipDelta, CoordinatorError> {
        self.registry.ingest_heartbeat_at(publisher, hb, stamp_us, now_us)
    }

    pub fn on_telemetry(&mut self, publisher: NodeId, t: &Telemetry) -> Result<bool, CoordinatorError> {
        self.registry.ingest_telemetry(publisher, t)
    }

    /// Queued until the next tick.
    pub fn on_operator(&mut self, msg: GcsCommandMsg) {
        self.pending.push_back(msg);
    }

    pub fn tick(&mut self, now_us: u64) -> Result<TickOutput, CoordinatorError> {
        let mut actions = Vec::new();
        let mut commands = Vec::new();

        while let Some(msg) = self.pending.pop_front() {
            self.apply_operator(msg, &mut actions, &mut commands);
        }

        let expiry = self.registry.expire_members(now_us, &self.cfg);
        actions.extend(expiry.expired.iter().map(|&id| CoordinatorAction::Expired(id)));
        if let Some(l) = expiry.leader_lost {
            actions.push(CoordinatorAction::LeaderLost(l));
        }

        let current = self.registry.leader();
        let still_fit = current.and_then(|l| self.registry.get(l)).is_some_and(|m| m.mission_state.is_leader_eligible());
        if self.force_election || !still_fit {
            self.force_election = false;
            let next = elect_leader(&self.registry, &self.cfg);
            if next != current || expiry.leader_lost.is_some() {
                actions.push(CoordinatorAction::Elected { leader: next, previous: current.or(expiry.leader_lost) });
            }
            self.registry.set_leader(next);
        }

        self.slots = match self.registry.leader() {
            Some(l) => {
                let flying: Vec<UavId> =
                    self.registry.members().values().filter(|m| m.id == l || m.mission_state.is_leader_eligible()).map(|m| m.id).collect();
                assign_slots(&flying, l).expect("leader is always in the flying set")
            }
            None => BTreeMap::new(),
        };

        // Offboard members are always election candidates, so a leaderless
        // swarm has nobody tracking setpoints and nothing to send.
        if let Some(l) = self.registry.leader() {
            self.emit_setpoints(l, &mut commands);
        }

        let snapshot = self.snapshot(now_us);
        snapshot.validate()?;
        Ok(TickOutput { actions, commands, snapshot })
    }

    fn emit_setpoints(&self, leader_id: UavId, commands: &mut Vec<Outgoing>) {
        let leader = &self.registry.members()[&leader_id];
        if let (Some(wp), MissionState::Offboard) = (self.waypoint, leader.mission_state) {
            let target =
                TrackingSetpoint { setpoint: wp.setpoint, velocity: Velocity::default(), ref_time_us: 0, speed_cap_mps: wp.speed_mps };
            commands.push(Outgoing { to: leader_id, command_id: None, kind: OutgoingKind::Command(NodeCommand::Setpoint { target }) });
        }
        let Some(spec) = self.formation else { return };
        let offsets = compute_formation_offsets(&spec, self.slots.len());
        for (&id, &slot) in &self.slots {
            if self.registry.members()[&id].mission_state != MissionState::Offboard {
                continue;
            }
            let target = TrackingSetpoint {
                setpoint: follower_setpoint(&leader.pose, &offsets[slot as usize - 1]),
                velocity: leader.velocity,
                ref_time_us: leader.pose_time_us,
                speed_cap_mps: None,
            };
            commands.push(Outgoing { to: id, command_id: None, kind: OutgoingKind::Command(NodeCommand::Setpoint { target }) });
        }
    }

    fn apply_operator(&mut self, msg: GcsCommandMsg, actions: &mut Vec<CoordinatorAction>, commands: &mut Vec<Outgoing>) {
        let GcsCommandMsg { command_id, command } = msg;
        let name = command.name();
        let reject = |reason: &str| CoordinatorAction::Rejected { command_id, command: name, reason: reason.to_string() };
        if let Some(id) = command.target_uav() {
            if !self.registry.contains(id) {
                actions.push(reject("unknown uav"));
                return;
            }
        }
        let fan_out = |c: NodeCommand, commands: &mut Vec<Outgoing>| {
            for &to in self.registry.members().keys() {
                commands.push(Outgoing { to, command_id: Some(command_id), kind: OutgoingKind::Command(c) });
            }
        };
        match command {
            OperatorCommand::ArmAll => fan_out(NodeCommand::Arm, commands),
            OperatorCommand::TakeoffAll => fan_out(NodeCommand::Takeoff, commands),
            OperatorCommand::EngageOffboardAll => fan_out(NodeCommand::Offboard, commands),
            OperatorCommand::RtlAll => fan_out(NodeCommand::Rtl, commands),
            OperatorCommand::LandAll => fan_out(NodeCommand::Land, commands),
            OperatorCommand::SetFormation { formation } => {
                if formation.validate().is_err() {
                    actions.push(reject("invalid formation"));
                    return;
                }
                self.formation = Some(formation);
            }
            OperatorCommand::SetLeader { id } => {
                self.cfg.leader_policy = LeaderPolicy::Pinned(id);
                self.force_election = true;
            }
            OperatorCommand::LeaderWaypoint { setpoint, speed_mps } => {
                let probe = TrackingSetpoint { speed_cap_mps: speed_mps, ..TrackingSetpoint::fixed(setpoint) };
                if probe.validate().is_err() {
                    actions.push(reject("invalid setpoint"));
                    return;
                }
                self.waypoint = Some(LeaderWaypoint { setpoint, speed_mps });
            }
            OperatorCommand::UavCommand { id, command } => {
                commands.push(Outgoing { to: id, command_id: Some(command_id), kind: OutgoingKind::Command(command.into()) });
            }
            OperatorCommand::GimbalPoint { id, target } => {
                commands.push(Outgoing { to: id, command_id: Some(command_id), kind: OutgoingKind::Gimbal(target) });
            }
        }
        actions.push(CoordinatorAction::Applied { command_id, command: name });
    }

    pub fn snapshot(&self, now_us: u64) -> SwarmSnapshot {
        let leader = self.registry.leader();
        let members = self
            .registry
            .members()
            .values()
            .map(|m| MemberView {
                id: m.id,
                class: m.class,
                role: if Some(m.id) == leader {
                    SwarmRole::Leader
                } else {
                    match self.slots.get(&m.id) {
                        Some(&slot) => SwarmRole::Follower { slot },
                        None => SwarmRole::Unassigned,
                    }
                },
                mission_state: m.mission_state,
                pose: m.pose,
                last_seen_us: m.last_seen_us,
            })
            .collect();
        SwarmSnapshot { timestamp_us: now_us, members, formation: self.formation, leader }
    }
}
