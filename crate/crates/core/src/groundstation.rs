//! Ground station model and controller, without any IO.
//!
//! Holds the latest snapshot seen on `swarm/state` and an append-only audit
//! log. Operator commands are validated for existence only and then
//! published on `gcs/cmd`; flight rules stay with the vehicles.

use serde::{Deserialize, Serialize};

use crate::messages::{self, qos, GcsCommandMsg, OperatorCommand, UavRejection};
use crate::middleware::{MiddlewareError, Publisher, TopicName};
use crate::model::{NodeId, SwarmSnapshot, UavClass, UavId};
use crate::vehicle::TrackingSetpoint;

/// Minimum spacing between feed updates to one client (10 Hz).
pub const FEED_MIN_INTERVAL_US: u64 = 100_000;
/// Without a snapshot for this long the swarm view is stale.
pub const STALE_AFTER_US: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOrigin {
    /// Verdict of the ground station itself.
    Gs,
    /// The coordinator refused to apply an accepted command.
    Coordinator,
    /// A UAV refused a command.
    Uav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub t_us: u64,
    pub origin: AuditOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<u64>,
    /// Highest command id issued when the entry was appended.
    pub after: u64,
    pub command: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uav: Option<UavId>,
    /// Envelope sequence on `gcs/cmd` for accepted operator commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    /// The operator command itself, so the log can be replayed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<OperatorCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CommandOutcome {
    Accepted { command_id: u64, seq: u64 },
    Rejected { command_id: u64, reason: String },
}

impl CommandOutcome {
    pub fn command_id(&self) -> u64 {
        match self {
            CommandOutcome::Accepted { command_id, .. } | CommandOutcome::Rejected { command_id, .. } => *command_id,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, CommandOutcome::Accepted { .. })
    }
}

/// One item of the snapshot stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    #[serde(flatten)]
    pub snapshot: SwarmSnapshot,
    pub stale: bool,
}

#[derive(Debug, Default)]
pub struct GroundStation {
    latest: Option<SwarmSnapshot>,
    latest_rx_us: Option<u64>,
    latest_writer: Option<NodeId>,
    audit: Vec<AuditEntry>,
    last_command_id: u64,
}

impl GroundStation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Caches a snapshot; invalid ones are dropped and reported.
    pub fn on_snapshot(&mut self, writer: NodeId, snapshot: SwarmSnapshot, now_us: u64) -> Result<(), crate::model::ModelError> {
        snapshot.validate()?;
        self.latest = Some(snapshot);
        self.latest_rx_us = Some(now_us);
        self.latest_writer = Some(writer);
        Ok(())
    }

    pub fn latest(&self) -> Option<&SwarmSnapshot> {
        self.latest.as_ref()
    }

    pub fn latest_writer(&self) -> Option<NodeId> {
        self.latest_writer
    }

    pub fn is_stale(&self, now_us: u64) -> bool {
        self.latest_rx_us.is_none_or(|t| now_us.saturating_sub(t) >= STALE_AFTER_US)
    }

    /// What `GET /api/swarm` returns.
    pub fn view(&self, now_us: u64) -> FeedItem {
        FeedItem { snapshot: self.latest.clone().unwrap_or_else(|| SwarmSnapshot::empty(now_us)), stale: self.is_stale(now_us) }
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Entries about commands after `since`, plus uncorrelated entries
    /// appended once `since` had been issued.
    pub fn audit_since(&self, since: u64) -> Vec<AuditEntry> {
        self.audit
            .iter()
            .filter(|e| match e.command_id {
                Some(c) => c > since,
                None => e.after >= since,
            })
            .cloned()
            .collect()
    }

    pub fn last_command_id(&self) -> u64 {
        self.last_command_id
    }

    fn append(&mut self, mut e: AuditEntry) {
        e.after = self.last_command_id;
        self.audit.push(e);
    }

    pub fn on_uav_rejection(&mut self, r: &UavRejection) {
        self.append(AuditEntry {
            t_us: r.t_us,
            origin: AuditOrigin::Uav,
            command_id: r.command_id,
            after: 0,
            command: r.command.clone(),
            accepted: false,
            reason: Some(format!("{} (state {})", r.reason, r.state)),
            uav: Some(r.id),
            seq: None,
            body: None,
        });
    }

    pub fn on_coordinator_rejection(&mut self, command_id: u64, command: &str, reason: &str, now_us: u64) {
        self.append(AuditEntry {
            t_us: now_us,
            origin: AuditOrigin::Coordinator,
            command_id: Some(command_id),
            after: 0,
            command: command.to_string(),
            accepted: false,
            reason: Some(reason.to_string()),
            uav: None,
            seq: None,
            body: None,
        });
    }

    fn validate(&self, cmd: &OperatorCommand) -> Result<(), &'static str> {
        if let Some(id) = cmd.target_uav() {
            let member = self.latest.as_ref().and_then(|s| s.member(id)).ok_or("unknown uav")?;
            if matches!(cmd, OperatorCommand::GimbalPoint { .. }) && member.class != UavClass::Observation {
                return Err("no gimbal");
            }
        }
        match cmd {
            OperatorCommand::SetFormation { formation } => formation.validate().map_err(|_| "invalid formation"),
            OperatorCommand::LeaderWaypoint { setpoint, speed_mps } => {
                let probe = TrackingSetpoint { speed_cap_mps: *speed_mps, ..TrackingSetpoint::fixed(*setpoint) };
                probe.validate().map_err(|_| "invalid setpoint")
            }
            OperatorCommand::UavCommand { command: crate::messages::UavAction::SetSetpoint { setpoint }, .. } => {
                setpoint.validate().map_err(|_| "invalid setpoint")
            }
            OperatorCommand::GimbalPoint { target, .. } if !target.is_finite() => Err("invalid target"),
            _ => Ok(()),
        }
    }

    pub fn handle_command(&mut self, cmd: OperatorCommand, publisher: &mut dyn Publisher, now_us: u64) -> CommandOutcome {
        self.last_command_id += 1;
        let command_id = self.last_command_id;
        let verdict = self.validate(&cmd).map_err(str::to_string).and_then(|()| {
            let payload = messages::encode(&GcsCommandMsg { command_id, command: cmd });
            publisher.publish_next(&TopicName::gcs_cmd(), qos::GCS_CMD, payload, now_us).map_err(|e| match e {
                MiddlewareError::BackPressure { .. } => "busy".to_string(),
                other => format!("middleware error: {other}"),
            })
        });
        let (outcome, seq, reason) = match verdict {
            Ok(seq) => (CommandOutcome::Accepted { command_id, seq }, Some(seq), None),
            Err(reason) => (CommandOutcome::Rejected { command_id, reason: reason.clone() }, None, Some(reason)),
        };
        self.append(AuditEntry {
            t_us: now_us,
            origin: AuditOrigin::Gs,
            command_id: Some(command_id),
            after: 0,
            command: cmd.name().to_string(),
            accepted: outcome.is_accepted(),
            reason,
            uav: cmd.target_uav(),
            seq,
            body: Some(cmd),
        });
        outcome
    }
}

/// Per-client pacing of the snapshot stream: at most one item per
/// [`FEED_MIN_INTERVAL_US`], always the latest, and a stale heartbeat item
/// every [`STALE_AFTER_US`] while no snapshots arrive.
#[derive(Debug, Clone, Default)]
pub struct FeedPacer {
    pending: Option<SwarmSnapshot>,
    last_offer_us: Option<u64>,
    last_emit_us: Option<u64>,
    started_us: Option<u64>,
}

impl FeedPacer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn offer(&mut self, snapshot: SwarmSnapshot, now_us: u64) {
        self.pending = Some(snapshot);
        self.last_offer_us = Some(now_us);
        self.started_us.get_or_insert(now_us);
    }

    pub fn poll(&mut self, now_us: u64) -> Option<FeedItem> {
        let started = *self.started_us.get_or_insert(now_us);
        if self.last_emit_us.is_some_and(|t| now_us < t + FEED_MIN_INTERVAL_US) {
            return None;
        }
        if let Some(snapshot) = self.pending.take() {
            self.last_emit_us = Some(now_us);
            return Some(FeedItem { snapshot, stale: false });
        }
        let quiet_since = self.last_offer_us.unwrap_or(started).max(self.last_emit_us.unwrap_or(0));
        if now_us.saturating_sub(quiet_since) >= STALE_AFTER_US {
            self.last_emit_us = Some(now_us);
            return Some(FeedItem { snapshot: SwarmSnapshot::empty(now_us), stale: true });
        }
        None
    }
}
