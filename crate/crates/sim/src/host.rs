//! Runs a [`Coordinator`] on a bus participant: feeds it operator commands
//! and telemetry, ticks it at its own cadence and publishes what it emits.
//! Heartbeats are handed in by the owning node, which may need them too.

use std::collections::BTreeMap;

use log::warn;
use serde_json::json;
use swarmlink_core::coordinator::{Coordinator, CoordinatorAction, CoordinatorError, MembershipDelta, OutgoingKind, TICK_PERIOD_US};
use swarmlink_core::messages::{self, qos, GcsCommandMsg, Heartbeat, NodeCommand, Telemetry};
use swarmlink_core::middleware::{MiddlewareError, Subscription, TopicName};
use swarmlink_core::model::{NodeId, SwarmSnapshot, UavId};

use crate::endpoint::Endpoint;
use crate::trace::{TraceKind, TraceRecord};

/// A command the coordinator refused.
#[derive(Debug, Clone, PartialEq)]
pub struct HostRejection {
    pub command_id: u64,
    pub command: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct HostOutput {
    pub rejections: Vec<HostRejection>,
    pub snapshot: Option<SwarmSnapshot>,
}

pub struct CoordinatorHost {
    coord: Coordinator,
    gcs_sub: Subscription,
    telemetry: BTreeMap<UavId, Subscription>,
    next_tick_us: u64,
}

impl CoordinatorHost {
    /// First tick happens at `now_us`.
    pub fn start(coord: Coordinator, ep: &mut dyn Endpoint, now_us: u64) -> Self {
        let gcs_sub = ep.subscribe(TopicName::gcs_cmd(), qos::GCS_CMD);
        let telemetry =
            coord.registry().members().keys().map(|&id| (id, ep.subscribe(TopicName::uav_telemetry(id), qos::TELEMETRY))).collect();
        CoordinatorHost { coord, gcs_sub, telemetry, next_tick_us: now_us }
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn node(&self) -> NodeId {
        self.coord.node()
    }

    pub fn on_heartbeat(
        &mut self,
        publisher: NodeId,
        hb: &Heartbeat,
        stamp_us: u64,
        now_us: u64,
        ep: &mut dyn Endpoint,
        trace: &mut Vec<TraceRecord>,
    ) {
        match self.coord.on_heartbeat(publisher, hb, stamp_us, now_us) {
            Ok(MembershipDelta::Joined(id)) => {
                self.telemetry.entry(id).or_insert_with(|| ep.subscribe(TopicName::uav_telemetry(id), qos::TELEMETRY));
                trace.push(TraceRecord::new(
                    now_us,
                    TraceKind::Membership,
                    json!({ "event": "joined", "node": self.node(), "uav": id, "class": hb.class }),
                ));
            }
            Ok(MembershipDelta::Updated(_)) => {}
            Err(e) => warn!("coordinator {}: dropped heartbeat from {publisher}: {e}", self.node()),
        }
    }

    fn drain_inputs(&mut self) {
        for env in self.gcs_sub.drain() {
            match messages::decode::<GcsCommandMsg>(&env.payload) {
                Ok(msg) => self.coord.on_operator(msg),
                Err(e) => warn!("coordinator {}: undecodable operator command: {e}", self.node()),
            }
        }
        for sub in self.telemetry.values() {
            for env in sub.drain() {
                match messages::decode::<Telemetry>(&env.payload) {
                    Ok(t) => {
                        if let Err(e) = self.coord.on_telemetry(env.publisher, &t) {
                            warn!("coordinator {}: {e}", self.coord.node());
                        }
                    }
                    Err(e) => warn!("coordinator {}: undecodable telemetry: {e}", self.coord.node()),
                }
            }
        }
    }

    /// Consumes pending inputs and, when a tick is due, runs it and publishes
    /// the resulting commands and snapshot.
    pub fn poll(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) -> Result<HostOutput, CoordinatorError> {
        self.drain_inputs();
        let mut out = HostOutput::default();
        if now_us < self.next_tick_us {
            return Ok(out);
        }
        while self.next_tick_us <= now_us {
            self.next_tick_us += TICK_PERIOD_US;
        }
        let node = self.node();
        let tick = self.coord.tick(now_us)?;
        let rec = |v| TraceRecord::new(now_us, TraceKind::Membership, v);
        for action in tick.actions {
            match action {
                CoordinatorAction::Expired(id) => {
                    if let Some(_sub) = self.telemetry.remove(&id) {
                        ep.unsubscribe(&TopicName::uav_telemetry(id));
                    }
                    trace.push(rec(json!({ "event": "expired", "node": node, "uav": id })));
                }
                CoordinatorAction::LeaderLost(id) => {
                    trace.push(rec(json!({ "event": "leader_lost", "node": node, "uav": id })));
                }
                CoordinatorAction::Elected { leader, previous } => {
                    trace.push(rec(json!({ "event": "elected", "node": node, "leader": leader, "previous": previous })));
                }
                CoordinatorAction::Applied { command_id, command } => trace.push(TraceRecord::new(
                    now_us,
                    TraceKind::Command,
                    json!({ "event": "applied", "node": node, "command_id": command_id, "command": command }),
                )),
                CoordinatorAction::Rejected { command_id, command, reason } => {
                    trace.push(TraceRecord::new(
                        now_us,
                        TraceKind::Command,
                        json!({ "event": "refused", "node": node, "command_id": command_id, "command": command, "reason": reason }),
                    ));
                    out.rejections.push(HostRejection { command_id, command, reason });
                }
            }
        }

        for o in &tick.commands {
            let mut v = json!({ "node": node, "to": o.to, "command": o.name() });
            if let Some(c) = o.command_id {
                v["command_id"] = json!(c);
            }
            match o.kind {
                OutgoingKind::Command(NodeCommand::Setpoint { target }) => v["target"] = json!(target),
                OutgoingKind::Gimbal(t) => v["target"] = json!(t),
                OutgoingKind::Command(_) => {}
            }
            match ep.publish(&o.topic(), o.qos(), o.payload(), now_us) {
                Ok(seq) => {
                    v["event"] = json!("issued");
                    v["seq"] = json!(seq);
                }
                Err(e) => {
                    v["event"] = json!("dropped");
                    v["reason"] = json!(match e {
                        MiddlewareError::BackPressure { .. } => "busy".to_string(),
                        other => other.to_string(),
                    });
                }
            }
            trace.push(TraceRecord::new(now_us, TraceKind::Command, v));
        }

        let snap = tick.snapshot;
        match ep.publish(&TopicName::swarm_state(), qos::SWARM_STATE, messages::encode(&snap), now_us) {
            Ok(seq) => trace.push(rec(json!({ "event": "snapshot", "writer": node, "seq": seq, "snapshot": snap }))),
            Err(e) => warn!("coordinator {node}: snapshot publish failed: {e}"),
        }
        out.snapshot = Some(snap);
        Ok(out)
    }

    /// Drops the host's own subscriptions.
    pub fn stop(self, ep: &mut dyn Endpoint) {
        ep.unsubscribe(&TopicName::gcs_cmd());
        for id in self.telemetry.keys() {
            ep.unsubscribe(&TopicName::uav_telemetry(*id));
        }
    }
}
