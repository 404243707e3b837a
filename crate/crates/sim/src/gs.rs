//! The ground station node: snapshot cache, audit log, operator command
//! entry point and, by default, the coordinator.

use log::warn;
use serde_json::json;
use swarmlink_core::coordinator::{Coordinator, MembershipConfig};
use swarmlink_core::groundstation::{AuditEntry, CommandOutcome, GroundStation};
use swarmlink_core::messages::{self, qos, Heartbeat, OperatorCommand, UavRejection};
use swarmlink_core::middleware::{Subscription, TopicName};
use swarmlink_core::model::{NodeId, SwarmSnapshot};

use crate::endpoint::{AsPublisher, Endpoint};
use crate::host::CoordinatorHost;
use crate::trace::{TraceKind, TraceRecord};
use crate::SimError;

pub struct GsNode {
    gs: GroundStation,
    state_sub: Subscription,
    events_sub: Subscription,
    hb_sub: Option<Subscription>,
    host: Option<CoordinatorHost>,
}

/// Stamped with the time the entry was appended, which can be later than
/// the entry's own `t_us`.
fn audit_record(now_us: u64, e: &AuditEntry) -> TraceRecord {
    let mut v = serde_json::to_value(e).expect("audit entries serialize");
    if let Some(m) = v.as_object_mut() {
        if let Some(t) = m.remove("t_us") {
            m.insert("entry_t_us".into(), t);
        }
    }
    TraceRecord::new(now_us, TraceKind::Audit, v)
}

impl GsNode {
    /// `coordinator` is `Some` when the ground station coordinates the swarm.
    pub fn new(coordinator: Option<MembershipConfig>, ep: &mut dyn Endpoint, now_us: u64) -> Result<Self, SimError> {
        let state_sub = ep.subscribe(TopicName::swarm_state(), qos::SWARM_STATE);
        let events_sub = ep.subscribe(TopicName::swarm_events(), qos::SWARM_EVENTS);
        let (hb_sub, host) = match coordinator {
            Some(cfg) => {
                let coord = Coordinator::new(NodeId::GROUND_STATION, cfg).map_err(|e| SimError::Invariant(e.to_string()))?;
                let hb = ep.subscribe(TopicName::heartbeat(), qos::HEARTBEAT);
                (Some(hb), Some(CoordinatorHost::start(coord, ep, now_us)))
            }
            None => (None, None),
        };
        Ok(GsNode { gs: GroundStation::new(), state_sub, events_sub, hb_sub, host })
    }

    pub fn ground_station(&self) -> &GroundStation {
        &self.gs
    }

    pub fn coordinator(&self) -> Option<&Coordinator> {
        self.host.as_ref().map(|h| h.coordinator())
    }

    pub fn latest(&self) -> Option<&SwarmSnapshot> {
        self.gs.latest()
    }

    /// Validates and forwards an operator command.
    pub fn submit(&mut self, cmd: OperatorCommand, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) -> CommandOutcome {
        let outcome = self.gs.handle_command(cmd, &mut AsPublisher(ep), now_us);
        if let Some(e) = self.gs.audit().last() {
            trace.push(audit_record(now_us, e));
        }
        outcome
    }

    pub fn step(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) -> Result<(), SimError> {
        if let (Some(sub), Some(host)) = (&self.hb_sub, &mut self.host) {
            for env in sub.drain() {
                match messages::decode::<Heartbeat>(&env.payload) {
                    Ok(hb) => host.on_heartbeat(env.publisher, &hb, env.timestamp_us, now_us, ep, trace),
                    Err(e) => warn!("gs: undecodable heartbeat: {e}"),
                }
            }
        }
        if let Some(host) = &mut self.host {
            let out = host.poll(now_us, ep, trace).map_err(|e| SimError::Invariant(format!("coordinator on gs: {e}")))?;
            for r in out.rejections {
                self.gs.on_coordinator_rejection(r.command_id, r.command, &r.reason, now_us);
                trace.push(audit_record(now_us, self.gs.audit().last().expect("just appended")));
            }
        }
        for env in self.state_sub.drain() {
            match messages::decode::<SwarmSnapshot>(&env.payload) {
                Ok(s) => {
                    if let Err(e) = self.gs.on_snapshot(env.publisher, s, now_us) {
                        trace.push(TraceRecord::new(
                            now_us,
                            TraceKind::Membership,
                            json!({ "event": "invalid_snapshot", "node": NodeId::GROUND_STATION, "writer": env.publisher, "error": e.to_string() }),
                        ));
                    }
                }
                Err(e) => warn!("gs: undecodable snapshot: {e}"),
            }
        }
        for env in self.events_sub.drain() {
            match messages::decode::<UavRejection>(&env.payload) {
                Ok(r) => {
                    self.gs.on_uav_rejection(&r);
                    trace.push(audit_record(now_us, self.gs.audit().last().expect("just appended")));
                }
                Err(e) => warn!("gs: undecodable event: {e}"),
            }
        }
        Ok(())
    }
}
