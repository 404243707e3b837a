//! One UAV: vehicle, mission FSM, payload and, when it has to, the
//! coordinator role.

use log::warn;
use serde_json::json;
use swarmlink_core::coordinator::{assume_coordinator, Coordinator, MembershipConfig, Registry};
use swarmlink_core::messages::{self, qos, GimbalCommand, Heartbeat, NodeCommand, Telemetry, UavCommandMsg, UavRejection};
use swarmlink_core::middleware::{Subscription, TopicName};
use swarmlink_core::mission::{MissionEvent, MissionFsm, MissionState};
use swarmlink_core::model::{NodeId, Pose, SwarmSnapshot, UavClass, UavId, Vec3};
use swarmlink_core::payload::{gimbal_point_at, run_detector, Camera, DetectionReport, GeometricDetector, GimbalState};
use swarmlink_core::vehicle::{Vehicle, VehicleCommand, VehicleEvent, VehicleParams, VehicleState};

use crate::endpoint::Endpoint;
use crate::host::CoordinatorHost;
use crate::trace::{TraceKind, TraceRecord};
use crate::SimError;

/// Heartbeat periods without a snapshot before the link counts as lost.
pub const LINK_LOSS_PERIODS: u64 = 10;
/// Horizontal distance from launch at which a returning UAV starts landing.
pub const RTL_LAND_RADIUS_M: f64 = 1.0;
pub const TELEMETRY_PERIOD_US: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct UavSetup {
    pub id: UavId,
    pub class: UavClass,
    pub start_pos: Vec3,
    pub params: VehicleParams,
    pub membership: MembershipConfig,
    /// Watch `swarm/state` and take over coordination when it goes quiet.
    pub fallback: bool,
}

struct Payload {
    camera: Camera,
    gimbal: GimbalState,
    target: Option<Vec3>,
    detector: GeometricDetector,
}

struct Fallback {
    registry: Registry,
    last_snapshot: Option<SwarmSnapshot>,
    host: Option<CoordinatorHost>,
}

pub struct UavNode {
    id: UavId,
    class: UavClass,
    cfg: MembershipConfig,
    vehicle: Vehicle,
    fsm: MissionFsm,
    cmd_sub: Subscription,
    state_sub: Subscription,
    gimbal_sub: Option<Subscription>,
    hb_sub: Option<Subscription>,
    payload: Option<Payload>,
    hb_seq: u64,
    next_hb_us: u64,
    next_tlm_us: u64,
    silenced: bool,
    started_us: u64,
    /// Sender stamp of the newest snapshot seen.
    last_snapshot_stamp: Option<u64>,
    /// Local time that snapshot arrived.
    last_snapshot_rx: Option<u64>,
    link_lost: bool,
    fallback: Option<Fallback>,
}

impl UavNode {
    pub fn new(setup: &UavSetup, ep: &mut dyn Endpoint, now_us: u64) -> Result<Self, SimError> {
        let id = setup.id;
        let vehicle = Vehicle::new(setup.start_pos, 0.0, setup.params).map_err(|e| SimError::Invariant(format!("uav {id}: {e}")))?;
        let cmd_sub = ep.subscribe(TopicName::uav_cmd(id), qos::UAV_CMD);
        let state_sub = ep.subscribe(TopicName::swarm_state(), qos::SWARM_STATE);
        let observation = setup.class == UavClass::Observation;
        let gimbal_sub = observation.then(|| ep.subscribe(TopicName::uav_gimbal_cmd(id), qos::GIMBAL_CMD));
        let hb_sub = setup.fallback.then(|| ep.subscribe(TopicName::heartbeat(), qos::HEARTBEAT));
        let payload = observation.then(|| Payload {
            camera: Camera::default_for(id),
            gimbal: GimbalState::default(),
            target: None,
            detector: GeometricDetector::default(),
        });
        Ok(UavNode {
            id,
            class: setup.class,
            cfg: setup.membership,
            vehicle,
            fsm: MissionFsm::new(),
            cmd_sub,
            state_sub,
            gimbal_sub,
            hb_sub,
            payload,
            hb_seq: 0,
            next_hb_us: now_us,
            next_tlm_us: now_us,
            silenced: false,
            started_us: now_us,
            last_snapshot_stamp: None,
            last_snapshot_rx: None,
            link_lost: false,
            fallback: setup.fallback.then(|| Fallback { registry: Registry::new(), last_snapshot: None, host: None }),
        })
    }

    pub fn id(&self) -> UavId {
        self.id
    }

    pub fn node(&self) -> NodeId {
        self.id.node()
    }

    pub fn state(&self) -> &VehicleState {
        self.vehicle.state()
    }

    pub fn mission_state(&self) -> MissionState {
        self.fsm.state()
    }

    pub fn gimbal(&self) -> Option<GimbalState> {
        self.payload.as_ref().map(|p| p.gimbal)
    }

    pub fn is_coordinator(&self) -> bool {
        self.fallback.as_ref().is_some_and(|f| f.host.is_some())
    }

    /// The coordinator this UAV is running, if any.
    pub fn coordinator(&self) -> Option<&Coordinator> {
        self.fallback.as_ref()?.host.as_ref().map(|h| h.coordinator())
    }

    pub fn set_silenced(&mut self, silenced: bool) {
        self.silenced = silenced;
    }

    pub fn is_silenced(&self) -> bool {
        self.silenced
    }

    /// One scheduler tick. `dt_s` is `None` on the very first tick, before
    /// any time has passed.
    pub fn step(
        &mut self,
        now_us: u64,
        dt_s: Option<f64>,
        truth: &[(UavId, Pose)],
        ep: &mut dyn Endpoint,
        trace: &mut Vec<TraceRecord>,
    ) -> Result<(), SimError> {
        self.take_snapshots(now_us, ep, trace);
        self.take_heartbeats(now_us, ep, trace);
        self.run_fallback(now_us, ep, trace)?;
        for env in self.cmd_sub.drain() {
            match messages::decode::<UavCommandMsg>(&env.payload) {
                Ok(msg) => self.handle_command(msg, now_us, ep, trace),
                Err(e) => warn!("uav {}: undecodable command: {e}", self.id),
            }
        }
        if let Some(sub) = &self.gimbal_sub {
            for env in sub.drain() {
                match messages::decode::<GimbalCommand>(&env.payload) {
                    Ok(g) if g.target.is_finite() => {
                        if let Some(p) = &mut self.payload {
                            p.target = Some(g.target);
                        }
                    }
                    Ok(_) => warn!("uav {}: non-finite gimbal target", self.id),
                    Err(e) => warn!("uav {}: undecodable gimbal command: {e}", self.id),
                }
            }
        }
        self.check_link(now_us, trace);

        if let Some(dt) = dt_s {
            let events = self.vehicle.step(dt, now_us).map_err(|e| SimError::Invariant(format!("uav {} vehicle step: {e}", self.id)))?;
            for ev in events {
                let mission_ev = match ev {
                    VehicleEvent::Airborne => MissionEvent::TakeoffComplete,
                    VehicleEvent::Touchdown => MissionEvent::TouchdownDetected,
                };
                self.fire(mission_ev, None, now_us, trace);
            }
            let over_launch = self.vehicle.state().airborne && self.vehicle.horizontal_distance_to_launch() <= RTL_LAND_RADIUS_M;
            if self.fsm.state().is_returning()
                && over_launch
                && self.fsm.peek(MissionEvent::LandCmd).is_ok()
                && self.vehicle.offboard_command(VehicleCommand::Land).is_ok()
            {
                self.fire(MissionEvent::LandCmd, None, now_us, trace);
            }
        }
        if !self.vehicle.state().is_consistent() {
            return Err(SimError::Invariant(format!("uav {} vehicle state inconsistent: {:?}", self.id, self.vehicle.state())));
        }

        self.run_payload(now_us, truth, ep);
        self.publish_status(now_us, ep, trace);
        Ok(())
    }

    fn take_snapshots(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) {
        for env in self.state_sub.drain() {
            let snap = match messages::decode::<SwarmSnapshot>(&env.payload) {
                Ok(s) => s,
                Err(e) => {
                    warn!("uav {}: undecodable snapshot: {e}", self.id);
                    continue;
                }
            };
            self.last_snapshot_stamp = Some(self.last_snapshot_stamp.map_or(env.timestamp_us, |t| t.max(env.timestamp_us)));
            self.last_snapshot_rx = Some(now_us);
            if self.fsm.state() == MissionState::Init {
                self.fire(MissionEvent::LinkUp, None, now_us, trace);
            }
            if self.link_lost {
                self.link_lost = false;
                if self.fsm.state() == MissionState::Failsafe {
                    self.fire(MissionEvent::LinkRestored, None, now_us, trace);
                    self.vehicle.hold_position();
                }
            }
            let me = self.node();
            if let Some(f) = &mut self.fallback {
                if env.publisher < me && f.host.is_some() {
                    f.host.take().expect("checked").stop(ep);
                    trace.push(TraceRecord::new(
                        now_us,
                        TraceKind::Membership,
                        json!({ "event": "coordinator_stepped_down", "node": me, "yielded_to": env.publisher }),
                    ));
                }
                f.last_snapshot = Some(snap);
            }
        }
    }

    fn take_heartbeats(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) {
        let (Some(sub), Some(f)) = (&self.hb_sub, &mut self.fallback) else { return };
        for env in sub.drain() {
            let hb = match messages::decode::<Heartbeat>(&env.payload) {
                Ok(hb) => hb,
                Err(e) => {
                    warn!("uav {}: undecodable heartbeat: {e}", self.id);
                    continue;
                }
            };
            if let Err(e) = f.registry.ingest_heartbeat_at(env.publisher, &hb, env.timestamp_us, now_us) {
                warn!("uav {}: {e}", self.id);
            }
            if let Some(h) = &mut f.host {
                h.on_heartbeat(env.publisher, &hb, env.timestamp_us, now_us, ep, trace);
            }
        }
    }

    fn run_fallback(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) -> Result<(), SimError> {
        let me = self.id;
        let silence = now_us.saturating_sub(self.last_snapshot_stamp.unwrap_or(self.started_us));
        let Some(f) = &mut self.fallback else { return Ok(()) };
        f.registry.expire_members(now_us, &self.cfg);
        if f.host.is_none() && f.registry.contains(me) && assume_coordinator(me, &f.registry, silence, &self.cfg) {
            let coord = Coordinator::take_over(me.node(), self.cfg, f.registry.clone(), f.last_snapshot.as_ref())
                .map_err(|e| SimError::Invariant(format!("uav {me} takeover: {e}")))?;
            trace.push(TraceRecord::new(
                now_us,
                TraceKind::Membership,
                json!({ "event": "coordinator_assumed", "node": me.node(), "silence_us": silence }),
            ));
            f.host = Some(CoordinatorHost::start(coord, ep, now_us));
        }
        if let Some(h) = &mut f.host {
            h.poll(now_us, ep, trace).map_err(|e| SimError::Invariant(format!("coordinator on uav {me}: {e}")))?;
        }
        Ok(())
    }

    fn check_link(&mut self, now_us: u64, trace: &mut Vec<TraceRecord>) {
        let Some(rx) = self.last_snapshot_rx else { return };
        if self.link_lost || now_us.saturating_sub(rx) <= LINK_LOSS_PERIODS * self.cfg.heartbeat_period_us() {
            return;
        }
        self.link_lost = true;
        if self.fsm.peek(MissionEvent::LinkLost).is_ok() {
            self.fire(MissionEvent::LinkLost, None, now_us, trace);
            self.vehicle.return_to_launch();
        }
    }

    /// Applies an FSM event and records the outcome.
    fn fire(&mut self, ev: MissionEvent, command_id: Option<u64>, now_us: u64, trace: &mut Vec<TraceRecord>) -> bool {
        let from = self.fsm.state();
        let mut v = json!({ "uav": self.id, "from": from, "event": ev });
        if let Some(c) = command_id {
            v["command_id"] = json!(c);
        }
        let ok = match self.fsm.apply(ev) {
            Ok(to) => {
                v["to"] = json!(to);
                v["accepted"] = json!(true);
                true
            }
            Err(_) => {
                v["accepted"] = json!(false);
                false
            }
        };
        trace.push(TraceRecord::new(now_us, TraceKind::Transition, v));
        ok
    }

    fn handle_command(&mut self, msg: UavCommandMsg, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) {
        let state = self.fsm.state();
        let cmd = msg.command;
        let result = match (cmd, cmd.mission_event()) {
            (NodeCommand::Setpoint { target }, _) => {
                if state != MissionState::Offboard {
                    Err("not offboard".to_string())
                } else {
                    self.vehicle.track(target).map_err(|r| r.reason)
                }
            }
            (_, Some(ev)) => {
                if self.fsm.peek(ev).is_err() {
                    self.fire(ev, msg.command_id, now_us, trace);
                    Err(format!("{ev} not allowed"))
                } else {
                    let driven = match cmd {
                        NodeCommand::Arm => self.vehicle.offboard_command(VehicleCommand::Arm),
                        NodeCommand::Disarm => self.vehicle.offboard_command(VehicleCommand::Disarm),
                        NodeCommand::Takeoff => self.vehicle.offboard_command(VehicleCommand::Takeoff),
                        NodeCommand::Land => self.vehicle.offboard_command(VehicleCommand::Land),
                        NodeCommand::Hold => {
                            self.vehicle.hold_position();
                            Ok(())
                        }
                        NodeCommand::Rtl => {
                            self.vehicle.return_to_launch();
                            Ok(())
                        }
                        NodeCommand::Offboard | NodeCommand::Setpoint { .. } => Ok(()),
                    };
                    driven
                        .map(|()| {
                            self.fire(ev, msg.command_id, now_us, trace);
                        })
                        .map_err(|r| r.reason)
                }
            }
            (_, None) => Ok(()),
        };
        let Err(reason) = result else { return };
        let mut v = json!({ "event": "rejected", "node": self.node(), "command": cmd.name(), "state": state, "reason": reason });
        if let Some(c) = msg.command_id {
            v["command_id"] = json!(c);
        }
        trace.push(TraceRecord::new(now_us, TraceKind::Command, v));
        let rejection =
            UavRejection { id: self.id, t_us: now_us, command_id: msg.command_id, command: cmd.name().to_string(), state, reason };
        if let Err(e) = ep.publish(&TopicName::swarm_events(), qos::SWARM_EVENTS, messages::encode(&rejection), now_us) {
            warn!("uav {}: could not report rejection: {e}", self.id);
        }
    }

    fn run_payload(&mut self, now_us: u64, truth: &[(UavId, Pose)], ep: &mut dyn Endpoint) {
        let pose = self.vehicle.state().pose;
        let Some(p) = &mut self.payload else { return };
        if let Some(target) = p.target {
            // a target at the UAV's own position has no direction; keep the last aim
            if let Ok(aim) = gimbal_point_at(&pose, target) {
                p.gimbal = aim.state;
            }
        }
        let Some(frame) = p.camera.stream_tick(now_us) else { return };
        if let Err(e) = ep.publish(&TopicName::uav_frames(self.id), qos::FRAMES, messages::encode(&frame), now_us) {
            warn!("uav {}: frame publish failed: {e}", self.id);
        }
        let detections = run_detector(&p.detector, &frame, truth, &pose, &p.gimbal);
        let report = DetectionReport { source_uav: self.id, frame_seq: frame.seq, timestamp_us: now_us, detections };
        if let Err(e) = ep.publish(&TopicName::uav_detections(self.id), qos::DETECTIONS, messages::encode(&report), now_us) {
            warn!("uav {}: detection publish failed: {e}", self.id);
        }
    }

    fn publish_status(&mut self, now_us: u64, ep: &mut dyn Endpoint, trace: &mut Vec<TraceRecord>) {
        let state = *self.vehicle.state();
        let mission_state = self.fsm.state();
        if now_us >= self.next_tlm_us {
            while self.next_tlm_us <= now_us {
                self.next_tlm_us += TELEMETRY_PERIOD_US;
            }
            let t = Telemetry { id: self.id, t_us: now_us, class: self.class, mission_state, state };
            if let Err(e) = ep.publish(&TopicName::uav_telemetry(self.id), qos::TELEMETRY, messages::encode(&t), now_us) {
                warn!("uav {}: telemetry publish failed: {e}", self.id);
            }
            trace.push(TraceRecord::new(
                now_us,
                TraceKind::Telemetry,
                json!({
                    "uav": self.id,
                    "state": mission_state,
                    "pos": state.pose.position,
                    "yaw": state.pose.yaw,
                    "vel": state.velocity,
                    "armed": state.armed,
                    "airborne": state.airborne,
                }),
            ));
        }
        if now_us >= self.next_hb_us {
            while self.next_hb_us <= now_us {
                self.next_hb_us += self.cfg.heartbeat_period_us();
            }
            if !self.silenced {
                self.hb_seq += 1;
                let hb = Heartbeat { id: self.id, class: self.class, mission_state, pose: state.pose, seq: self.hb_seq };
                if let Err(e) = ep.publish(&TopicName::heartbeat(), qos::HEARTBEAT, messages::encode(&hb), now_us) {
                    warn!("uav {}: heartbeat publish failed: {e}", self.id);
                }
            }
        }
    }
}
