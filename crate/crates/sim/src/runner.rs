//! Single-threaded, virtual-clock scenario runner.
//!
//! Per tick: due events, network delivery, bus polling, ground station
//! (and its coordinator), then each UAV in id order. Every record produced
//! during a tick carries that tick's time.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::Serialize;
use serde_json::json;
use swarmlink_core::groundstation::CommandOutcome;
use swarmlink_core::messages::OperatorCommand;
use swarmlink_core::middleware::sim::{SimNetwork, SimTransport};
use swarmlink_core::middleware::Bus;
use swarmlink_core::mission::MissionState;
use swarmlink_core::model::{NodeId, Pose, SwarmSnapshot, UavId};

use crate::config::{CoordinatorSite, EventAction, Fault, ScenarioConfig};
use crate::gs::GsNode;
use crate::trace::{bus_record, net_record, TraceKind, TraceRecord};
use crate::uav::{UavNode, UavSetup};
use crate::SimError;

type SimBus = Bus<SimTransport>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub records: u64,
    pub fsm_rejections: u64,
    pub command_rejections: u64,
    pub audit_rejections: u64,
    pub frames_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UavSummary {
    pub id: UavId,
    pub alive: bool,
    pub mission_state: MissionState,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub end_us: u64,
    pub final_snapshot: Option<SwarmSnapshot>,
    pub uavs: Vec<UavSummary>,
    pub stats: RunStats,
}

pub struct Runner {
    cfg: ScenarioConfig,
    net: Rc<RefCell<SimNetwork>>,
    gs: Option<(SimBus, GsNode)>,
    uavs: BTreeMap<UavId, (SimBus, UavNode)>,
    /// Last known state of UAVs that have been killed.
    dead: BTreeMap<UavId, UavSummary>,
    tick: u64,
    next_event: usize,
    pending: Vec<TraceRecord>,
    stats: RunStats,
}

impl Runner {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        let net = SimNetwork::shared(cfg.network).map_err(|e| SimError::Invariant(e.to_string()))?;
        let mut gs_bus = Bus::new(NodeId::GROUND_STATION, SimTransport::new(NodeId::GROUND_STATION, net.clone()));
        let hosted = (cfg.sim.coordinator == CoordinatorSite::Gcs).then_some(cfg.membership);
        let gs = GsNode::new(hosted, &mut gs_bus, 0)?;
        let mut uavs = BTreeMap::new();
        for u in &cfg.uavs {
            let mut bus = Bus::new(u.id.node(), SimTransport::new(u.id.node(), net.clone()));
            let setup = UavSetup {
                id: u.id,
                class: u.class,
                start_pos: u.start_pos,
                params: u.params,
                membership: cfg.membership,
                fallback: cfg.sim.onboard_fallback,
            };
            let node = UavNode::new(&setup, &mut bus, 0)?;
            uavs.insert(u.id, (bus, node));
        }
        let m = cfg.network;
        let header = TraceRecord::new(
            0,
            TraceKind::Network,
            json!({
                "event": "model", "seed": m.seed, "latency_mean_ms": m.latency_mean_ms,
                "latency_jitter_ms": m.latency_jitter_ms, "drop_probability": m.drop_probability,
            }),
        );
        Ok(Runner {
            cfg,
            net,
            gs: Some((gs_bus, gs)),
            uavs,
            dead: BTreeMap::new(),
            tick: 0,
            next_event: 0,
            pending: vec![header],
            stats: RunStats::default(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Time of the next tick to run.
    pub fn now_us(&self) -> u64 {
        self.tick * self.cfg.sim.dt_us()
    }

    /// Whether every tick up to and including `duration_s` has run.
    pub fn is_finished(&self) -> bool {
        self.tick > self.cfg.sim.ticks()
    }

    pub fn ground_station(&self) -> Option<&GsNode> {
        self.gs.as_ref().map(|(_, g)| g)
    }

    pub fn uav(&self, id: UavId) -> Option<&UavNode> {
        self.uavs.get(&id).map(|(_, u)| u)
    }

    pub fn uavs(&self) -> impl Iterator<Item = &UavNode> {
        self.uavs.values().map(|(_, u)| u)
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    /// Sends an operator command through the ground station at the current
    /// time. Returns `None` when the ground station is down.
    pub fn submit(&mut self, cmd: OperatorCommand) -> Option<CommandOutcome> {
        let now = self.now_us();
        let (bus, gs) = self.gs.as_mut()?;
        Some(gs.submit(cmd, now, bus, &mut self.pending))
    }

    fn apply_fault(&mut self, fault: Fault, now: u64, trace: &mut Vec<TraceRecord>) {
        let mut v = json!({ "event": "fault", "fault": fault.name() });
        match fault {
            Fault::KillUav(n) => {
                v["node"] = json!(n);
                if n.is_ground_station() {
                    self.gs = None;
                } else if let Ok(id) = UavId::try_from(n) {
                    if let Some((_, u)) = self.uavs.remove(&id) {
                        self.dead.insert(id, UavSummary { id, alive: false, mission_state: u.mission_state(), pose: u.state().pose });
                    }
                }
                self.net.borrow_mut().detach(n);
            }
            Fault::SilenceHeartbeats(id) => {
                v["node"] = json!(id.node());
                if let Some((_, u)) = self.uavs.get_mut(&id) {
                    u.set_silenced(true);
                }
            }
            Fault::PartitionLink(a, b) => {
                v["a"] = json!(a);
                v["b"] = json!(b);
                self.net.borrow_mut().partition(a, b);
            }
            Fault::RestoreLink(a, b) => {
                v["a"] = json!(a);
                v["b"] = json!(b);
                self.net.borrow_mut().restore(a, b);
            }
        }
        trace.push(TraceRecord::new(now, TraceKind::Membership, v));
    }

    /// Runs one tick and returns its trace records.
    pub fn step(&mut self) -> Result<Vec<TraceRecord>, SimError> {
        let now = self.now_us();
        let mut trace = std::mem::take(&mut self.pending);

        while let Some(ev) = self.cfg.events.get(self.next_event).filter(|e| e.t_us <= now).cloned() {
            self.next_event += 1;
            match ev.action {
                EventAction::Operator(cmd) => match self.gs.as_mut() {
                    Some((bus, gs)) => {
                        gs.submit(cmd, now, bus, &mut trace);
                    }
                    None => trace.push(TraceRecord::new(
                        now,
                        TraceKind::Command,
                        json!({ "event": "unsent", "command": cmd.name(), "reason": "ground station down" }),
                    )),
                },
                EventAction::Fault(f) => self.apply_fault(f, now, &mut trace),
            }
        }

        self.net.borrow_mut().step_network(now).map_err(|e| SimError::Invariant(e.to_string()))?;
        if let Some((bus, _)) = self.gs.as_mut() {
            bus.poll(now);
        }
        for (bus, _) in self.uavs.values_mut() {
            bus.poll(now);
        }

        if let Some((bus, gs)) = self.gs.as_mut() {
            gs.step(now, bus, &mut trace)?;
        }
        let truth: Vec<(UavId, Pose)> = self.uavs.values().map(|(_, u)| (u.id(), u.state().pose)).collect();
        let dt = (self.tick > 0).then(|| self.cfg.sim.dt_ms as f64 / 1000.0);
        for (bus, u) in self.uavs.values_mut() {
            u.step(now, dt, &truth, bus, &mut trace)?;
        }

        if let Some((bus, _)) = self.gs.as_mut() {
            trace.extend(bus.drain_events().iter().map(|e| bus_record(now, NodeId::GROUND_STATION, e)));
        }
        for (id, (bus, _)) in self.uavs.iter_mut() {
            trace.extend(bus.drain_events().iter().map(|e| bus_record(now, id.node(), e)));
        }
        trace.extend(self.net.borrow_mut().drain_events().iter().map(|e| net_record(now, e)));

        for r in &trace {
            self.count(r);
        }
        self.tick += 1;
        Ok(trace)
    }

    fn count(&mut self, r: &TraceRecord) {
        self.stats.records += 1;
        match r.kind {
            TraceKind::Transition if r.bool("accepted") == Some(false) => self.stats.fsm_rejections += 1,
            TraceKind::Command if r.str("event") == Some("rejected") => self.stats.command_rejections += 1,
            TraceKind::Audit if r.bool("accepted") == Some(false) => self.stats.audit_rejections += 1,
            TraceKind::Network if r.str("event") == Some("drop") => self.stats.frames_dropped += 1,
            _ => {}
        }
    }

    pub fn summary(&self) -> RunSummary {
        let end_us = self.now_us().saturating_sub(self.cfg.sim.dt_us());
        let final_snapshot = self
            .gs
            .as_ref()
            .and_then(|(_, g)| g.latest().cloned())
            .or_else(|| self.uavs.values().find_map(|(_, u)| u.coordinator().map(|c| c.snapshot(end_us))));
        let mut uavs: BTreeMap<UavId, UavSummary> = self.dead.clone();
        for (_, u) in self.uavs.values() {
            uavs.insert(u.id(), UavSummary { id: u.id(), alive: true, mission_state: u.mission_state(), pose: u.state().pose });
        }
        RunSummary { seed: self.cfg.sim.seed, end_us, final_snapshot, uavs: uavs.into_values().collect(), stats: self.stats }
    }

    /// Runs to the end, handing each record to `sink` as it is produced.
    pub fn run<E>(mut self, mut sink: impl FnMut(&TraceRecord) -> Result<(), E>) -> Result<RunSummary, SimError>
    where
        SimError: From<E>,
    {
        while !self.is_finished() {
            for r in self.step()? {
                sink(&r)?;
            }
        }
        Ok(self.summary())
    }
}

/// Runs a scenario and keeps the whole trace in memory.
pub fn run_to_vec(cfg: ScenarioConfig) -> Result<(Vec<TraceRecord>, RunSummary), SimError> {
    let mut out = Vec::new();
    let summary = Runner::new(cfg)?.run(|r| {
        out.push(r.clone());
        Ok::<(), SimError>(())
    })?;
    Ok((out, summary))
}
