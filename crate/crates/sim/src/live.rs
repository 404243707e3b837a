//! Live drivers: the simulated swarm paced against the wall clock, or one
//! UDP participant per node on the loopback interface. Both expose the
//! ground station through a [`GcsHandle`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{error, warn};
use serde_json::json;
use swarmlink_core::groundstation::{AuditEntry, CommandOutcome, FeedItem, GroundStation};
use swarmlink_core::messages::OperatorCommand;
use swarmlink_core::middleware::udp::{LiveClock, UdpParticipant, UdpTransport};
use swarmlink_core::model::{NodeId, Pose, SwarmSnapshot, UavId};
use thiserror::Error;

use crate::config::{CoordinatorSite, EventAction, Fault, ScenarioConfig};
use crate::endpoint::SharedUdp;
use crate::gs::GsNode;
use crate::runner::Runner;
use crate::trace::{bus_record, TraceKind, TraceRecord};
use crate::uav::{UavNode, UavSetup};
use crate::SimError;

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LiveError {
    #[error("the swarm runtime has stopped")]
    Stopped,
    #[error("the ground station is down")]
    GroundStationDown,
}

/// Latest snapshot as seen by the ground station, for feed pacing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedState {
    pub now_us: u64,
    /// Bumped whenever a new snapshot is cached.
    pub version: u64,
    pub latest: Option<SwarmSnapshot>,
}

enum Request {
    Submit(OperatorCommand, SyncSender<Result<CommandOutcome, LiveError>>),
    Audit(u64, SyncSender<Result<Vec<AuditEntry>, LiveError>>),
    View(SyncSender<Result<FeedItem, LiveError>>),
}

/// Thread-safe access to a running ground station.
#[derive(Clone)]
pub struct GcsHandle {
    tx: Sender<Request>,
    feed: Arc<Mutex<FeedState>>,
    uav_ids: Arc<BTreeSet<UavId>>,
}

impl GcsHandle {
    fn ask<T>(&self, make: impl FnOnce(SyncSender<Result<T, LiveError>>) -> Request) -> Result<T, LiveError> {
        let (tx, rx) = mpsc::sync_channel(1);
        self.tx.send(make(tx)).map_err(|_| LiveError::Stopped)?;
        rx.recv_timeout(REPLY_TIMEOUT).map_err(|_| LiveError::Stopped)?
    }

    pub fn submit(&self, cmd: OperatorCommand) -> Result<CommandOutcome, LiveError> {
        self.ask(|tx| Request::Submit(cmd, tx))
    }

    pub fn audit_since(&self, since: u64) -> Result<Vec<AuditEntry>, LiveError> {
        self.ask(|tx| Request::Audit(since, tx))
    }

    pub fn view(&self) -> Result<FeedItem, LiveError> {
        self.ask(Request::View)
    }

    pub fn feed(&self) -> FeedState {
        self.feed.lock().expect("feed poisoned").clone()
    }

    /// Whether `id` is part of the configured swarm.
    pub fn has_uav(&self, id: UavId) -> bool {
        self.uav_ids.contains(&id)
    }
}

struct GsService {
    rx: Receiver<Request>,
    feed: Arc<Mutex<FeedState>>,
}

fn service(uav_ids: BTreeSet<UavId>) -> (GcsHandle, GsService) {
    let (tx, rx) = mpsc::channel();
    let feed = Arc::new(Mutex::new(FeedState::default()));
    (GcsHandle { tx, feed: feed.clone(), uav_ids: Arc::new(uav_ids) }, GsService { rx, feed })
}

/// What a request needs from whoever owns the ground station.
trait GsAccess {
    fn now_us(&self) -> u64;
    fn station(&self) -> Option<&GroundStation>;
    fn submit(&mut self, cmd: OperatorCommand) -> Option<CommandOutcome>;
}

impl GsAccess for Runner {
    fn now_us(&self) -> u64 {
        Runner::now_us(self)
    }

    fn station(&self) -> Option<&GroundStation> {
        self.ground_station().map(|g| g.ground_station())
    }

    fn submit(&mut self, cmd: OperatorCommand) -> Option<CommandOutcome> {
        Runner::submit(self, cmd)
    }
}

impl GsService {
    fn answer(&self, req: Request, gs: &mut dyn GsAccess) {
        let now = gs.now_us();
        // a client that gave up waiting is not an error
        match req {
            Request::Submit(cmd, tx) => {
                let _ = tx.send(gs.submit(cmd).ok_or(LiveError::GroundStationDown));
            }
            Request::Audit(since, tx) => {
                let _ = tx.send(gs.station().map(|g| g.audit_since(since)).ok_or(LiveError::GroundStationDown));
            }
            Request::View(tx) => {
                let _ = tx.send(gs.station().map(|g| g.view(now)).ok_or(LiveError::GroundStationDown));
            }
        }
    }

    fn publish(&self, now_us: u64, latest: Option<&SwarmSnapshot>) {
        let mut f = self.feed.lock().expect("feed poisoned");
        f.now_us = now_us;
        if latest != f.latest.as_ref() {
            f.latest = latest.cloned();
            f.version += 1;
        }
    }
}

/// Writes trace records as JSON lines; write errors stop tracing, not the run.
struct TraceSink(Option<Box<dyn Write + Send>>);

impl TraceSink {
    fn put(&mut self, records: &[TraceRecord]) {
        if let Some(w) = self.0.as_mut() {
            if let Err(e) = records.iter().try_for_each(|r| writeln!(w, "{}", r.to_line())) {
                error!("trace write failed, tracing stopped: {e}");
                self.0 = None;
            }
        }
    }

    fn flush(&mut self) {
        if let Some(w) = self.0.as_mut() {
            let _ = w.flush();
        }
    }
}

/// A background runtime; stops and joins on drop.
pub struct LiveRun {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    failure: Arc<Mutex<Option<String>>>,
}

impl LiveRun {
    pub fn stop(mut self) -> Option<String> {
        self.shutdown();
        self.failure.lock().expect("failure poisoned").clone()
    }

    /// The error that ended the run early, if any.
    pub fn failure(&self) -> Option<String> {
        self.failure.lock().expect("failure poisoned").clone()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for LiveRun {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn configured_ids(cfg: &ScenarioConfig) -> BTreeSet<UavId> {
    cfg.uavs.iter().map(|u| u.id).collect()
}

/// Runs the simulated swarm at `speed` times wall-clock speed. The scenario
/// keeps running past its configured duration until stopped.
pub fn spawn_sim(cfg: ScenarioConfig, speed: f64, trace: Option<Box<dyn Write + Send>>) -> Result<(GcsHandle, LiveRun), SimError> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(SimError::Invariant(format!("speed must be positive, got {speed}")));
    }
    let (handle, svc) = service(configured_ids(&cfg));
    let stop = Arc::new(AtomicBool::new(false));
    let failure = Arc::new(Mutex::new(None));
    let (ready_tx, ready_rx) = mpsc::sync_channel::<Result<(), SimError>>(1);
    let thread = {
        let stop = stop.clone();
        let failure = failure.clone();
        thread::Builder::new().name("live-sim".into()).spawn(move || {
            let mut runner = match Runner::new(cfg) {
                Ok(r) => {
                    let _ = ready_tx.send(Ok(()));
                    r
                }
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            let mut sink = TraceSink(trace);
            let start = Instant::now();
            while !stop.load(Ordering::Relaxed) {
                let due = start + Duration::from_secs_f64(runner.now_us() as f64 / 1e6 / speed);
                loop {
                    let wait = due.saturating_duration_since(Instant::now());
                    match svc.rx.recv_timeout(wait) {
                        Ok(req) => svc.answer(req, &mut runner),
                        Err(RecvTimeoutError::Timeout) => break,
                        Err(RecvTimeoutError::Disconnected) => {
                            if Instant::now() >= due {
                                break;
                            }
                            thread::sleep(wait.min(Duration::from_millis(20)));
                        }
                    }
                }
                match runner.step() {
                    Ok(records) => sink.put(&records),
                    Err(e) => {
                        error!("live sim stopped: {e}");
                        *failure.lock().expect("failure poisoned") = Some(e.to_string());
                        break;
                    }
                }
                svc.publish(runner.now_us(), runner.ground_station().and_then(|g| g.latest()));
            }
            sink.flush();
        })?
    };
    match ready_rx.recv() {
        Ok(Ok(())) => Ok((handle, LiveRun { stop, threads: vec![thread], failure })),
        Ok(Err(e)) => {
            let _ = thread.join();
            Err(e)
        }
        Err(_) => Err(SimError::Invariant("live sim thread exited during start-up".into())),
    }
}

/// Loopback address of a node in a UDP run.
pub fn udp_addr(base_port: u16, node: NodeId) -> SocketAddr {
    SocketAddr::from((Ipv4Addr::LOCALHOST, base_port + node.0))
}

fn participant(node: NodeId, nodes: &[NodeId], base_port: u16, clock: LiveClock) -> Result<UdpParticipant, SimError> {
    let mut t = UdpTransport::bind(node, udp_addr(base_port, node)).map_err(|e| SimError::Invariant(e.to_string()))?;
    for &n in nodes {
        t.add_peer(n, udp_addr(base_port, n));
    }
    Ok(UdpParticipant::start(t, clock))
}

fn drain_bus(p: &UdpParticipant, now: u64, out: &mut Vec<TraceRecord>) {
    let events = p.bus().lock().expect("bus poisoned").drain_events();
    let node = p.bus().lock().expect("bus poisoned").node();
    out.extend(events.iter().map(|e| bus_record(now, node, e)));
}

struct UdpGs {
    part: UdpParticipant,
    ep: SharedUdp,
    node: GsNode,
}

struct UdpGsAccess<'a> {
    gs: &'a mut Option<UdpGs>,
    now_us: u64,
    out: Vec<TraceRecord>,
}

impl GsAccess for UdpGsAccess<'_> {
    fn now_us(&self) -> u64 {
        self.now_us
    }

    fn station(&self) -> Option<&GroundStation> {
        self.gs.as_ref().map(|g| g.node.ground_station())
    }

    fn submit(&mut self, cmd: OperatorCommand) -> Option<CommandOutcome> {
        let g = self.gs.as_mut()?;
        Some(g.node.submit(cmd, self.now_us, &mut g.ep, &mut self.out))
    }
}

type Flags = Arc<Mutex<BTreeMap<UavId, (bool, bool)>>>;

/// Runs every node as its own UDP participant on 127.0.0.1, node `n` on
/// port `base_port + n`, in real time. Records from all nodes are merged in
/// arrival order, so trace times are only roughly sorted. Link partitions
/// have no UDP counterpart and are refused.
pub fn spawn_udp(cfg: ScenarioConfig, base_port: u16, trace: Option<Box<dyn Write + Send>>) -> Result<(GcsHandle, LiveRun), SimError> {
    if cfg.events.iter().any(|e| matches!(e.action, EventAction::Fault(Fault::PartitionLink(..) | Fault::RestoreLink(..)))) {
        return Err(SimError::Invariant("link partitions are only supported in simulation".into()));
    }
    let max_node = cfg.uavs.iter().map(|u| u.id.get()).max().unwrap_or(0);
    if base_port.checked_add(max_node).is_none() {
        return Err(SimError::Invariant(format!("base port {base_port} leaves no room for node {max_node}")));
    }
    let clock = LiveClock::new();
    let nodes: Vec<NodeId> = std::iter::once(NodeId::GROUND_STATION).chain(cfg.uavs.iter().map(|u| u.id.node())).collect();
    let dt = Duration::from_millis(cfg.sim.dt_ms);
    let stop = Arc::new(AtomicBool::new(false));
    let failure = Arc::new(Mutex::new(None));
    let truth: Arc<Mutex<BTreeMap<UavId, Pose>>> = Arc::new(Mutex::new(BTreeMap::new()));
    // (killed, silenced) per UAV, flipped by the ground station thread's event schedule
    let flags: Flags = Arc::new(Mutex::new(cfg.uavs.iter().map(|u| (u.id, (false, false))).collect()));
    let (trace_tx, trace_rx) = mpsc::channel::<Vec<TraceRecord>>();
    let (handle, svc) = service(configured_ids(&cfg));
    let mut threads = Vec::new();

    let fail = |failure: &Arc<Mutex<Option<String>>>, what: String| {
        error!("{what}");
        failure.lock().expect("failure poisoned").get_or_insert(what);
    };

    let mut participants = Vec::new();
    for &n in &nodes {
        participants.push(participant(n, &nodes, base_port, clock)?);
    }
    let mut participants = participants.into_iter();
    let gs_part = participants.next().expect("ground station participant");

    for (spec, part) in cfg.uavs.iter().zip(participants) {
        let setup = UavSetup {
            id: spec.id,
            class: spec.class,
            start_pos: spec.start_pos,
            params: spec.params,
            membership: cfg.membership,
            fallback: cfg.sim.onboard_fallback,
        };
        let (stop, failure, truth, flags, trace_tx) = (stop.clone(), failure.clone(), truth.clone(), flags.clone(), trace_tx.clone());
        threads.push(thread::Builder::new().name(format!("uav-{}", spec.id)).spawn(move || {
            let mut ep = SharedUdp { node: setup.id.node(), bus: part.bus().clone() };
            let mut node = match UavNode::new(&setup, &mut ep, clock.now_us()) {
                Ok(n) => n,
                Err(e) => return fail(&failure, format!("uav {}: {e}", setup.id)),
            };
            let mut last: Option<u64> = None;
            while !stop.load(Ordering::Relaxed) {
                let now = clock.now_us();
                let (killed, silenced) = flags.lock().expect("flags poisoned").get(&setup.id).copied().unwrap_or_default();
                if killed {
                    truth.lock().expect("truth poisoned").remove(&setup.id);
                    break;
                }
                node.set_silenced(silenced);
                let seen: Vec<(UavId, Pose)> = truth.lock().expect("truth poisoned").iter().map(|(k, v)| (*k, *v)).collect();
                let mut out = Vec::new();
                let dt_s = last.map(|l| (now - l) as f64 / 1e6);
                if let Err(e) = node.step(now, dt_s, &seen, &mut ep, &mut out) {
                    return fail(&failure, format!("uav {}: {e}", setup.id));
                }
                last = Some(now);
                truth.lock().expect("truth poisoned").insert(setup.id, node.state().pose);
                drain_bus(&part, now, &mut out);
                if trace_tx.send(out).is_err() {
                    break;
                }
                thread::sleep(dt.saturating_sub(Duration::from_micros(clock.now_us() - now)));
            }
        })?);
    }

    {
        let (stop, failure, flags, trace_tx) = (stop.clone(), failure.clone(), flags.clone(), trace_tx.clone());
        let hosted = (cfg.sim.coordinator == CoordinatorSite::Gcs).then_some(cfg.membership);
        let events = cfg.events.clone();
        threads.push(thread::Builder::new().name("gs".into()).spawn(move || {
            let mut ep = SharedUdp { node: NodeId::GROUND_STATION, bus: gs_part.bus().clone() };
            let mut gs = match GsNode::new(hosted, &mut ep, clock.now_us()) {
                Ok(node) => Some(UdpGs { part: gs_part, ep, node }),
                Err(e) => return fail(&failure, format!("ground station: {e}")),
            };
            let mut next_event = 0;
            while !stop.load(Ordering::Relaxed) {
                let now = clock.now_us();
                let mut out = Vec::new();
                while let Some(ev) = events.get(next_event).filter(|e| e.t_us <= now) {
                    next_event += 1;
                    match ev.action {
                        EventAction::Operator(cmd) => match gs.as_mut() {
                            Some(g) => {
                                g.node.submit(cmd, now, &mut g.ep, &mut out);
                            }
                            None => out.push(TraceRecord::new(
                                now,
                                TraceKind::Command,
                                json!({ "event": "unsent", "command": cmd.name(), "reason": "ground station down" }),
                            )),
                        },
                        EventAction::Fault(f) => {
                            let mut v = json!({ "event": "fault", "fault": f.name() });
                            match f {
                                Fault::KillUav(n) if n.is_ground_station() => {
                                    v["node"] = json!(n);
                                    // dropping the participant closes its socket
                                    gs = None;
                                }
                                Fault::KillUav(n) => {
                                    v["node"] = json!(n);
                                    if let Ok(id) = UavId::try_from(n) {
                                        flags.lock().expect("flags poisoned").entry(id).or_default().0 = true;
                                    }
                                }
                                Fault::SilenceHeartbeats(id) => {
                                    v["node"] = json!(id.node());
                                    flags.lock().expect("flags poisoned").entry(id).or_default().1 = true;
                                }
                                Fault::PartitionLink(..) | Fault::RestoreLink(..) => unreachable!("refused at start-up"),
                            }
                            out.push(TraceRecord::new(now, TraceKind::Membership, v));
                        }
                    }
                }
                if let Some(g) = gs.as_mut() {
                    if let Err(e) = g.node.step(now, &mut g.ep, &mut out) {
                        return fail(&failure, format!("ground station: {e}"));
                    }
                    drain_bus(&g.part, now, &mut out);
                }
                if trace_tx.send(out).is_err() {
                    break;
                }
                svc.publish(now, gs.as_ref().and_then(|g| g.node.latest()));
                let due = Instant::now() + dt;
                loop {
                    let wait = due.saturating_duration_since(Instant::now());
                    match svc.rx.recv_timeout(wait) {
                        Ok(req) => {
                            let mut access = UdpGsAccess { gs: &mut gs, now_us: clock.now_us(), out: Vec::new() };
                            svc.answer(req, &mut access);
                            let _ = trace_tx.send(access.out);
                        }
                        Err(RecvTimeoutError::Timeout) => break,
                        Err(RecvTimeoutError::Disconnected) => {
                            thread::sleep(wait);
                            break;
                        }
                    }
                }
            }
        })?);
    }
    drop(trace_tx);

    threads.push(thread::Builder::new().name("trace".into()).spawn(move || {
        let mut sink = TraceSink(trace);
        for batch in trace_rx {
            sink.put(&batch);
        }
        sink.flush();
    })?);
    if let Some(e) = failure.lock().expect("failure poisoned").clone() {
        warn!("udp run started with a failed node: {e}");
    }
    Ok((handle, LiveRun { stop, threads, failure }))
}
