//! Property checkers over recorded traces.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use swarmlink_core::formation::{compute_formation_offsets, follower_setpoint};
use swarmlink_core::middleware::{MAX_RETRANSMITS, RETRANSMIT_PERIOD_US};
use swarmlink_core::mission::{fsm_transition, MissionEvent, MissionState};
use swarmlink_core::model::{Pose, SwarmRole, SwarmSnapshot, Vec3};

use crate::trace::{TraceKind, TraceRecord};

pub const CHECKS: [&str; 6] =
    ["formation_convergence", "failover_bound", "fsm_safety", "single_writer", "reliable_delivery", "coordinator_takeover"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Start of the formation window; default 30 s.
    pub from_us: Option<u64>,
    /// End of the formation window; default end of trace.
    pub until_us: Option<u64>,
    pub tolerance_m: f64,
    pub heartbeat_period_us: u64,
    /// Scheduler tick, for the takeover bound.
    pub tick_us: u64,
    pub failover_bound_us: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            from_us: None,
            until_us: None,
            tolerance_m: 0.5,
            heartbeat_period_us: 500_000,
            tick_us: 100_000,
            failover_bound_us: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub summary: String,
    pub details: Vec<String>,
}

impl CheckReport {
    fn new(name: &str, passed: bool, summary: String, details: Vec<String>) -> Self {
        CheckReport { name: name.to_string(), passed, summary, details }
    }
}

pub fn run_check(name: &str, trace: &[TraceRecord], opts: &CheckOptions) -> Result<CheckReport, String> {
    Ok(match name {
        "formation_convergence" => formation_convergence(trace, opts),
        "failover_bound" => failover_bound(trace, opts),
        "fsm_safety" => fsm_safety(trace),
        "single_writer" => single_writer(trace, opts),
        "reliable_delivery" => reliable_delivery(trace),
        "coordinator_takeover" => coordinator_takeover(trace, opts),
        other => return Err(format!("unknown check {other:?}; known: {}", CHECKS.join(", "))),
    })
}

fn secs(us: u64) -> f64 {
    us as f64 / 1e6
}

fn node_of(r: &TraceRecord, key: &str) -> Option<u16> {
    r.u64(key).and_then(|v| u16::try_from(v).ok())
}

fn parse<T: serde::de::DeserializeOwned>(r: &TraceRecord, key: &str) -> Option<T> {
    r.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Per-time UAV poses from telemetry records.
pub fn telemetry_poses(trace: &[TraceRecord]) -> BTreeMap<u64, BTreeMap<u16, Pose>> {
    let mut out: BTreeMap<u64, BTreeMap<u16, Pose>> = BTreeMap::new();
    for r in trace.iter().filter(|r| r.kind == TraceKind::Telemetry) {
        let (Some(id), Some(pos), Some(yaw)) = (node_of(r, "uav"), parse::<Vec3>(r, "pos"), r.get("yaw").and_then(|v| v.as_f64())) else {
            continue;
        };
        out.entry(r.t_us).or_default().insert(id, Pose { position: pos, yaw });
    }
    out
}

/// Every published snapshot with its time and writer.
pub fn snapshots(trace: &[TraceRecord]) -> Vec<(u64, u16, SwarmSnapshot)> {
    trace
        .iter()
        .filter(|r| r.is(TraceKind::Membership, "snapshot"))
        .filter_map(|r| Some((r.t_us, node_of(r, "writer")?, parse::<SwarmSnapshot>(r, "snapshot")?)))
        .collect()
}

/// Largest slot error per sample time in `[from, until]`, measured against
/// the leader's actual pose at the same instant and the latest snapshot's
/// formation, leader and slots.
pub fn slot_errors(trace: &[TraceRecord], from_us: u64, until_us: u64) -> Result<Vec<(u64, u16, f64)>, String> {
    let poses = telemetry_poses(trace);
    let snaps = snapshots(trace);
    let mut out = Vec::new();
    for (&t, at) in poses.range(from_us..=until_us) {
        let idx = snaps.partition_point(|(ts, _, _)| *ts <= t);
        let Some((_, _, snap)) = idx.checked_sub(1).map(|i| &snaps[i]) else {
            return Err(format!("no snapshot before t={:.1}s", secs(t)));
        };
        let (Some(leader), Some(spec)) = (snap.leader, snap.formation) else {
            return Err(format!("no leader or formation at t={:.1}s", secs(t)));
        };
        let Some(lp) = at.get(&leader.get()) else {
            return Err(format!("no telemetry for leader {leader} at t={:.1}s", secs(t)));
        };
        let followers: Vec<(u16, u32)> = snap
            .members
            .iter()
            .filter_map(|m| match m.role {
                SwarmRole::Follower { slot } => Some((m.id.get(), slot)),
                _ => None,
            })
            .collect();
        let offsets = compute_formation_offsets(&spec, followers.len());
        for (id, slot) in followers {
            let Some(p) = at.get(&id) else {
                return Err(format!("no telemetry for follower {id} at t={:.1}s", secs(t)));
            };
            let Some(off) = offsets.get(slot as usize - 1) else {
                return Err(format!("slot {slot} out of range at t={:.1}s", secs(t)));
            };
            let target = follower_setpoint(lp, off).position;
            out.push((t, id, target.distance(p.position)));
        }
    }
    Ok(out)
}

/// First sample time from which every later error stays under `tol`, or
/// `None` if the last sample is still over.
pub fn settle_time(errors: &[(u64, u16, f64)], tol: f64) -> Option<u64> {
    let last_bad = errors.iter().rposition(|e| e.2 >= tol);
    match last_bad {
        None => errors.first().map(|e| e.0),
        Some(i) => errors[i + 1..].iter().find(|e| e.0 > errors[i].0).map(|e| e.0),
    }
}

fn trace_end(trace: &[TraceRecord]) -> u64 {
    trace.last().map_or(0, |r| r.t_us)
}

pub fn formation_convergence(trace: &[TraceRecord], opts: &CheckOptions) -> CheckReport {
    let name = "formation_convergence";
    let from = opts.from_us.unwrap_or(30_000_000);
    let until = opts.until_us.unwrap_or_else(|| trace_end(trace));
    let errors = match slot_errors(trace, from, until) {
        Ok(e) => e,
        Err(e) => return CheckReport::new(name, false, e, vec![]),
    };
    if errors.is_empty() {
        return CheckReport::new(name, false, format!("no follower samples in [{:.1}s, {:.1}s]", secs(from), secs(until)), vec![]);
    }
    let (wt, wid, worst) = errors.iter().copied().fold((0, 0, f64::MIN), |a, b| if b.2 > a.2 { b } else { a });
    let over: Vec<String> = errors
        .iter()
        .filter(|e| e.2 >= opts.tolerance_m)
        .take(20)
        .map(|(t, id, e)| format!("t={:.1}s uav {id}: {e:.3} m", secs(*t)))
        .collect();
    CheckReport::new(
        name,
        worst < opts.tolerance_m,
        format!(
            "max slot error {worst:.3} m (uav {wid} at t={:.1}s) over {} samples in [{:.1}s, {:.1}s], tolerance {} m",
            secs(wt),
            errors.len(),
            secs(from),
            secs(until),
            opts.tolerance_m
        ),
        over,
    )
}

/// Timing of one leader replacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Failover {
    pub old_leader: u16,
    pub coordinator: u16,
    pub last_heartbeat_us: u64,
    pub lost_us: u64,
    pub elected_us: Option<u64>,
    pub new_leader: Option<u16>,
    pub first_setpoint_us: Option<u64>,
}

pub fn failovers(trace: &[TraceRecord]) -> Vec<Failover> {
    let mut out = Vec::new();
    for (i, r) in trace.iter().enumerate() {
        if !r.is(TraceKind::Membership, "leader_lost") {
            continue;
        }
        let (Some(old), Some(coord)) = (node_of(r, "uav"), node_of(r, "node")) else { continue };
        let last_hb = trace[..i]
            .iter()
            .rev()
            .find(|p| p.is(TraceKind::Network, "publish") && node_of(p, "node") == Some(old) && p.str("topic") == Some("swarm/heartbeat"))
            .map_or(0, |p| p.t_us);
        let elected = trace[i..].iter().find(|e| {
            e.is(TraceKind::Membership, "elected") && node_of(e, "node") == Some(coord) && e.get("leader").is_some_and(|l| !l.is_null())
        });
        let new_leader = elected.and_then(|e| node_of(e, "leader"));
        let first_setpoint = elected.and_then(|e| {
            trace[i..].iter().find(|c| {
                c.t_us >= e.t_us
                    && c.is(TraceKind::Command, "issued")
                    && c.str("command") == Some("setpoint")
                    && node_of(c, "node") == Some(coord)
                    && node_of(c, "to") != new_leader
                    && node_of(c, "to") != Some(old)
            })
        });
        out.push(Failover {
            old_leader: old,
            coordinator: coord,
            last_heartbeat_us: last_hb,
            lost_us: r.t_us,
            elected_us: elected.map(|e| e.t_us),
            new_leader,
            first_setpoint_us: first_setpoint.map(|c| c.t_us),
        });
    }
    out
}

pub fn failover_bound(trace: &[TraceRecord], opts: &CheckOptions) -> CheckReport {
    let name = "failover_bound";
    let all = failovers(trace);
    if all.is_empty() {
        return CheckReport::new(name, false, "no leader loss in trace".into(), vec![]);
    }
    let bound = opts.failover_bound_us;
    let mut passed = true;
    let mut details = Vec::new();
    for f in &all {
        let ok = match (f.elected_us, f.first_setpoint_us) {
            (Some(e), Some(s)) => e.saturating_sub(f.last_heartbeat_us) <= bound && s.saturating_sub(f.last_heartbeat_us) <= bound,
            _ => false,
        };
        passed &= ok;
        details.push(format!(
            "leader {} last heartbeat t={:.1}s, lost t={:.1}s, elected {} at {}, first follower setpoint at {} [{}]",
            f.old_leader,
            secs(f.last_heartbeat_us),
            secs(f.lost_us),
            f.new_leader.map_or("none".into(), |l| l.to_string()),
            f.elected_us.map_or("never".into(), |t| format!("t={:.1}s", secs(t))),
            f.first_setpoint_us.map_or("never".into(), |t| format!("t={:.1}s", secs(t))),
            if ok { "ok" } else { "late" },
        ));
    }
    CheckReport::new(name, passed, format!("{} failover(s), bound {:.1}s from last heartbeat", all.len(), secs(bound)), details)
}

fn state_of(r: &TraceRecord, key: &str) -> Option<MissionState> {
    parse(r, key)
}

pub fn fsm_safety(trace: &[TraceRecord]) -> CheckReport {
    let name = "fsm_safety";
    let mut state: BTreeMap<u16, MissionState> = BTreeMap::new();
    // whether the UAV has left the ground since it was last on it with the motors armed
    let mut flown: BTreeMap<u16, bool> = BTreeMap::new();
    let mut problems = Vec::new();
    let (mut transitions, mut rejections, mut samples) = (0, 0, 0);
    for r in trace {
        match r.kind {
            TraceKind::Transition => {
                let (Some(id), Some(from), Some(ev), Some(accepted)) =
                    (node_of(r, "uav"), state_of(r, "from"), parse::<MissionEvent>(r, "event"), r.bool("accepted"))
                else {
                    problems.push(format!("t={:.1}s malformed transition record", secs(r.t_us)));
                    continue;
                };
                let cur = *state.entry(id).or_insert(MissionState::Init);
                if cur != from {
                    problems.push(format!("t={:.1}s uav {id}: transition from {from} but state was {cur}", secs(r.t_us)));
                }
                match (fsm_transition(from, ev), accepted) {
                    (Ok(expected), true) => {
                        let to = state_of(r, "to");
                        if to != Some(expected) {
                            problems.push(format!("t={:.1}s uav {id}: ({from}, {ev}) went to {to:?}, table says {expected}", secs(r.t_us)));
                        }
                        if expected == MissionState::Disarmed && flown.get(&id).copied().unwrap_or(false) {
                            problems.push(format!("t={:.1}s uav {id}: disarmed after flight without landing", secs(r.t_us)));
                        }
                        if expected.is_airborne() {
                            flown.insert(id, true);
                        }
                        if from == MissionState::Landing && expected == MissionState::Armed {
                            flown.insert(id, false);
                        }
                        state.insert(id, expected);
                        transitions += 1;
                    }
                    (Err(_), false) => rejections += 1,
                    (Ok(_), false) => problems.push(format!("t={:.1}s uav {id}: legal ({from}, {ev}) was rejected", secs(r.t_us))),
                    (Err(_), true) => problems.push(format!("t={:.1}s uav {id}: illegal ({from}, {ev}) was accepted", secs(r.t_us))),
                }
            }
            TraceKind::Telemetry => {
                let Some(id) = node_of(r, "uav") else { continue };
                samples += 1;
                let reported = state_of(r, "state");
                let cur = state.get(&id).copied().unwrap_or(MissionState::Init);
                if reported != Some(cur) {
                    problems.push(format!("t={:.1}s uav {id}: telemetry state {reported:?}, transitions say {cur}", secs(r.t_us)));
                }
                let armed = r.bool("armed").unwrap_or(false);
                let airborne = r.bool("airborne").unwrap_or(false);
                if airborne && !armed {
                    problems.push(format!("t={:.1}s uav {id}: airborne while disarmed", secs(r.t_us)));
                }
                if airborne && !cur.is_airborne() {
                    problems.push(format!("t={:.1}s uav {id}: airborne in ground state {cur}", secs(r.t_us)));
                }
            }
            _ => {}
        }
    }
    let passed = problems.is_empty();
    problems.truncate(20);
    CheckReport::new(
        name,
        passed,
        format!("{transitions} transitions, {rejections} rejected events, {samples} telemetry samples checked against the table"),
        problems,
    )
}

/// Maximal runs of 200 ms bins with more than one snapshot writer.
pub fn writer_overlaps(trace: &[TraceRecord]) -> Vec<(u64, u64, BTreeSet<u16>)> {
    const BIN: u64 = 200_000;
    let mut bins: BTreeMap<u64, BTreeSet<u16>> = BTreeMap::new();
    for (t, w, _) in snapshots(trace) {
        bins.entry(t / BIN).or_default().insert(w);
    }
    let mut runs: Vec<(u64, u64, BTreeSet<u16>)> = Vec::new();
    for (b, ws) in bins.into_iter().filter(|(_, ws)| ws.len() > 1) {
        match runs.last_mut() {
            Some((_, end, all)) if *end == b * BIN => {
                *end = (b + 1) * BIN;
                all.extend(ws);
            }
            _ => runs.push((b * BIN, (b + 1) * BIN, ws)),
        }
    }
    runs
}

pub fn single_writer(trace: &[TraceRecord], opts: &CheckOptions) -> CheckReport {
    let name = "single_writer";
    let snaps = snapshots(trace);
    if snaps.is_empty() {
        return CheckReport::new(name, false, "no snapshots in trace".into(), vec![]);
    }
    let writers: BTreeSet<u16> = snaps.iter().map(|s| s.1).collect();
    let mut passed = true;
    let mut details = Vec::new();
    for (start, end, ws) in writer_overlaps(trace) {
        let fatal = end - start > opts.heartbeat_period_us;
        passed &= !fatal;
        details.push(format!("{} writers {ws:?} in [{:.1}s, {:.1}s)", if fatal { "FAIL" } else { "flagged" }, secs(start), secs(end)));
    }
    CheckReport::new(
        name,
        passed,
        format!("{} snapshots from writers {writers:?}, {} overlap window(s)", snaps.len(), details.len()),
        details,
    )
}

/// Longest a reliable sample can legitimately stay undelivered: every
/// retransmit plus a generous delivery margin.
const IN_FLIGHT_US: u64 = RETRANSMIT_PERIOD_US * (MAX_RETRANSMITS as u64 + 1) + 500_000;

pub fn reliable_delivery(trace: &[TraceRecord]) -> CheckReport {
    let name = "reliable_delivery";
    let killed: BTreeSet<u16> = trace
        .iter()
        .filter(|r| r.is(TraceKind::Membership, "fault") && r.str("fault") == Some("kill_uav"))
        .filter_map(|r| node_of(r, "node"))
        .collect();
    type Stream = (u16, String);
    let mut published: BTreeMap<Stream, Vec<(u64, u64)>> = BTreeMap::new();
    let mut delivered: BTreeMap<(Stream, u16), Vec<u64>> = BTreeMap::new();
    let mut problems = Vec::new();
    let (mut expired, mut retransmits) = (0, 0);
    for r in trace.iter().filter(|r| r.kind == TraceKind::Network) {
        let topic = r.str("topic").unwrap_or_default().to_string();
        match r.str("event") {
            Some("publish") if r.bool("reliable") == Some(true) => {
                if let (Some(n), Some(seq)) = (node_of(r, "node"), r.u64("seq")) {
                    published.entry((n, topic)).or_default().push((seq, r.t_us));
                }
            }
            Some("deliver") if r.bool("reliable") == Some(true) => {
                if let (Some(to), Some(from), Some(seq)) = (node_of(r, "node"), node_of(r, "from"), r.u64("seq")) {
                    delivered.entry(((from, topic), to)).or_default().push(seq);
                }
            }
            Some("gap_skipped") => problems.push(format!("t={:.1}s gap skipped on {topic} at node {:?}", secs(r.t_us), r.u64("node"))),
            Some("expire") => expired += 1,
            Some("retransmit") => retransmits += 1,
            _ => {}
        }
    }
    let end = trace_end(trace);
    let mut checked = 0usize;
    for (((publisher, topic), receiver), got) in &delivered {
        if killed.contains(receiver) || killed.contains(publisher) {
            continue;
        }
        let Some(sent) = published.get(&(*publisher, topic.clone())) else {
            problems.push(format!("node {receiver} got {topic} from {publisher} with no publish record"));
            continue;
        };
        let first = got[0];
        checked += got.len();
        let seen: BTreeSet<u64> = got.iter().copied().collect();
        // samples whose retransmit window is still open at the end of the trace may be in flight
        let missing: Vec<u64> =
            sent.iter().filter(|(s, t)| *s >= first && t + IN_FLIGHT_US <= end && !seen.contains(s)).map(|(s, _)| *s).collect();
        let unknown = seen.iter().filter(|s| !sent.iter().any(|(p, _)| p == *s)).count();
        let dupes = got.len() - seen.len();
        let ordered = got.windows(2).all(|w| w[0] < w[1]);
        if !missing.is_empty() || unknown > 0 || dupes > 0 || !ordered {
            problems.push(format!(
                "{topic} {publisher}->{receiver}: {} delivered, missing {:?}{}, {unknown} unpublished, {dupes} duplicate(s), ordered={ordered}",
                got.len(),
                &missing[..missing.len().min(10)],
                if missing.len() > 10 { " ..." } else { "" },
            ));
        }
    }
    if delivered.is_empty() {
        problems.push("no reliable deliveries in trace".into());
    }
    let passed = problems.is_empty();
    CheckReport::new(
        name,
        passed,
        format!(
            "{checked} reliable deliveries over {} stream/receiver pairs, {retransmits} retransmits, {expired} buffer expiries",
            delivered.len()
        ),
        problems,
    )
}

pub fn coordinator_takeover(trace: &[TraceRecord], opts: &CheckOptions) -> CheckReport {
    let name = "coordinator_takeover";
    let Some(kill) =
        trace.iter().find(|r| r.is(TraceKind::Membership, "fault") && r.str("fault") == Some("kill_uav") && r.u64("node") == Some(0))
    else {
        return CheckReport::new(name, false, "ground station is never killed in this trace".into(), vec![]);
    };
    let Some(assumed) = trace.iter().find(|r| r.t_us >= kill.t_us && r.is(TraceKind::Membership, "coordinator_assumed")) else {
        return CheckReport::new(name, false, format!("no takeover after the kill at t={:.1}s", secs(kill.t_us)), vec![]);
    };
    let who = node_of(assumed, "node").unwrap_or(0);
    let delay = assumed.t_us - kill.t_us;
    let bound = 4 * opts.heartbeat_period_us + opts.tick_us;
    let alive: BTreeSet<u16> =
        trace.iter().filter(|r| r.t_us == assumed.t_us && r.kind == TraceKind::Telemetry).filter_map(|r| node_of(r, "uav")).collect();
    let lowest = alive.first().copied();
    let race_end = assumed.t_us + opts.heartbeat_period_us;
    let later: BTreeSet<u16> = snapshots(trace).into_iter().filter(|s| s.0 > race_end).map(|s| s.1).collect();
    let mut details = vec![
        format!("ground station killed at t={:.1}s", secs(kill.t_us)),
        format!("uav {who} assumed coordination at t={:.1}s ({:.1}s later, bound {:.1}s)", secs(assumed.t_us), secs(delay), secs(bound)),
        format!("lowest live uav {lowest:?}; snapshot writers after t={:.1}s: {later:?}", secs(race_end)),
    ];
    let passed = delay <= bound && Some(who) == lowest && later.len() == 1 && later.contains(&who);
    if !passed {
        details.push("takeover requirements not met".into());
    }
    CheckReport::new(name, passed, format!("takeover by uav {who} after {:.1}s", secs(delay)), details)
}
