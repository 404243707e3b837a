use std::collections::BTreeSet;

use swarmlink_core::mission::MissionState;
use swarmlink_sim::verify::{self, CheckOptions};
use swarmlink_sim::{bundled, run_to_vec, RunSummary, TraceKind, TraceRecord};

const S: u64 = 1_000_000;

fn run(name: &str) -> (Vec<TraceRecord>, RunSummary) {
    run_to_vec(bundled::load(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn window(from_s: u64, until_s: u64) -> CheckOptions {
    CheckOptions { from_us: Some(from_s * S), until_us: Some(until_s * S), ..CheckOptions::default() }
}

fn assert_check(name: &str, trace: &[TraceRecord], opts: &CheckOptions) {
    let r = verify::run_check(name, trace, opts).unwrap();
    assert!(r.passed, "{}: {}\n{}", r.name, r.summary, r.details.join("\n"));
}

#[test]
fn single_uav_takes_off_and_holds() {
    let (trace, summary) = run("takeoff_single");
    let u = &summary.uavs[0];
    assert_eq!(u.mission_state, MissionState::Hold);
    assert!((u.pose.position.d + 10.0).abs() <= 0.5, "{:?}", u.pose);
    assert_eq!(summary.stats.fsm_rejections, 0);
    assert_check("fsm_safety", &trace, &CheckOptions::default());
}

#[test]
fn wedge_transit_holds_slots_after_thirty_seconds() {
    let (trace, summary) = run("wedge_transit");
    assert_check("formation_convergence", &trace, &CheckOptions::default());
    assert_check("fsm_safety", &trace, &CheckOptions::default());
    assert_check("single_writer", &trace, &CheckOptions::default());
    assert_check("reliable_delivery", &trace, &CheckOptions::default());
    // the leader really went north at 4 m/s for most of the run
    let leader = summary.final_snapshot.as_ref().and_then(|s| s.leader).unwrap();
    let lp = summary.uavs.iter().find(|u| u.id == leader).unwrap().pose.position;
    assert!(lp.n > 400.0 && lp.n <= 500.0 + 1e-6, "{lp:?}");
    assert_eq!(summary.stats.fsm_rejections, 0);
}

#[test]
fn line_to_circle_reconverges_within_twenty_seconds() {
    let (trace, summary) = run("reconfigure");
    assert_check("formation_convergence", &trace, &window(80, 120));
    let errors = verify::slot_errors(&trace, 60 * S, 120 * S).unwrap();
    let settled = verify::settle_time(&errors, 0.5).expect("settles");
    assert!(settled <= 80 * S, "settled at {settled}");
    assert!(errors.iter().any(|e| e.2 >= 0.5), "the switch should disturb the slots");
    assert_eq!(summary.stats.fsm_rejections, 0);
    assert!(!trace.iter().any(|r| r.kind == TraceKind::Transition && r.bool("accepted") == Some(false)));
}

#[test]
fn silenced_leader_is_replaced_by_twenty_two_seconds() {
    let (trace, summary) = run("leader_failover");
    let f = verify::failovers(&trace);
    assert_eq!(f.len(), 1, "{f:?}");
    let f = f[0];
    assert_eq!(f.old_leader, 1);
    assert_eq!(f.new_leader, Some(2));
    let elected = f.elected_us.unwrap();
    assert!(elected <= 22 * S, "elected at {elected}");
    assert!(f.first_setpoint_us.unwrap() <= 22 * S);
    assert_check("failover_bound", &trace, &CheckOptions::default());

    let errors = verify::slot_errors(&trace, elected, summary.end_us).unwrap();
    let settled = verify::settle_time(&errors, 0.5).expect("re-converges");
    assert!(settled - elected < 20 * S, "re-converged {} us after election", settled - elected);
    assert_check("fsm_safety", &trace, &CheckOptions::default());
}

#[test]
fn killed_follower_slots_close_within_fifteen_seconds() {
    let (trace, summary) = run("follower_loss");
    let last = summary.final_snapshot.unwrap();
    assert!(last.member(swarmlink_core::model::UavId::new(3).unwrap()).is_none());
    let errors = verify::slot_errors(&trace, 12 * S, summary.end_us).unwrap();
    let settled = verify::settle_time(&errors, 0.5).expect("re-converges");
    assert!(settled < 25 * S, "settled at {settled}");
    assert_check("fsm_safety", &trace, &CheckOptions::default());
}

#[test]
fn lowest_uav_takes_over_coordination() {
    let (trace, _) = run("coordinator_takeover");
    assert_check("coordinator_takeover", &trace, &CheckOptions::default());
    let writers: BTreeSet<u16> = verify::snapshots(&trace).into_iter().filter(|(t, _, _)| *t > 35 * S).map(|(_, w, _)| w).collect();
    assert_eq!(writers, BTreeSet::from([1]));
    assert_check("formation_convergence", &trace, &window(40, 60));
}

#[test]
fn lossy_link_keeps_every_invariant() {
    let (trace, summary) = run("lossy_link");
    assert!(summary.stats.frames_dropped > 100);
    assert_check("fsm_safety", &trace, &CheckOptions::default());
    assert_check("reliable_delivery", &trace, &CheckOptions::default());
    assert_check("single_writer", &trace, &CheckOptions::default());
    assert_check("formation_convergence", &trace, &window(15, 29));
    assert_eq!(summary.stats.fsm_rejections, 0);
    // everyone is back on the ground after land_all
    assert!(summary.uavs.iter().all(|u| u.mission_state == MissionState::Armed), "{:?}", summary.uavs);
}

#[test]
fn trace_time_never_regresses() {
    for name in bundled::names() {
        let (trace, _) = run(name);
        assert!(trace.windows(2).all(|w| w[0].t_us <= w[1].t_us), "{name}");
    }
}
