use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use swarmlink_core::mission::{fsm_transition, MissionEvent as E, MissionFsm, MissionState as S};

/// The accepted edges, written out independently of the implementation.
const TABLE: &[(S, E, S)] = &[
    (S::Init, E::LinkUp, S::Connected),
    (S::Connected, E::ArmCmd, S::Armed),
    (S::Armed, E::TakeoffCmd, S::TakingOff),
    (S::Armed, E::DisarmCmd, S::Disarmed),
    (S::TakingOff, E::TakeoffComplete, S::Hold),
    (S::Hold, E::EngageOffboard, S::Offboard),
    (S::Hold, E::RtlCmd, S::ReturnToLaunch),
    (S::Hold, E::LandCmd, S::Landing),
    (S::Offboard, E::HoldCmd, S::Hold),
    (S::Offboard, E::RtlCmd, S::ReturnToLaunch),
    (S::Offboard, E::LandCmd, S::Landing),
    (S::ReturnToLaunch, E::LandCmd, S::Landing),
    (S::Landing, E::TouchdownDetected, S::Armed),
    (S::TakingOff, E::LinkLost, S::Failsafe),
    (S::Hold, E::LinkLost, S::Failsafe),
    (S::Offboard, E::LinkLost, S::Failsafe),
    (S::Failsafe, E::LandCmd, S::Landing),
    (S::Failsafe, E::LinkRestored, S::Hold),
];

fn oracle(s: S, e: E) -> Option<S> {
    TABLE.iter().find(|(a, b, _)| *a == s && *b == e).map(|t| t.2)
}

#[test]
fn exhaustive_enumeration_matches_table() {
    let mut accepted = 0;
    let mut pairs = 0;
    for s in S::ALL {
        for e in E::ALL {
            pairs += 1;
            match (fsm_transition(s, e), oracle(s, e)) {
                (Ok(got), Some(want)) => {
                    assert_eq!(got, want, "({s}, {e})");
                    accepted += 1;
                }
                (Err(r), None) => assert_eq!((r.state, r.event), (s, e)),
                (got, want) => panic!("({s}, {e}): implementation {got:?}, table {want:?}"),
            }
        }
    }
    assert_eq!(pairs, 120);
    assert_eq!(accepted, TABLE.len());
}

fn successors(s: S) -> impl Iterator<Item = S> {
    E::ALL.into_iter().filter_map(move |e| fsm_transition(s, e).ok())
}

/// States reachable from `from` without ever entering `avoid`.
fn reachable_avoiding(from: S, avoid: S) -> BTreeSet<S> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(s) = queue.pop_front() {
        for n in successors(s) {
            if n != avoid && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    seen
}

#[test]
fn no_airborne_path_to_disarmed_bypasses_landing() {
    for start in [S::TakingOff, S::Hold, S::Offboard, S::ReturnToLaunch, S::Failsafe] {
        let r = reachable_avoiding(start, S::Landing);
        assert!(!r.contains(&S::Disarmed), "{start} reaches disarmed without landing: {r:?}");
        assert!(!r.contains(&S::Armed), "{start} reaches armed without landing");
        assert!(reachable_avoiding(start, S::Armed).iter().all(|&s| s != S::Disarmed));
    }
}

#[test]
fn every_disarmed_path_from_the_air_goes_landing_then_armed() {
    // every edge into Disarmed starts at Armed, and the only edge into Armed
    // from the air starts at Landing
    for s in S::ALL {
        for e in E::ALL {
            match fsm_transition(s, e) {
                Ok(S::Disarmed) => assert_eq!(s, S::Armed),
                Ok(S::Armed) => assert!(matches!(s, S::Connected | S::Landing), "{s}"),
                _ => {}
            }
        }
    }
}

#[test]
fn link_loss_is_caught_in_the_flying_states() {
    for s in [S::TakingOff, S::Hold, S::Offboard] {
        assert_eq!(fsm_transition(s, E::LinkLost), Ok(S::Failsafe));
    }
    assert_eq!(fsm_transition(S::Failsafe, E::LinkRestored), Ok(S::Hold));
}

#[test]
fn examples() {
    assert_eq!(fsm_transition(S::Hold, E::EngageOffboard), Ok(S::Offboard));
    assert!(fsm_transition(S::Offboard, E::DisarmCmd).is_err());
    assert_eq!(fsm_transition(S::Offboard, E::LinkLost), Ok(S::Failsafe));
}

proptest! {
    #[test]
    fn wrapper_follows_table(events in prop::collection::vec(prop::sample::select(E::ALL.to_vec()), 0..64)) {
        let mut fsm = MissionFsm::new();
        let mut model = S::Init;
        for e in events {
            let before = fsm.state();
            let r = fsm.apply(e);
            match oracle(model, e) {
                Some(next) => {
                    prop_assert_eq!(r, Ok(next));
                    model = next;
                }
                None => {
                    prop_assert!(r.is_err());
                    prop_assert_eq!(fsm.state(), before);
                }
            }
            prop_assert_eq!(fsm.state(), model);
        }
    }
}
