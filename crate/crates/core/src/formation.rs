//! Leader-follower formation geometry.
//!
//! Offsets live in the leader's body frame (x forward, y right, z down).
//! Slots alternate left/right, odd slots on the left, so a formation grows
//! symmetrically as members join.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FormationSpec, Geometry, Pose, UavId, Vec3};
use crate::vehicle::Setpoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormationError {
    #[error("leader {0} is not among the members")]
    LeaderNotMember(UavId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BodyOffset(pub Vec3);

impl BodyOffset {
    pub fn new(forward: f64, right: f64, down: f64) -> Self {
        BodyOffset(Vec3::new(forward, right, down))
    }
}

/// Body-frame offsets for slots `1..=n_followers`, at index `slot - 1`.
pub fn compute_formation_offsets(spec: &FormationSpec, n_followers: usize) -> Vec<BodyOffset> {
    let d = spec.spacing_m;
    let z = spec.altitude_offset_m;
    (1..=n_followers)
        .map(|i| {
            let k = i.div_ceil(2) as f64;
            let side = if i % 2 == 1 { -1.0 } else { 1.0 };
            match spec.geometry {
                Geometry::Line => BodyOffset::new(0.0, side * k * d, z),
                Geometry::Column => BodyOffset::new(-(i as f64) * d, 0.0, z),
                Geometry::Wedge => BodyOffset::new(-k * d, side * k * d, z),
                Geometry::Circle => {
                    let a = 2.0 * PI * (i - 1) as f64 / n_followers as f64;
                    BodyOffset::new(d * a.cos(), d * a.sin(), z)
                }
            }
        })
        .collect()
}

/// World-frame setpoint for a follower holding `offset` relative to the leader.
pub fn follower_setpoint(leader: &Pose, offset: &BodyOffset) -> Setpoint {
    Setpoint { position: leader.position + offset.0.rotate_z(leader.yaw), yaw: leader.yaw }
}

/// Followers sorted by id get slots 1..=n.
pub fn assign_slots(member_ids: &[UavId], leader: UavId) -> Result<BTreeMap<UavId, u32>, FormationError> {
    if !member_ids.contains(&leader) {
        return Err(FormationError::LeaderNotMember(leader));
    }
    let mut followers: Vec<UavId> = member_ids.iter().copied().filter(|&id| id != leader).collect();
    followers.sort_unstable();
    followers.dedup();
    Ok(followers.into_iter().zip(1u32..).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u16]) -> Vec<UavId> {
        v.iter().map(|&i| UavId::new(i).unwrap()).collect()
    }

    fn assert_offsets(got: &[BodyOffset], want: &[(f64, f64, f64)]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g.0.n - w.0).abs() < 1e-9 && (g.0.e - w.1).abs() < 1e-9 && (g.0.d - w.2).abs() < 1e-9, "{g:?} != {w:?}");
        }
    }

    #[test]
    fn offset_examples() {
        let line = FormationSpec::new(Geometry::Line, 10.0);
        assert_offsets(&compute_formation_offsets(&line, 2), &[(0.0, -10.0, 0.0), (0.0, 10.0, 0.0)]);
        let wedge = FormationSpec::new(Geometry::Wedge, 10.0);
        assert_offsets(
            &compute_formation_offsets(&wedge, 4),
            &[(-10.0, -10.0, 0.0), (-10.0, 10.0, 0.0), (-20.0, -20.0, 0.0), (-20.0, 20.0, 0.0)],
        );
        let circle = FormationSpec::new(Geometry::Circle, 10.0);
        assert_offsets(&compute_formation_offsets(&circle, 4), &[(10.0, 0.0, 0.0), (0.0, 10.0, 0.0), (-10.0, 0.0, 0.0), (0.0, -10.0, 0.0)]);
        let column = FormationSpec { geometry: Geometry::Column, spacing_m: 5.0, altitude_offset_m: -2.0 };
        assert_offsets(&compute_formation_offsets(&column, 2), &[(-5.0, 0.0, -2.0), (-10.0, 0.0, -2.0)]);
        assert!(compute_formation_offsets(&circle, 0).is_empty());
    }

    #[test]
    fn follower_setpoint_examples() {
        let o = BodyOffset::new(0.0, -10.0, 0.0);
        let sp = follower_setpoint(&Pose { position: Vec3::new(100.0, 50.0, -20.0), yaw: 0.0 }, &o);
        assert_eq!(sp.position, Vec3::new(100.0, 40.0, -20.0));
        let sp = follower_setpoint(&Pose { position: Vec3::new(100.0, 50.0, -20.0), yaw: PI / 2.0 }, &o);
        assert!(sp.position.distance(Vec3::new(110.0, 50.0, -20.0)) < 1e-9);
        assert_eq!(sp.yaw, PI / 2.0);
        let sp = follower_setpoint(&Pose { position: Vec3::new(0.0, 0.0, -20.0), yaw: PI }, &BodyOffset::new(-10.0, 0.0, 0.0));
        assert!(sp.position.distance(Vec3::new(10.0, 0.0, -20.0)) < 1e-9);
        assert_eq!(sp.yaw, PI);
    }

    #[test]
    fn slot_examples() {
        let s = assign_slots(&ids(&[3, 1, 7]), UavId::new(1).unwrap()).unwrap();
        assert_eq!(s, BTreeMap::from([(UavId::new(3).unwrap(), 1), (UavId::new(7).unwrap(), 2)]));
        assert!(assign_slots(&ids(&[5]), UavId::new(5).unwrap()).unwrap().is_empty());
        let s = assign_slots(&ids(&[2, 4, 6, 8]), UavId::new(6).unwrap()).unwrap();
        assert_eq!(s.values().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(s.keys().map(|k| k.get()).collect::<Vec<_>>(), vec![2, 4, 8]);
        assert!(assign_slots(&ids(&[2, 4]), UavId::new(9).unwrap()).is_err());
    }

    // brute force over offsets plus the leader at the origin
    fn min_pairwise(offsets: &[BodyOffset]) -> f64 {
        let mut pts: Vec<Vec3> = offsets.iter().map(|o| o.0).collect();
        pts.push(Vec3::new(0.0, 0.0, 0.0));
        let mut best = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let dx = pts[i].n - pts[j].n;
                let dy = pts[i].e - pts[j].e;
                let dz = pts[i].d - pts[j].d;
                best = best.min((dx * dx + dy * dy + dz * dz).sqrt());
            }
        }
        best
    }

    #[test]
    fn spacing_respected_up_to_sixteen() {
        for geometry in [Geometry::Line, Geometry::Column, Geometry::Wedge] {
            for n in 1..=16 {
                for d in [0.5, 5.0, 10.0, 37.5] {
                    let got = min_pairwise(&compute_formation_offsets(&FormationSpec::new(geometry, d), n));
                    assert!(got >= d - 1e-9, "{geometry} n={n} d={d}: {got}");
                }
            }
        }
        assert!(min_pairwise(&compute_formation_offsets(&FormationSpec::new(Geometry::Wedge, 5.0), 8)) >= 5.0 - 1e-9);
    }

    #[test]
    fn circle_members_sit_on_the_radius() {
        for n in 1..=16 {
            let offs = compute_formation_offsets(&FormationSpec::new(Geometry::Circle, 12.0), n);
            for o in &offs {
                assert!((o.0.norm() - 12.0).abs() < 1e-9);
            }
            if n >= 2 {
                // neighbouring chord 2r·sin(π/n)
                let chord = 2.0 * 12.0 * (PI / n as f64).sin();
                let got = min_pairwise(&offs).min(12.0);
                assert!((got - chord.min(12.0)).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn followers_converge_behind_a_moving_leader() {
        use crate::model::Velocity;
        use crate::vehicle::{step_vehicle, VehicleParams, VehicleState};
        let params = VehicleParams::default();
        let leader_speed = 0.6 * params.max_horizontal_speed_mps;
        let offsets = compute_formation_offsets(&FormationSpec::new(Geometry::Wedge, 10.0), 4);
        let mut followers: Vec<VehicleState> = (0..4)
            .map(|i| VehicleState {
                pose: Pose { position: Vec3::new(-5.0 * i as f64, 3.0 * i as f64, -10.0), yaw: 0.0 },
                velocity: Velocity(Vec3::new(0.0, 0.0, 0.0)),
                armed: true,
                airborne: true,
            })
            .collect();
        let dt = 0.1;
        for k in 0..600 {
            let t = k as f64 * dt;
            let leader = Pose { position: Vec3::new(leader_speed * t, 0.0, -10.0), yaw: 0.0 };
            let mut worst: f64 = 0.0;
            for (f, o) in followers.iter_mut().zip(&offsets) {
                let sp = follower_setpoint(&leader, o);
                worst = worst.max(f.pose.position.distance(sp.position));
                let ahead = Pose { position: leader.position + Vec3::new(leader_speed * dt, 0.0, 0.0), yaw: 0.0 };
                *f = step_vehicle(f, Some(&follower_setpoint(&ahead, o)), &params, dt).unwrap();
            }
            if t > 20.0 {
                assert!(worst < 0.5, "t={t}: {worst}");
            }
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-1e3f64..1e3, -1e3f64..1e3, -200.0f64..0.0, -PI..PI).prop_map(|(n, e, d, y)| Pose { position: Vec3::new(n, e, d), yaw: y })
    }

    proptest! {
        #[test]
        fn rotation_is_an_isometry(leader in arb_pose(), x in -50.0f64..50.0, y in -50.0f64..50.0, z in -10.0f64..10.0) {
            let o = BodyOffset::new(x, y, z);
            let sp = follower_setpoint(&leader, &o);
            prop_assert!((sp.position.distance(leader.position) - o.0.norm()).abs() < 1e-9);
        }

        #[test]
        fn yawing_the_leader_rotates_the_formation(leader in arb_pose(), delta in -PI..PI, x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let o = BodyOffset::new(x, y, 0.0);
            let before = follower_setpoint(&leader, &o).position - leader.position;
            let turned = Pose { position: leader.position, yaw: leader.yaw + delta };
            let after = follower_setpoint(&turned, &o).position - leader.position;
            prop_assert!(after.distance(before.rotate_z(delta)) < 1e-9);
        }

        #[test]
        fn slots_ignore_input_order(v in proptest::collection::btree_set(1u16..500, 1..20), seed in any::<u64>()) {
            let list: Vec<UavId> = v.iter().map(|&i| UavId::new(i).unwrap()).collect();
            let leader = list[(seed as usize) % list.len()];
            let mut shuffled = list.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(assign_slots(&list, leader).unwrap(), assign_slots(&shuffled, leader).unwrap());
        }

        #[test]
        fn offsets_are_pure(n in 0usize..16, d in 0.5f64..50.0, g in 0u8..4) {
            let geometry = [Geometry::Line, Geometry::Column, Geometry::Wedge, Geometry::Circle][g as usize];
            let spec = FormationSpec::new(geometry, d);
            prop_assert_eq!(compute_formation_offsets(&spec, n), compute_formation_offsets(&spec, n));
        }
    }
}
