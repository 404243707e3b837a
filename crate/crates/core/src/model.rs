//! Shared swarm vocabulary: identifiers, poses, roles, formations and the
//! coordinator's snapshot. Everything here is a plain value type.
//!
//! All positions are NED (north, east, down) in metres; altitude above the
//! launch plane is therefore negative `d`. Yaw is in radians, 0 = north,
//! positive clockwise seen from above, kept in (-π, π].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mission::MissionState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
}

/// Identifier of a swarm participant on the bus. `0` is the ground station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub const GROUND_STATION: NodeId = NodeId(0);

    pub fn is_ground_station(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Vehicle identifier, unique within a swarm session. Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct UavId(u16);

impl UavId {
    pub fn new(value: u16) -> Result<Self, ModelError> {
        if value == 0 {
            Err(ModelError::InvalidArgument("uav id 0 is reserved for the ground station".into()))
        } else {
            Ok(UavId(value))
        }
    }

    pub fn get(self) -> u16 {
        self.0
    }

    pub fn node(self) -> NodeId {
        NodeId(self.0)
    }
}

impl TryFrom<u16> for UavId {
    type Error = ModelError;

    fn try_from(value: u16) -> Result<Self, Self::Error> {
        UavId::new(value)
    }
}

impl TryFrom<NodeId> for UavId {
    type Error = ModelError;

    fn try_from(value: NodeId) -> Result<Self, Self::Error> {
        UavId::new(value.0)
    }
}

impl From<UavId> for u16 {
    fn from(id: UavId) -> u16 {
        id.0
    }
}

impl From<UavId> for NodeId {
    fn from(id: UavId) -> NodeId {
        NodeId(id.0)
    }
}

impl fmt::Display for UavId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UavClass {
    Generic,
    Observation,
    Coordinator,
}

/// NED vector in metres (or metres/second). Serialized as `[n, e, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub n: f64,
    pub e: f64,
    pub d: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { n: 0.0, e: 0.0, d: 0.0 };

    pub const fn new(n: f64, e: f64, d: f64) -> Self {
        Vec3 { n, e, d }
    }

    pub fn norm(self) -> f64 {
        (self.n * self.n + self.e * self.e + self.d * self.d).sqrt()
    }

    pub fn horizontal_norm(self) -> f64 {
        self.n.hypot(self.e)
    }

    pub fn is_finite(self) -> bool {
        self.n.is_finite() && self.e.is_finite() && self.d.is_finite()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Rotates the horizontal components by `angle` about the down axis.
    pub fn rotate_z(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3 { n: self.n * c - self.e * s, e: self.n * s + self.e * c, d: self.d }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(v: [f64; 3]) -> Self {
        Vec3 { n: v[0], e: v[1], d: v[2] }
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.n, v.e, v.d]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.n + o.n, self.e + o.e, self.d + o.d)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.n - o.n, self.e - o.e, self.d - o.d)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.n * k, self.e * k, self.d * k)
    }
}

/// Wraps a yaw angle into (-π, π]. `+π` is the canonical boundary value.
pub fn normalize_yaw(yaw: f64) -> Result<f64, ModelError> {
    if !yaw.is_finite() {
        return Err(ModelError::InvalidArgument(format!("yaw must be finite, got {yaw}")));
    }
    Ok(wrap_angle(yaw))
}

/// Infallible variant for angles already known to be finite.
pub(crate) fn wrap_angle(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let mut r = yaw.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r = PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64) -> Result<Self, ModelError> {
        if !position.is_finite() {
            return Err(ModelError::InvalidArgument("pose position must be finite".into()));
        }
        Ok(Pose { position, yaw: normalize_yaw(yaw)? })
    }

    pub fn is_valid(&self) -> bool {
        self.position.is_finite() && self.yaw.is_finite() && self.yaw > -PI && self.yaw <= PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Velocity(pub Vec3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SwarmRole {
    Leader,
    Follower { slot: u32 },
    Unassigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Line,
    Column,
    Wedge,
    Circle,
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Geometry::Line => "line",
            Geometry::Column => "column",
            Geometry::Wedge => "wedge",
            Geometry::Circle => "circle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub geometry: Geometry,
    pub spacing_m: f64,
    #[serde(default)]
    pub altitude_offset_m: f64,
}

impl FormationSpec {
    pub fn new(geometry: Geometry, spacing_m: f64) -> Self {
        FormationSpec { geometry, spacing_m, altitude_offset_m: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.spacing_m.is_finite() && self.spacing_m > 0.0) {
            return Err(ModelError::InvalidArgument(format!("spacing_m must be finite and > 0, got {}", self.spacing_m)));
        }
        if !self.altitude_offset_m.is_finite() {
            return Err(ModelError::InvalidArgument("altitude_offset_m must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberView {
    pub id: UavId,
    pub class: UavClass,
    pub role: SwarmRole,
    pub mission_state: MissionState,
    pub pose: Pose,
    pub last_seen_us: u64,
}

/// The coordinator's authoritative view of the swarm at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmSnapshot {
    pub timestamp_us: u64,
    pub members: Vec<MemberView>,
    pub formation: Option<FormationSpec>,
    pub leader: Option<UavId>,
}

impl SwarmSnapshot {
    pub fn empty(timestamp_us: u64) -> Self {
        SwarmSnapshot { timestamp_us, members: Vec::new(), formation: None, leader: None }
    }

    pub fn member(&self, id: UavId) -> Option<&MemberView> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSnapshot(msg));
        let mut ids = BTreeSet::new();
        let mut slots = BTreeSet::new();
        let mut leaders = Vec::new();
        for m in &self.members {
            if !ids.insert(m.id) {
                return bad(format!("duplicate member id {}", m.id));
            }
            match m.role {
                SwarmRole::Leader => leaders.push(m.id),
                SwarmRole::Follower { slot } => {
                    if slot == 0 {
                        return bad(format!("member {} has follower slot 0", m.id));
                    }
                    if !slots.insert(slot) {
                        return bad(format!("duplicate follower slot {slot}"));
                    }
                }
                SwarmRole::Unassigned => {}
            }
        }
        if leaders.len() > 1 {
            return bad(format!("{} members claim the leader role", leaders.len()));
        }
        if leaders.first().copied() != self.leader {
            return bad(format!(
                "leader field {:?} does not match leader member {:?}",
                self.leader.map(|l| l.get()),
                leaders.first().map(|l| l.get())
            ));
        }
        if let Some(f) = &self.formation {
            f.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_yaw_examples() {
        assert_eq!(normalize_yaw(0.0).unwrap(), 0.0);
        assert!((normalize_yaw(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert!(normalize_yaw(3.0 * PI).unwrap() > 0.0);
        assert_eq!(normalize_yaw(-PI).unwrap(), PI);
        assert_eq!(normalize_yaw(PI).unwrap(), PI);
    }

    #[test]
    fn normalize_yaw_rejects_non_finite() {
        assert!(normalize_yaw(f64::NAN).is_err());
        assert!(normalize_yaw(f64::INFINITY).is_err());
    }

    #[test]
    fn uav_id_zero_is_reserved() {
        assert!(UavId::new(0).is_err());
        assert!(serde_json::from_str::<UavId>("0").is_err());
        assert_eq!(serde_json::from_str::<UavId>("7").unwrap().get(), 7);
    }

    #[test]
    fn canonical_serialization() {
        let spec = FormationSpec::new(Geometry::Wedge, 10.0);
        assert_eq!(serde_json::to_string(&spec).unwrap(), r#"{"geometry":"wedge","spacing_m":10.0,"altitude_offset_m":0.0}"#);
        let role = SwarmRole::Follower { slot: 2 };
        assert_eq!(serde_json::to_string(&role).unwrap(), r#"{"type":"follower","slot":2}"#);
        let pose = Pose { position: Vec3::new(1.0, 2.0, -3.0), yaw: 0.5 };
        assert_eq!(serde_json::to_string(&pose).unwrap(), r#"{"position":[1.0,2.0,-3.0],"yaw":0.5}"#);
    }

    fn member(id: u16, role: SwarmRole) -> MemberView {
        MemberView {
            id: UavId::new(id).unwrap(),
            class: UavClass::Generic,
            role,
            mission_state: MissionState::Hold,
            pose: Pose::default(),
            last_seen_us: 0,
        }
    }

    #[test]
    fn snapshot_rejects_two_leaders() {
        let snap = SwarmSnapshot {
            timestamp_us: 0,
            members: vec![member(1, SwarmRole::Leader), member(2, SwarmRole::Leader)],
            formation: None,
            leader: Some(UavId::new(1).unwrap()),
        };
        assert!(snap.validate().is_err());
    }

    #[test]
    fn snapshot_rejects_duplicate_slots() {
        let snap = SwarmSnapshot {
            timestamp_us: 0,
            members: vec![
                member(1, SwarmRole::Leader),
                member(2, SwarmRole::Follower { slot: 1 }),
                member(3, SwarmRole::Follower { slot: 1 }),
            ],
            formation: None,
            leader: Some(UavId::new(1).unwrap()),
        };
        assert!(snap.validate().is_err());
    }

    #[test]
    fn snapshot_leader_field_must_match() {
        let mut snap = SwarmSnapshot {
            timestamp_us: 0,
            members: vec![member(1, SwarmRole::Leader), member(2, SwarmRole::Follower { slot: 1 })],
            formation: None,
            leader: Some(UavId::new(2).unwrap()),
        };
        assert!(snap.validate().is_err());
        snap.leader = Some(UavId::new(1).unwrap());
        snap.validate().unwrap();
    }

    proptest! {
        #[test]
        fn normalize_yaw_is_idempotent_and_in_range(y in -1.0e6f64..1.0e6) {
            let a = normalize_yaw(y).unwrap();
            prop_assert!(a > -PI && a <= PI);
            prop_assert_eq!(normalize_yaw(a).unwrap(), a);
            let turns = (y - a) / (2.0 * PI);
            prop_assert!((turns - turns.round()).abs() < 1e-6);
        }
    }
}
