//! Per-vehicle mission state machine.
//!
//! The transition function is pure and total over every (state, event)
//! pair: unknown combinations are rejected and leave the state unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionState {
    Init,
    Connected,
    Armed,
    TakingOff,
    Hold,
    Offboard,
    ReturnToLaunch,
    Landing,
    Disarmed,
    Failsafe,
}

impl MissionState {
    pub const ALL: [MissionState; 10] = [
        MissionState::Init,
        MissionState::Connected,
        MissionState::Armed,
        MissionState::TakingOff,
        MissionState::Hold,
        MissionState::Offboard,
        MissionState::ReturnToLaunch,
        MissionState::Landing,
        MissionState::Disarmed,
        MissionState::Failsafe,
    ];

    /// States in which the vehicle is off the ground.
    pub fn is_airborne(self) -> bool {
        matches!(
            self,
            MissionState::TakingOff
                | MissionState::Hold
                | MissionState::Offboard
                | MissionState::ReturnToLaunch
                | MissionState::Landing
                | MissionState::Failsafe
        )
    }

    /// States whose vehicle may be given the leader role.
    pub fn is_leader_eligible(self) -> bool {
        matches!(self, MissionState::Hold | MissionState::Offboard)
    }

    /// States that fly back to the launch point.
    pub fn is_returning(self) -> bool {
        matches!(self, MissionState::ReturnToLaunch | MissionState::Failsafe)
    }
}

impl fmt::Display for MissionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionEvent {
    LinkUp,
    ArmCmd,
    TakeoffCmd,
    TakeoffComplete,
    EngageOffboard,
    HoldCmd,
    RtlCmd,
    LandCmd,
    TouchdownDetected,
    DisarmCmd,
    LinkLost,
    LinkRestored,
}

impl MissionEvent {
    pub const ALL: [MissionEvent; 12] = [
        MissionEvent::LinkUp,
        MissionEvent::ArmCmd,
        MissionEvent::TakeoffCmd,
        MissionEvent::TakeoffComplete,
        MissionEvent::EngageOffboard,
        MissionEvent::HoldCmd,
        MissionEvent::RtlCmd,
        MissionEvent::LandCmd,
        MissionEvent::TouchdownDetected,
        MissionEvent::DisarmCmd,
        MissionEvent::LinkLost,
        MissionEvent::LinkRestored,
    ];
}

impl fmt::Display for MissionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("event {event} rejected in state {state}")]
pub struct Rejection {
    pub state: MissionState,
    pub event: MissionEvent,
}

pub fn fsm_transition(state: MissionState, event: MissionEvent) -> Result<MissionState, Rejection> {
    use MissionEvent as E;
    use MissionState as S;

    let next = match (state, event) {
        (S::Init, E::LinkUp) => S::Connected,
        (S::Connected, E::ArmCmd) => S::Armed,
        (S::Armed, E::TakeoffCmd) => S::TakingOff,
        (S::Armed, E::DisarmCmd) => S::Disarmed,
        (S::TakingOff, E::TakeoffComplete) => S::Hold,
        (S::Hold, E::EngageOffboard) => S::Offboard,
        (S::Hold, E::RtlCmd) => S::ReturnToLaunch,
        (S::Hold, E::LandCmd) => S::Landing,
        (S::Offboard, E::HoldCmd) => S::Hold,
        (S::Offboard, E::RtlCmd) => S::ReturnToLaunch,
        (S::Offboard, E::LandCmd) => S::Landing,
        (S::ReturnToLaunch, E::LandCmd) => S::Landing,
        (S::Landing, E::TouchdownDetected) => S::Armed,
        (S::TakingOff | S::Hold | S::Offboard, E::LinkLost) => S::Failsafe,
        // failsafe flies home like RTL and lands the same way
        (S::Failsafe, E::LandCmd) => S::Landing,
        (S::Failsafe, E::LinkRestored) => S::Hold,
        _ => return Err(Rejection { state, event }),
    };
    Ok(next)
}

/// Stateful wrapper owned by one vehicle.
#[derive(Debug, Clone)]
pub struct MissionFsm {
    state: MissionState,
}

impl Default for MissionFsm {
    fn default() -> Self {
        MissionFsm { state: MissionState::Init }
    }
}

impl MissionFsm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> MissionState {
        self.state
    }

    /// Checks an event without committing it.
    pub fn peek(&self, event: MissionEvent) -> Result<MissionState, Rejection> {
        fsm_transition(self.state, event)
    }

    pub fn apply(&mut self, event: MissionEvent) -> Result<MissionState, Rejection> {
        let next = fsm_transition(self.state, event)?;
        self.state = next;
        Ok(next)
    }
}
