//! Payload schemas carried on the well-known topics. All of them travel as
//! JSON text inside an envelope.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::mission::{MissionEvent, MissionState};
use crate::model::{FormationSpec, Pose, UavClass, UavId, Vec3};
use crate::vehicle::{Setpoint, TrackingSetpoint, VehicleState};

/// QoS used on each well-known topic, by publishers and subscribers alike.
pub mod qos {
    use crate::middleware::QosProfile;

    pub const HEARTBEAT: QosProfile = QosProfile::best_effort(8);
    pub const SWARM_STATE: QosProfile = QosProfile::best_effort(1);
    pub const SWARM_EVENTS: QosProfile = QosProfile::reliable(16);
    pub const GCS_CMD: QosProfile = QosProfile::reliable(16);
    pub const UAV_CMD: QosProfile = QosProfile::reliable(16);
    pub const TELEMETRY: QosProfile = QosProfile::best_effort(1);
    pub const GIMBAL_CMD: QosProfile = QosProfile::reliable(4);
    pub const FRAMES: QosProfile = QosProfile::best_effort(1);
    pub const DETECTIONS: QosProfile = QosProfile::best_effort(4);
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("message types always serialize")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// `swarm/heartbeat`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub id: UavId,
    pub class: UavClass,
    pub mission_state: MissionState,
    pub pose: Pose,
    pub seq: u64,
}

/// `uav/<id>/telemetry`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub id: UavId,
    pub t_us: u64,
    pub class: UavClass,
    pub mission_state: MissionState,
    pub state: VehicleState,
}

/// Per-UAV command surface. Superset of the vehicle's offboard commands:
/// the mission-level ones (hold, offboard, rtl) only touch the FSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum UavAction {
    Arm,
    Disarm,
    Takeoff,
    Land,
    Hold,
    Offboard,
    Rtl,
    SetSetpoint { setpoint: Setpoint },
}

/// What actually goes out on `uav/<id>/cmd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeCommand {
    Arm,
    Disarm,
    Takeoff,
    Land,
    Hold,
    Offboard,
    Rtl,
    Setpoint { target: TrackingSetpoint },
}

impl NodeCommand {
    pub fn name(&self) -> &'static str {
        match self {
            NodeCommand::Arm => "arm",
            NodeCommand::Disarm => "disarm",
            NodeCommand::Takeoff => "takeoff",
            NodeCommand::Land => "land",
            NodeCommand::Hold => "hold",
            NodeCommand::Offboard => "offboard",
            NodeCommand::Rtl => "rtl",
            NodeCommand::Setpoint { .. } => "setpoint",
        }
    }

    /// The FSM event this command drives, if any. Setpoints do not move the FSM.
    pub fn mission_event(&self) -> Option<MissionEvent> {
        Some(match self {
            NodeCommand::Arm => MissionEvent::ArmCmd,
            NodeCommand::Disarm => MissionEvent::DisarmCmd,
            NodeCommand::Takeoff => MissionEvent::TakeoffCmd,
            NodeCommand::Land => MissionEvent::LandCmd,
            NodeCommand::Hold => MissionEvent::HoldCmd,
            NodeCommand::Offboard => MissionEvent::EngageOffboard,
            NodeCommand::Rtl => MissionEvent::RtlCmd,
            NodeCommand::Setpoint { .. } => return None,
        })
    }
}

impl From<UavAction> for NodeCommand {
    fn from(a: UavAction) -> Self {
        match a {
            UavAction::Arm => NodeCommand::Arm,
            UavAction::Disarm => NodeCommand::Disarm,
            UavAction::Takeoff => NodeCommand::Takeoff,
            UavAction::Land => NodeCommand::Land,
            UavAction::Hold => NodeCommand::Hold,
            UavAction::Offboard => NodeCommand::Offboard,
            UavAction::Rtl => NodeCommand::Rtl,
            UavAction::SetSetpoint { setpoint } => NodeCommand::Setpoint { target: TrackingSetpoint::fixed(setpoint) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavCommandMsg {
    /// Operator command this was derived from, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<u64>,
    pub command: NodeCommand,
}

/// `uav/<id>/gimbal_cmd`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GimbalCommand {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<u64>,
    pub target: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorCommand {
    ArmAll,
    TakeoffAll,
    EngageOffboardAll,
    RtlAll,
    LandAll,
    SetFormation {
        formation: FormationSpec,
    },
    SetLeader {
        id: UavId,
    },
    LeaderWaypoint {
        setpoint: Setpoint,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        speed_mps: Option<f64>,
    },
    UavCommand {
        id: UavId,
        command: UavAction,
    },
    GimbalPoint {
        id: UavId,
        target: Vec3,
    },
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorCommand::ArmAll => "arm_all",
            OperatorCommand::TakeoffAll => "takeoff_all",
            OperatorCommand::EngageOffboardAll => "engage_offboard_all",
            OperatorCommand::RtlAll => "rtl_all",
            OperatorCommand::LandAll => "land_all",
            OperatorCommand::SetFormation { .. } => "set_formation",
            OperatorCommand::SetLeader { .. } => "set_leader",
            OperatorCommand::LeaderWaypoint { .. } => "leader_waypoint",
            OperatorCommand::UavCommand { .. } => "uav_command",
            OperatorCommand::GimbalPoint { .. } => "gimbal_point",
        }
    }

    /// The UAV this command names, if it names one.
    pub fn target_uav(&self) -> Option<UavId> {
        match self {
            OperatorCommand::SetLeader { id } | OperatorCommand::UavCommand { id, .. } | OperatorCommand::GimbalPoint { id, .. } => {
                Some(*id)
            }
            _ => None,
        }
    }
}

/// `gcs/cmd`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcsCommandMsg {
    pub command_id: u64,
    pub command: OperatorCommand,
}

/// `swarm/events`: things a UAV refused to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavRejection {
    pub id: UavId,
    pub t_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<u64>,
    pub command: String,
    pub state: MissionState,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_command_text_form() {
        let c = OperatorCommand::UavCommand { id: UavId::new(3).unwrap(), command: UavAction::Land };
        assert_eq!(String::from_utf8(encode(&c)).unwrap(), r#"{"type":"uav_command","id":3,"command":{"action":"land"}}"#);
        let back: OperatorCommand = decode(br#"{"type":"set_leader","id":2}"#).unwrap();
        assert_eq!(back, OperatorCommand::SetLeader { id: UavId::new(2).unwrap() });
        assert!(decode::<OperatorCommand>(br#"{"type":"set_leader","id":0}"#).is_err());
    }

    #[test]
    fn action_to_node_command() {
        assert_eq!(NodeCommand::from(UavAction::Rtl), NodeCommand::Rtl);
        assert_eq!(NodeCommand::Rtl.mission_event(), Some(MissionEvent::RtlCmd));
        let sp = Setpoint { position: Vec3::new(1.0, 2.0, -3.0), yaw: 0.0 };
        let nc = NodeCommand::from(UavAction::SetSetpoint { setpoint: sp });
        assert_eq!(nc.mission_event(), None);
        let round: UavCommandMsg = decode(&encode(&UavCommandMsg { command_id: Some(4), command: nc })).unwrap();
        assert_eq!(round.command, nc);
    }
}
