use std::fmt;

use serde::{Deserialize, Serialize};

use super::{MiddlewareError, MAX_PAYLOAD_BYTES};
use crate::model::{NodeId, UavId};

/// Topic name: 1..=255 bytes of `[a-z0-9_/]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Result<Self, MiddlewareError> {
        let name = name.into();
        let ok = !name.is_empty()
            && name.len() <= 255
            && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'/');
        if ok {
            Ok(TopicName(name))
        } else {
            Err(MiddlewareError::InvalidTopic(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn heartbeat() -> Self {
        TopicName("swarm/heartbeat".into())
    }

    pub fn swarm_state() -> Self {
        TopicName("swarm/state".into())
    }

    pub fn swarm_events() -> Self {
        TopicName("swarm/events".into())
    }

    pub fn gcs_cmd() -> Self {
        TopicName("gcs/cmd".into())
    }

    pub fn uav_cmd(id: UavId) -> Self {
        TopicName(format!("uav/{id}/cmd"))
    }

    pub fn uav_telemetry(id: UavId) -> Self {
        TopicName(format!("uav/{id}/telemetry"))
    }

    pub fn uav_gimbal_cmd(id: UavId) -> Self {
        TopicName(format!("uav/{id}/gimbal_cmd"))
    }

    pub fn uav_frames(id: UavId) -> Self {
        TopicName(format!("uav/{id}/frames"))
    }

    pub fn uav_detections(id: UavId) -> Self {
        TopicName(format!("uav/{id}/detections"))
    }
}

impl TryFrom<String> for TopicName {
    type Error = MiddlewareError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TopicName::new(s)
    }
}

impl From<TopicName> for String {
    fn from(t: TopicName) -> String {
        t.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    BestEffort,
    Reliable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QosProfile {
    pub reliability: Reliability,
    pub history_depth: u16,
}

impl QosProfile {
    pub fn new(reliability: Reliability, history_depth: u16) -> Result<Self, MiddlewareError> {
        if !(1..=256).contains(&history_depth) {
            return Err(MiddlewareError::InvalidQos(format!("history_depth {history_depth} outside 1..=256")));
        }
        Ok(QosProfile { reliability, history_depth })
    }

    pub const fn best_effort(history_depth: u16) -> Self {
        QosProfile { reliability: Reliability::BestEffort, history_depth }
    }

    pub const fn reliable(history_depth: u16) -> Self {
        QosProfile { reliability: Reliability::Reliable, history_depth }
    }

    pub fn is_reliable(&self) -> bool {
        self.reliability == Reliability::Reliable
    }

    pub fn validate(&self) -> Result<(), MiddlewareError> {
        QosProfile::new(self.reliability, self.history_depth).map(|_| ())
    }
}

/// The unit that travels over the bus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: TopicName,
    pub publisher: NodeId,
    pub seq: u64,
    pub timestamp_us: u64,
    pub qos: QosProfile,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn validate(&self) -> Result<(), MiddlewareError> {
        self.qos.validate()?;
        if self.payload.len() > MAX_PAYLOAD_BYTES {
            return Err(MiddlewareError::MessageTooLarge { size: self.payload.len(), max: MAX_PAYLOAD_BYTES });
        }
        if self.seq == 0 {
            return Err(MiddlewareError::ProtocolViolation("sequence numbers start at 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topic_charset_and_length() {
        assert!(TopicName::new("swarm/heartbeat").is_ok());
        assert!(TopicName::new("uav/12/cmd").is_ok());
        assert!(TopicName::new("").is_err());
        assert!(TopicName::new("Swarm").is_err());
        assert!(TopicName::new("a-b").is_err());
        assert!(TopicName::new("a".repeat(255)).is_ok());
        assert!(TopicName::new("a".repeat(256)).is_err());
    }

    #[test]
    fn qos_depth_bounds() {
        assert!(QosProfile::new(Reliability::Reliable, 0).is_err());
        assert!(QosProfile::new(Reliability::Reliable, 256).is_ok());
        assert!(QosProfile::new(Reliability::BestEffort, 257).is_err());
    }
}
