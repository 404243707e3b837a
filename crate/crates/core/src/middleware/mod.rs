//! Topic-based publish/subscribe bus with two QoS policies.
//!
//! The bus itself is transport agnostic: it speaks the binary frame format
//! from [`codec`] over anything implementing [`Transport`]. Two transports
//! ship with the crate: a seeded, deterministic simulated network
//! ([`sim::SimNetwork`]) and plain UDP datagrams ([`udp::UdpTransport`]).
//!
//! Reliable streams are acknowledged per sequence number by every reader;
//! the writer keeps unacknowledged samples in a bounded retransmit buffer
//! and resends them every [`RETRANSMIT_PERIOD_US`] up to
//! [`MAX_RETRANSMITS`] times. Best-effort streams are fire and forget.

mod bus;
pub mod codec;
pub mod sim;
mod types;
pub mod udp;

pub use bus::{Accepted, Bus, BusEvent, BusStats, Publisher, Subscription};
pub use codec::{decode_frame, encode_ack, encode_frame, Ack, DecodeError, DecodeErrorKind, Frame};
pub use types::{Envelope, QosProfile, Reliability, TopicName};

use thiserror::Error;

use crate::model::NodeId;

/// Largest payload a single envelope may carry.
pub const MAX_PAYLOAD_BYTES: usize = 60 * 1024;
pub const RETRANSMIT_PERIOD_US: u64 = 100_000;
pub const MAX_RETRANSMITS: u32 = 10;
/// A reliable reader stuck on a sequence gap this long skips ahead.
pub const GAP_TIMEOUT_US: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MiddlewareError {
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("invalid qos: {0}")]
    InvalidQos(String),
    #[error("message too large: {size} bytes (max {max})")]
    MessageTooLarge { size: usize, max: usize },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("back-pressure: {pending} unacknowledged samples on {topic}")]
    BackPressure { topic: String, pending: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Broadcast,
    Node(NodeId),
}

/// Moves encoded frames between participants.
pub trait Transport {
    fn send(&mut self, dest: Destination, frame: &[u8], now_us: u64) -> Result<(), MiddlewareError>;

    /// Returns every frame received since the last call, without blocking.
    fn recv(&mut self, now_us: u64) -> Vec<Vec<u8>>;
}
