//! Binary frame layout. All multi-byte fields are big-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic 0x53574D31 ("SWM1")
//!      4     1  version (1)
//!      5     1  flags: bit0 reliable, bit1 ack frame, bits 2-7 zero
//!      6     2  publisher id
//!      8     8  seq
//!     16     8  timestamp_us
//!     24     1  history_depth - 1
//!     25     1  topic length
//!     26     2  payload length
//!     28     -  topic bytes, then payload bytes
//! ```
//!
//! An ack frame carries the acknowledged topic and an 8-byte payload holding
//! the acknowledged sequence number; its publisher field names the reader.

use thiserror::Error;

use super::types::{Envelope, QosProfile, Reliability, TopicName};
use super::{MiddlewareError, MAX_PAYLOAD_BYTES};
use crate::model::NodeId;

pub const MAGIC: u32 = 0x5357_4D31;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;

const FLAG_RELIABLE: u8 = 0b01;
const FLAG_ACK: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    /// The reader sending the acknowledgement.
    pub from: NodeId,
    pub topic: TopicName,
    pub seq: u64,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data(Envelope),
    Ack(Ack),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    BadMagic(u32),
    UnsupportedVersion(u8),
    Truncated { needed: usize, available: usize },
    LengthMismatch { declared: usize, actual: usize },
    ReservedFlags(u8),
    InvalidTopic,
    PayloadTooLarge(usize),
    MalformedAck,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {position}: {kind:?}")]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub position: usize,
}

fn err(kind: DecodeErrorKind, position: usize) -> DecodeError {
    DecodeError { kind, position }
}

#[allow(clippy::too_many_arguments)]
fn put_header(
    out: &mut Vec<u8>,
    flags: u8,
    publisher: NodeId,
    seq: u64,
    timestamp_us: u64,
    depth: u16,
    topic: &TopicName,
    payload_len: usize,
) {
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(flags);
    out.extend_from_slice(&publisher.0.to_be_bytes());
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&timestamp_us.to_be_bytes());
    out.push((depth - 1) as u8);
    out.push(topic.as_str().len() as u8);
    out.extend_from_slice(&(payload_len as u16).to_be_bytes());
    out.extend_from_slice(topic.as_str().as_bytes());
}

pub fn encode_frame(env: &Envelope) -> Result<Vec<u8>, MiddlewareError> {
    env.qos.validate()?;
    if env.payload.len() > MAX_PAYLOAD_BYTES {
        return Err(MiddlewareError::MessageTooLarge { size: env.payload.len(), max: MAX_PAYLOAD_BYTES });
    }
    let flags = if env.qos.is_reliable() { FLAG_RELIABLE } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + env.topic.as_str().len() + env.payload.len());
    put_header(&mut out, flags, env.publisher, env.seq, env.timestamp_us, env.qos.history_depth, &env.topic, env.payload.len());
    out.extend_from_slice(&env.payload);
    Ok(out)
}

pub fn encode_ack(ack: &Ack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ack.topic.as_str().len() + 8);
    put_header(&mut out, FLAG_ACK, ack.from, ack.seq, ack.timestamp_us, 1, &ack.topic, 8);
    out.extend_from_slice(&ack.seq.to_be_bytes());
    out
}

fn be_u16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be_u64(b: &[u8], at: usize) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[at..at + 8]);
    u64::from_be_bytes(a)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, DecodeError> {
    if bytes.len() < 4 {
        return Err(err(DecodeErrorKind::Truncated { needed: HEADER_LEN, available: bytes.len() }, bytes.len()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != MAGIC {
        return Err(err(DecodeErrorKind::BadMagic(magic), 0));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err(DecodeErrorKind::Truncated { needed: HEADER_LEN, available: bytes.len() }, bytes.len()));
    }
    if bytes[4] != VERSION {
        return Err(err(DecodeErrorKind::UnsupportedVersion(bytes[4]), 4));
    }
    let flags = bytes[5];
    if flags & !(FLAG_RELIABLE | FLAG_ACK) != 0 {
        return Err(err(DecodeErrorKind::ReservedFlags(flags), 5));
    }
    let publisher = NodeId(be_u16(bytes, 6));
    let seq = be_u64(bytes, 8);
    let timestamp_us = be_u64(bytes, 16);
    let history_depth = bytes[24] as u16 + 1;
    let topic_len = bytes[25] as usize;
    let payload_len = be_u16(bytes, 26) as usize;

    let declared = HEADER_LEN + topic_len + payload_len;
    if bytes.len() < declared {
        return Err(err(DecodeErrorKind::Truncated { needed: declared, available: bytes.len() }, bytes.len()));
    }
    if bytes.len() > declared {
        return Err(err(DecodeErrorKind::LengthMismatch { declared, actual: bytes.len() }, declared));
    }
    let topic_bytes = &bytes[HEADER_LEN..HEADER_LEN + topic_len];
    let topic = std::str::from_utf8(topic_bytes)
        .ok()
        .and_then(|s| TopicName::new(s).ok())
        .ok_or_else(|| err(DecodeErrorKind::InvalidTopic, HEADER_LEN))?;
    let payload_at = HEADER_LEN + topic_len;
    let payload = &bytes[payload_at..];

    if flags & FLAG_ACK != 0 {
        if payload.len() != 8 || flags & FLAG_RELIABLE != 0 {
            return Err(err(DecodeErrorKind::MalformedAck, payload_at));
        }
        return Ok(Frame::Ack(Ack { from: publisher, topic, seq: be_u64(payload, 0), timestamp_us }));
    }
    if payload.len() > MAX_PAYLOAD_BYTES {
        return Err(err(DecodeErrorKind::PayloadTooLarge(payload.len()), payload_at));
    }
    let reliability = if flags & FLAG_RELIABLE != 0 { Reliability::Reliable } else { Reliability::BestEffort };
    Ok(Frame::Data(Envelope {
        topic,
        publisher,
        seq,
        timestamp_us,
        qos: QosProfile { reliability, history_depth },
        payload: payload.to_vec(),
    }))
}
