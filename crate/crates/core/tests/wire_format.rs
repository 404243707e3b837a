use proptest::prelude::*;
use swarmlink_core::middleware::codec::{decode_frame, encode_ack, encode_frame, Ack, DecodeErrorKind, Frame, HEADER_LEN};
use swarmlink_core::middleware::{Envelope, QosProfile, Reliability, TopicName, MAX_PAYLOAD_BYTES};
use swarmlink_core::model::NodeId;

fn minimal() -> Envelope {
    Envelope {
        topic: TopicName::new("a").unwrap(),
        publisher: NodeId(1),
        seq: 1,
        timestamp_us: 0,
        qos: QosProfile::best_effort(1),
        payload: Vec::new(),
    }
}

#[test]
fn hand_computed_29_byte_frame() {
    #[rustfmt::skip]
    let expected: [u8; 29] = [
        0x53, 0x57, 0x4D, 0x31, // magic "SWM1"
        0x01,                   // version
        0x00,                   // flags: best effort, data
        0x00, 0x01,             // publisher 1
        0, 0, 0, 0, 0, 0, 0, 1, // seq 1
        0, 0, 0, 0, 0, 0, 0, 0, // timestamp 0
        0x00,                   // depth 1 stored as 0
        0x01,                   // topic length
        0x00, 0x00,             // payload length
        b'a',
    ];
    let bytes = encode_frame(&minimal()).unwrap();
    assert_eq!(bytes, expected);
    assert_eq!(decode_frame(&bytes).unwrap(), Frame::Data(minimal()));
}

#[test]
fn flags_and_depth_fields() {
    let mut e = minimal();
    e.qos = QosProfile::reliable(256);
    e.payload = vec![0xAB; 3];
    let b = encode_frame(&e).unwrap();
    assert_eq!(b[5], 0b01);
    assert_eq!(b[24], 255);
    assert_eq!(&b[26..28], &[0, 3]);
    assert_eq!(b.len(), HEADER_LEN + 1 + 3);
}

#[test]
fn ack_frame_layout() {
    let ack = Ack { from: NodeId(3), topic: TopicName::new("gcs/cmd").unwrap(), seq: 0x0102_0304_0506_0708, timestamp_us: 9 };
    let b = encode_ack(&ack);
    assert_eq!(b[5], 0b10);
    assert_eq!(&b[6..8], &[0, 3]);
    assert_eq!(&b[26..28], &[0, 8]);
    assert_eq!(&b[b.len() - 8..], &[1, 2, 3, 4, 5, 6, 7, 8]);
    assert_eq!(decode_frame(&b).unwrap(), Frame::Ack(ack));
}

#[test]
fn bad_magic() {
    let mut b = encode_frame(&minimal()).unwrap();
    b[..4].copy_from_slice(&[0, 0, 0, 0]);
    let e = decode_frame(&b).unwrap_err();
    assert_eq!(e.kind, DecodeErrorKind::BadMagic(0));
    assert_eq!(e.position, 0);
}

#[test]
fn unsupported_version() {
    let mut b = encode_frame(&minimal()).unwrap();
    b[4] = 2;
    let e = decode_frame(&b).unwrap_err();
    assert_eq!(e.kind, DecodeErrorKind::UnsupportedVersion(2));
    assert_eq!(e.position, 4);
}

#[test]
fn truncated_frames() {
    let b = encode_frame(&minimal()).unwrap();
    let e = decode_frame(&b[..20]).unwrap_err();
    assert_eq!(e.kind, DecodeErrorKind::Truncated { needed: HEADER_LEN, available: 20 });
    assert_eq!(e.position, 20);
    let e = decode_frame(&b[..28]).unwrap_err();
    assert_eq!(e.kind, DecodeErrorKind::Truncated { needed: 29, available: 28 });
}

#[test]
fn length_mismatch() {
    let mut b = encode_frame(&minimal()).unwrap();
    b.push(0);
    let e = decode_frame(&b).unwrap_err();
    assert_eq!(e.kind, DecodeErrorKind::LengthMismatch { declared: 29, actual: 30 });
    assert_eq!(e.position, 29);
}

#[test]
fn oversized_payload_is_refused_at_encode() {
    let mut e = minimal();
    e.payload = vec![0; MAX_PAYLOAD_BYTES + 1];
    assert!(encode_frame(&e).is_err());
    e.payload.pop();
    assert!(encode_frame(&e).is_ok());
}

fn topic() -> impl Strategy<Value = TopicName> {
    "[a-z0-9_/]{1,255}".prop_map(|s| TopicName::new(s).unwrap())
}

fn envelope() -> impl Strategy<Value = Envelope> {
    (topic(), any::<u16>(), any::<u64>(), any::<u64>(), any::<bool>(), 1u16..=256, prop::collection::vec(any::<u8>(), 0..512)).prop_map(
        |(topic, p, seq, ts, rel, depth, payload)| Envelope {
            topic,
            publisher: NodeId(p),
            seq,
            timestamp_us: ts,
            qos: QosProfile { reliability: if rel { Reliability::Reliable } else { Reliability::BestEffort }, history_depth: depth },
            payload,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(e in envelope()) {
        let b = encode_frame(&e).unwrap();
        prop_assert_eq!(b.len(), HEADER_LEN + e.topic.as_str().len() + e.payload.len());
        prop_assert_eq!(decode_frame(&b).unwrap(), Frame::Data(e));
    }
}

proptest! {
    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = decode_frame(&bytes);
    }

    #[test]
    fn every_truncation_is_an_error(e in envelope(), cut in 0usize..1000) {
        let b = encode_frame(&e).unwrap();
        let cut = cut % b.len();
        prop_assert!(decode_frame(&b[..cut]).is_err());
    }
}
