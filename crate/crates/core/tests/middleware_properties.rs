use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmlink_core::middleware::codec::encode_frame;
use swarmlink_core::middleware::sim::{NetworkModel, SimNetwork, SimTransport};
use swarmlink_core::middleware::{Bus, BusEvent, Destination, Envelope, Publisher, QosProfile, TopicName, MAX_RETRANSMITS};
use swarmlink_core::model::NodeId;

const STEP_US: u64 = 10_000;
const W: NodeId = NodeId(1);
const R: NodeId = NodeId(2);

fn topic() -> TopicName {
    TopicName::new("test/stream").unwrap()
}

struct Pair {
    net: Rc<RefCell<SimNetwork>>,
    writer: Bus<SimTransport>,
    reader: Bus<SimTransport>,
}

fn pair(model: NetworkModel) -> Pair {
    let net = SimNetwork::shared(model).unwrap();
    Pair { writer: Bus::new(W, SimTransport::new(W, net.clone())), reader: Bus::new(R, SimTransport::new(R, net.clone())), net }
}

impl Pair {
    fn tick(&mut self, now: u64) {
        self.net.borrow_mut().step_network(now).unwrap();
        self.writer.poll(now);
        self.reader.poll(now);
    }
}

fn model(seed: u64, drop: f64, mean: f64, jitter: f64) -> NetworkModel {
    NetworkModel { seed, latency_mean_ms: mean, latency_jitter_ms: jitter, drop_probability: drop }
}

/// Replays the generator for a single reliable sample over a zero-latency
/// link: each attempt costs one draw pair for the data frame and, when that
/// frame arrives, one more pair for the ack. Returns the retransmit count at
/// the first attempt whose ack gets through, or `None` when it expires.
fn replay_retransmits(seed: u64, drop: f64) -> (Option<u32>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = || {
        let d: f64 = rng.gen();
        let _jitter: f64 = rng.gen();
        d >= drop
    };
    let mut reached = false;
    for attempt in 0..=MAX_RETRANSMITS {
        if pass() {
            reached = true;
            if pass() {
                return (Some(attempt), true);
            }
        }
    }
    (None, reached)
}

struct SingleRun {
    retransmits: u32,
    expired: bool,
    received: Vec<u64>,
}

fn run_single(seed: u64, drop: f64) -> SingleRun {
    let mut p = pair(model(seed, drop, 0.0, 0.0));
    let sub = p.reader.subscribe(topic(), QosProfile::reliable(8));
    let mut received = Vec::new();
    let mut events = Vec::new();
    let mut now = 0;
    p.tick(now);
    p.writer.publish_next(&topic(), QosProfile::reliable(8), b"x".to_vec(), now).unwrap();
    while now < 2_000_000 {
        now += STEP_US;
        p.tick(now);
        received.extend(sub.drain().into_iter().map(|e| e.seq));
        events.extend(p.writer.drain_events());
    }
    SingleRun {
        retransmits: events.iter().filter(|e| matches!(e, BusEvent::Retransmitted { .. })).count() as u32,
        expired: events.iter().any(|e| matches!(e, BusEvent::Expired { .. })),
        received,
    }
}

#[test]
fn retransmit_count_matches_replay_at_drop_0_2() {
    let mut nonzero = 0;
    for seed in [1u64, 2, 3, 5, 8, 13, 21, 34, 55, 89] {
        let (want, reached) = replay_retransmits(seed, 0.2);
        let got = run_single(seed, 0.2);
        assert_eq!(got.expired, want.is_none(), "seed {seed}");
        assert_eq!(got.retransmits, want.unwrap_or(MAX_RETRANSMITS), "seed {seed}");
        assert_eq!(got.received, if reached { vec![1] } else { vec![] }, "seed {seed}");
        nonzero += u32::from(got.retransmits > 0);
    }
    assert!(nonzero > 0, "no seed exercised a retransmit");
}

#[test]
fn best_effort_delivery_matches_replay() {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let want = (0..n)
        .filter(|_| {
            let d: f64 = rng.gen();
            let _: f64 = rng.gen();
            d >= 0.5
        })
        .count() as u64;

    let mut p = pair(model(42, 0.5, 5.0, 0.0));
    let sub = p.reader.subscribe(topic(), QosProfile::best_effort(16));
    let mut got = 0u64;
    let mut now = 0;
    for _ in 0..n {
        p.tick(now);
        p.writer.publish_next(&topic(), QosProfile::best_effort(16), vec![0; 4], now).unwrap();
        got += sub.drain().len() as u64;
        now += STEP_US;
    }
    for _ in 0..10 {
        p.tick(now);
        got += sub.drain().len() as u64;
        now += STEP_US;
    }
    assert_eq!(got, want);
    assert_eq!(p.reader.stats().delivered, want);
    assert!((450..550).contains(&want));
}

#[test]
fn injected_duplicate_surfaces_once() {
    let mut p = pair(model(0, 0.0, 0.0, 0.0));
    let sub = p.reader.subscribe(topic(), QosProfile::reliable(8));
    let frame = |seq| {
        encode_frame(&Envelope {
            topic: topic(),
            publisher: NodeId(9),
            seq,
            timestamp_us: 0,
            qos: QosProfile::reliable(8),
            payload: vec![seq as u8],
        })
        .unwrap()
    };
    for seq in [1, 2, 2, 3] {
        p.net.borrow_mut().send(NodeId(9), Destination::Node(R), &frame(seq), 0);
    }
    p.tick(0);
    assert_eq!(sub.drain().iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(p.reader.stats().duplicates, 1);
}

struct StreamRun {
    received: Vec<u64>,
    expired: BTreeSet<u64>,
    published: u64,
}

fn run_stream(seed: u64, drop: f64, jitter: f64, messages: u64, depth: u16) -> StreamRun {
    let mut p = pair(model(seed, drop, 5.0, jitter));
    let qos = QosProfile::reliable(depth);
    let sub = p.reader.subscribe(topic(), qos);
    let mut received = Vec::new();
    let mut expired = BTreeSet::new();
    let mut published = 0;
    let mut now = 0;
    let mut idle_since = None;
    loop {
        p.tick(now);
        if published < messages && p.writer.publish_next(&topic(), qos, vec![published as u8], now).is_ok() {
            published += 1;
        }
        received.extend(sub.drain().into_iter().map(|e| e.seq));
        for e in p.writer.drain_events() {
            if let BusEvent::Expired { seq, .. } = e {
                expired.insert(seq);
            }
        }
        if published == messages && idle_since.is_none() {
            idle_since = Some(now);
        }
        if idle_since.is_some_and(|t| now > t + 4_000_000) {
            break;
        }
        now += STEP_US;
    }
    StreamRun { received, expired, published }
}

#[test]
fn stream_at_drop_0_3_is_exactly_once_in_order() {
    let r = run_stream(11, 0.3, 2.0, 200, 16);
    assert!(r.expired.is_empty());
    assert_eq!(r.received, (1..=200).collect::<Vec<_>>());
}

#[test]
fn same_seed_same_trace() {
    let a = run_stream(5, 0.4, 3.0, 50, 8);
    let b = run_stream(5, 0.4, 3.0, 50, 8);
    assert_eq!(a.received, b.received);
    assert_eq!(a.expired, b.expired);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retransmits_follow_replay(seed in any::<u64>(), drop in 0.0f64..0.9) {
        let (want, reached) = replay_retransmits(seed, drop);
        let got = run_single(seed, drop);
        prop_assert_eq!(got.retransmits, want.unwrap_or(MAX_RETRANSMITS));
        prop_assert_eq!(got.expired, want.is_none());
        prop_assert_eq!(got.received.len(), usize::from(reached));
    }

    #[test]
    fn reliable_streams_never_duplicate_or_reorder(seed in any::<u64>(), drop in 0.0f64..=0.5, jitter in 0.0f64..5.0, depth in 1u16..32) {
        let r = run_stream(seed, drop, jitter, 60, depth);
        prop_assert_eq!(r.published, 60);
        prop_assert!(r.received.windows(2).all(|w| w[0] < w[1]), "{:?}", r.received);
        let got: BTreeSet<u64> = r.received.iter().copied().collect();
        // anything missing must have exhausted its retransmits
        for seq in 1..=60 {
            prop_assert!(got.contains(&seq) || r.expired.contains(&seq), "seq {seq} lost without expiry");
        }
    }
}
