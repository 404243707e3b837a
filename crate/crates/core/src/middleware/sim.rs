//! Seeded, single-threaded network simulator.
//!
//! Every (frame, destination) pair consumes exactly two draws from one
//! ChaCha8 generator, in send order: first a uniform `[0, 1)` drop draw
//! (dropped iff `< drop_probability`), then a uniform `[0, 1)` jitter draw
//! mapped to `[-jitter, +jitter]`. Both draws are taken even when the frame
//! is dropped or the link is partitioned, so the generator's consumption
//! depends only on the send sequence and never on step granularity.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{decode_frame, Frame};
use super::{Destination, MiddlewareError, Transport};
use crate::model::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub latency_mean_ms: f64,
    #[serde(default)]
    pub latency_jitter_ms: f64,
    #[serde(default)]
    pub drop_probability: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel { seed: 0, latency_mean_ms: 0.0, latency_jitter_ms: 0.0, drop_probability: 0.0 }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), MiddlewareError> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.latency_mean_ms) || !finite_nonneg(self.latency_jitter_ms) {
            return Err(MiddlewareError::InvalidArgument("latency values must be finite and >= 0".into()));
        }
        if !(self.drop_probability.is_finite() && (0.0..1.0).contains(&self.drop_probability)) {
            return Err(MiddlewareError::InvalidArgument(format!("drop_probability must be in [0, 1), got {}", self.drop_probability)));
        }
        Ok(())
    }

    /// Turns one pair of generator draws into a delivery decision.
    pub fn decide(&self, drop_draw: f64, jitter_draw: f64) -> Option<u64> {
        if drop_draw < self.drop_probability {
            return None;
        }
        let delay_ms = (self.latency_mean_ms + (2.0 * jitter_draw - 1.0) * self.latency_jitter_ms).max(0.0);
        Some((delay_ms * 1000.0).round() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSummary {
    pub topic: String,
    pub seq: u64,
    pub ack: bool,
}

impl FrameSummary {
    fn of(frame: &[u8]) -> Option<Self> {
        match decode_frame(frame).ok()? {
            Frame::Data(e) => Some(FrameSummary { topic: e.topic.to_string(), seq: e.seq, ack: false }),
            Frame::Ack(a) => Some(FrameSummary { topic: a.topic.to_string(), seq: a.seq, ack: true }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    Dropped { from: NodeId, to: NodeId, partitioned: bool, frame: Option<FrameSummary> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: NodeId,
    pub to: NodeId,
    pub sent_us: u64,
    pub scheduled_us: u64,
    pub frame: Vec<u8>,
}

struct InFlight {
    from: NodeId,
    to: NodeId,
    sent_us: u64,
    frame: Vec<u8>,
}

pub struct SimNetwork {
    model: NetworkModel,
    rng: ChaCha8Rng,
    nodes: BTreeSet<NodeId>,
    partitions: BTreeSet<(NodeId, NodeId)>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: BTreeMap<u64, InFlight>,
    inboxes: BTreeMap<NodeId, Vec<Vec<u8>>>,
    order: u64,
    last_step_us: u64,
    events: Vec<NetEvent>,
    sent_frames: u64,
    dropped_frames: u64,
}

impl SimNetwork {
    pub fn new(model: NetworkModel) -> Result<Self, MiddlewareError> {
        model.validate()?;
        Ok(SimNetwork {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            nodes: BTreeSet::new(),
            partitions: BTreeSet::new(),
            queue: BinaryHeap::new(),
            in_flight: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            order: 0,
            last_step_us: 0,
            events: Vec::new(),
            sent_frames: 0,
            dropped_frames: 0,
        })
    }

    pub fn shared(model: NetworkModel) -> Result<Rc<RefCell<Self>>, MiddlewareError> {
        Ok(Rc::new(RefCell::new(Self::new(model)?)))
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn attach(&mut self, node: NodeId) {
        self.nodes.insert(node);
        self.inboxes.entry(node).or_default();
    }

    /// Removes a node; frames still in flight to it are discarded on arrival.
    pub fn detach(&mut self, node: NodeId) {
        self.nodes.remove(&node);
        self.inboxes.remove(&node);
    }

    pub fn is_attached(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    fn link(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn partition(&mut self, a: NodeId, b: NodeId) {
        self.partitions.insert(Self::link(a, b));
    }

    /// Returns false if the pair was not partitioned.
    pub fn restore(&mut self, a: NodeId, b: NodeId) -> bool {
        self.partitions.remove(&Self::link(a, b))
    }

    pub fn is_partitioned(&self, a: NodeId, b: NodeId) -> bool {
        self.partitions.contains(&Self::link(a, b))
    }

    pub fn sent_frames(&self) -> u64 {
        self.sent_frames
    }

    pub fn dropped_frames(&self) -> u64 {
        self.dropped_frames
    }

    pub fn drain_events(&mut self) -> Vec<NetEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn send(&mut self, from: NodeId, dest: Destination, frame: &[u8], now_us: u64) {
        let targets: Vec<NodeId> = match dest {
            Destination::Broadcast => self.nodes.iter().copied().filter(|&n| n != from).collect(),
            Destination::Node(n) if n != from && self.nodes.contains(&n) => vec![n],
            Destination::Node(_) => Vec::new(),
        };
        for to in targets {
            let drop_draw: f64 = self.rng.gen();
            let jitter_draw: f64 = self.rng.gen();
            self.sent_frames += 1;
            let partitioned = self.is_partitioned(from, to);
            match self.model.decide(drop_draw, jitter_draw) {
                Some(delay_us) if !partitioned => {
                    let key = self.order;
                    self.order += 1;
                    self.queue.push(Reverse((now_us + delay_us, key)));
                    self.in_flight.insert(key, InFlight { from, to, sent_us: now_us, frame: frame.to_vec() });
                }
                _ => {
                    self.dropped_frames += 1;
                    self.events.push(NetEvent::Dropped { from, to, partitioned, frame: FrameSummary::of(frame) });
                }
            }
        }
    }

    /// Moves every frame due at or before `now_us` into its destination inbox.
    pub fn step_network(&mut self, now_us: u64) -> Result<Vec<Delivery>, MiddlewareError> {
        if now_us < self.last_step_us {
            return Err(MiddlewareError::InvalidArgument(format!("time regression: {now_us} < {}", self.last_step_us)));
        }
        self.last_step_us = now_us;
        let mut out = Vec::new();
        while let Some(Reverse((due, key))) = self.queue.peek().copied() {
            if due > now_us {
                break;
            }
            self.queue.pop();
            let f = self.in_flight.remove(&key).expect("in-flight frame");
            if let Some(inbox) = self.inboxes.get_mut(&f.to) {
                inbox.push(f.frame.clone());
                out.push(Delivery { from: f.from, to: f.to, sent_us: f.sent_us, scheduled_us: due, frame: f.frame });
            }
        }
        Ok(out)
    }

    fn take_inbox(&mut self, node: NodeId) -> Vec<Vec<u8>> {
        self.inboxes.get_mut(&node).map(std::mem::take).unwrap_or_default()
    }
}

/// A participant's handle onto a shared [`SimNetwork`].
pub struct SimTransport {
    node: NodeId,
    net: Rc<RefCell<SimNetwork>>,
}

impl SimTransport {
    pub fn new(node: NodeId, net: Rc<RefCell<SimNetwork>>) -> Self {
        net.borrow_mut().attach(node);
        SimTransport { node, net }
    }

    pub fn network(&self) -> &Rc<RefCell<SimNetwork>> {
        &self.net
    }
}

impl Transport for SimTransport {
    fn send(&mut self, dest: Destination, frame: &[u8], now_us: u64) -> Result<(), MiddlewareError> {
        let mut net = self.net.borrow_mut();
        if !net.is_attached(self.node) {
            return Err(MiddlewareError::Transport(format!("node {} is detached", self.node)));
        }
        net.send(self.node, dest, frame, now_us);
        Ok(())
    }

    fn recv(&mut self, _now_us: u64) -> Vec<Vec<u8>> {
        self.net.borrow_mut().take_inbox(self.node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middleware::{encode_frame, Envelope, QosProfile, TopicName};

    fn frame(seq: u64) -> Vec<u8> {
        encode_frame(&Envelope {
            topic: TopicName::new("t").unwrap(),
            publisher: NodeId(1),
            seq,
            timestamp_us: 0,
            qos: QosProfile::best_effort(1),
            payload: vec![],
        })
        .unwrap()
    }

    fn net(model: NetworkModel) -> SimNetwork {
        let mut n = SimNetwork::new(model).unwrap();
        n.attach(NodeId(1));
        n.attach(NodeId(2));
        n
    }

    #[test]
    fn zero_latency_passes_through() {
        let mut n = net(NetworkModel::default());
        n.send(NodeId(1), Destination::Broadcast, &frame(1), 1_000);
        let d = n.step_network(1_000).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to, NodeId(2));
    }

    #[test]
    fn constant_delay() {
        let mut n = net(NetworkModel { latency_mean_ms: 50.0, ..Default::default() });
        n.send(NodeId(1), Destination::Broadcast, &frame(1), 0);
        assert!(n.step_network(49_999).unwrap().is_empty());
        assert_eq!(n.step_network(50_000).unwrap().len(), 1);
    }

    #[test]
    fn time_regression_rejected() {
        let mut n = net(NetworkModel::default());
        n.step_network(10).unwrap();
        assert!(matches!(n.step_network(5), Err(MiddlewareError::InvalidArgument(_))));
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(SimNetwork::new(NetworkModel { drop_probability: 1.0, ..Default::default() }).is_err());
        assert!(SimNetwork::new(NetworkModel { latency_mean_ms: -1.0, ..Default::default() }).is_err());
        assert!(SimNetwork::new(NetworkModel { latency_jitter_ms: f64::NAN, ..Default::default() }).is_err());
    }

    #[test]
    fn partition_drops_both_directions() {
        let mut n = net(NetworkModel::default());
        n.partition(NodeId(2), NodeId(1));
        n.send(NodeId(1), Destination::Broadcast, &frame(1), 0);
        n.send(NodeId(2), Destination::Node(NodeId(1)), &frame(2), 0);
        assert!(n.step_network(0).unwrap().is_empty());
        assert_eq!(n.dropped_frames(), 2);
        assert!(n.restore(NodeId(1), NodeId(2)));
        assert!(!n.restore(NodeId(1), NodeId(2)));
    }

    #[test]
    fn detached_node_gets_nothing() {
        let mut n = net(NetworkModel { latency_mean_ms: 10.0, ..Default::default() });
        n.send(NodeId(1), Destination::Broadcast, &frame(1), 0);
        n.detach(NodeId(2));
        assert!(n.step_network(20_000).unwrap().is_empty());
    }

    #[test]
    fn jitter_reorders_but_stays_in_window() {
        let mut n = net(NetworkModel { seed: 3, latency_mean_ms: 20.0, latency_jitter_ms: 10.0, ..Default::default() });
        for s in 1..=200 {
            n.send(NodeId(1), Destination::Broadcast, &frame(s), 0);
        }
        let d = n.step_network(1_000_000).unwrap();
        assert_eq!(d.len(), 200);
        assert!(d.iter().all(|x| (10_000..=30_000).contains(&x.scheduled_us)));
        assert!(d.windows(2).all(|w| w[0].scheduled_us <= w[1].scheduled_us));
    }
}
