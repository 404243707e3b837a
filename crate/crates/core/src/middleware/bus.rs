use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};

use super::codec::{decode_frame, encode_ack, encode_frame, Ack, Frame};
use super::types::{Envelope, QosProfile, TopicName};
use super::{Destination, MiddlewareError, Transport, GAP_TIMEOUT_US, MAX_RETRANSMITS, RETRANSMIT_PERIOD_US};
use crate::model::NodeId;

/// Something happened on the bus that a trace may want to record.
#[derive(Debug, Clone, PartialEq)]
pub enum BusEvent {
    Published {
        topic: TopicName,
        seq: u64,
        reliable: bool,
        payload_len: usize,
    },
    Retransmitted {
        topic: TopicName,
        seq: u64,
        attempt: u32,
    },
    /// A reliable sample was dropped from the retransmit buffer without a full set of acks.
    Expired {
        topic: TopicName,
        seq: u64,
    },
    Delivered {
        from: NodeId,
        topic: TopicName,
        seq: u64,
        reliable: bool,
        sent_us: u64,
    },
    Duplicate {
        from: NodeId,
        topic: TopicName,
        seq: u64,
    },
    GapSkipped {
        from: NodeId,
        topic: TopicName,
        missing_from: u64,
        resume_at: u64,
    },
    DecodeFailed {
        error: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusStats {
    pub published: u64,
    pub retransmitted: u64,
    pub expired: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub acks_sent: u64,
    pub acks_received: u64,
    pub decode_errors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accepted {
    pub seq: u64,
    /// Number of samples held in the stream's retransmit buffer after this publish.
    pub retained: usize,
}

/// Anything that can put a sample on a topic with the next sequence number.
pub trait Publisher {
    fn publish_next(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError>;
}

struct SubQueue {
    topic: TopicName,
    qos: QosProfile,
    queue: Mutex<VecDeque<Envelope>>,
    ready: Condvar,
}

/// Receiving end of a subscription. Cloning shares the same queue.
///
/// Best-effort samples are kept last-`history_depth` per publisher; reliable
/// samples are never dropped by the queue.
#[derive(Clone)]
pub struct Subscription {
    inner: Arc<SubQueue>,
}

impl Subscription {
    fn new(topic: TopicName, qos: QosProfile) -> Self {
        Subscription { inner: Arc::new(SubQueue { topic, qos, queue: Mutex::new(VecDeque::new()), ready: Condvar::new() }) }
    }

    pub fn topic(&self) -> &TopicName {
        &self.inner.topic
    }

    pub fn qos(&self) -> QosProfile {
        self.inner.qos
    }

    fn push(&self, env: Envelope) {
        let mut q = self.inner.queue.lock().expect("subscription queue poisoned");
        if !env.qos.is_reliable() {
            let depth = self.inner.qos.history_depth as usize;
            let same = q.iter().filter(|e| e.publisher == env.publisher && !e.qos.is_reliable()).count();
            if same >= depth {
                if let Some(pos) = q.iter().position(|e| e.publisher == env.publisher && !e.qos.is_reliable()) {
                    q.remove(pos);
                }
            }
        }
        q.push_back(env);
        self.inner.ready.notify_all();
    }

    pub fn try_recv(&self) -> Option<Envelope> {
        self.inner.queue.lock().expect("subscription queue poisoned").pop_front()
    }

    pub fn drain(&self) -> Vec<Envelope> {
        self.inner.queue.lock().expect("subscription queue poisoned").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.queue.lock().expect("subscription queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blocks the calling thread until a sample arrives or the timeout elapses.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        let q = self.inner.queue.lock().expect("subscription queue poisoned");
        let (mut q, _) = self.inner.ready.wait_timeout_while(q, timeout, |q| q.is_empty()).expect("subscription queue poisoned");
        q.pop_front()
    }
}

struct Pending {
    env: Envelope,
    frame: Vec<u8>,
    acked_by: BTreeSet<NodeId>,
    delivered_locally: bool,
    retransmits: u32,
    next_retransmit_us: u64,
}

struct WriterStream {
    last_seq: u64,
    pending: VecDeque<Pending>,
    /// Remote readers learned from their acknowledgements.
    readers: BTreeSet<NodeId>,
}

impl WriterStream {
    fn is_complete(&self, p: &Pending) -> bool {
        if self.readers.is_empty() {
            p.delivered_locally || !p.acked_by.is_empty()
        } else {
            self.readers.is_subset(&p.acked_by)
        }
    }
}

#[derive(Default)]
struct ReaderStream {
    watermark: u64,
    held: BTreeMap<u64, Envelope>,
    gap_since_us: Option<u64>,
}

/// One participant's view of the bus.
pub struct Bus<T: Transport> {
    node: NodeId,
    transport: T,
    writers: BTreeMap<TopicName, WriterStream>,
    readers: BTreeMap<(NodeId, TopicName), ReaderStream>,
    subscriptions: Vec<Subscription>,
    events: Vec<BusEvent>,
    stats: BusStats,
}

impl<T: Transport> Bus<T> {
    pub fn new(node: NodeId, transport: T) -> Self {
        Bus {
            node,
            transport,
            writers: BTreeMap::new(),
            readers: BTreeMap::new(),
            subscriptions: Vec::new(),
            events: Vec::new(),
            stats: BusStats::default(),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    pub fn drain_events(&mut self) -> Vec<BusEvent> {
        std::mem::take(&mut self.events)
    }

    /// Unacknowledged samples currently held for `topic`.
    pub fn retained(&self, topic: &TopicName) -> usize {
        self.writers.get(topic).map_or(0, |w| w.pending.len())
    }

    pub fn last_seq(&self, topic: &TopicName) -> u64 {
        self.writers.get(topic).map_or(0, |w| w.last_seq)
    }

    pub fn subscribe(&mut self, topic: TopicName, qos: QosProfile) -> Subscription {
        let sub = Subscription::new(topic, qos);
        self.subscriptions.push(sub.clone());
        sub
    }

    /// Drops every subscription on `topic` held by this participant.
    pub fn unsubscribe(&mut self, topic: &TopicName) {
        self.subscriptions.retain(|s| s.topic() != topic);
    }

    pub fn is_subscribed(&self, topic: &TopicName) -> bool {
        self.subscriptions.iter().any(|s| s.topic() == topic)
    }

    pub fn publish(&mut self, env: Envelope, now_us: u64) -> Result<Accepted, MiddlewareError> {
        env.validate()?;
        if env.publisher != self.node {
            return Err(MiddlewareError::ProtocolViolation(format!("participant {} cannot publish as {}", self.node, env.publisher)));
        }
        let writer = self.writers.entry(env.topic.clone()).or_insert_with(|| WriterStream {
            last_seq: 0,
            pending: VecDeque::new(),
            readers: BTreeSet::new(),
        });
        if env.seq != writer.last_seq + 1 {
            return Err(MiddlewareError::ProtocolViolation(format!(
                "seq {} on {} does not follow {}",
                env.seq, env.topic, writer.last_seq
            )));
        }
        let reliable = env.qos.is_reliable();
        if reliable && writer.pending.len() >= env.qos.history_depth as usize {
            return Err(MiddlewareError::BackPressure { topic: env.topic.to_string(), pending: writer.pending.len() });
        }
        let frame = encode_frame(&env)?;
        writer.last_seq = env.seq;
        self.transport.send(Destination::Broadcast, &frame, now_us)?;
        self.stats.published += 1;
        self.events.push(BusEvent::Published { topic: env.topic.clone(), seq: env.seq, reliable, payload_len: env.payload.len() });

        let delivered_locally = self.has_local_reader(&env.topic);
        if delivered_locally {
            self.receive_data(env.clone(), now_us);
        }

        let writer = self.writers.get_mut(&env.topic).expect("writer exists");
        if reliable {
            let seq = env.seq;
            let p = Pending {
                env,
                frame,
                acked_by: BTreeSet::new(),
                delivered_locally,
                retransmits: 0,
                next_retransmit_us: now_us + RETRANSMIT_PERIOD_US,
            };
            if !writer.is_complete(&p) {
                writer.pending.push_back(p);
            }
            return Ok(Accepted { seq, retained: writer.pending.len() });
        }
        Ok(Accepted { seq: env.seq, retained: 0 })
    }

    fn has_local_reader(&self, topic: &TopicName) -> bool {
        self.subscriptions.iter().any(|s| s.topic() == topic)
    }

    /// Processes received frames, retransmits and stalled gaps.
    pub fn poll(&mut self, now_us: u64) {
        for bytes in self.transport.recv(now_us) {
            match decode_frame(&bytes) {
                Ok(Frame::Data(env)) => {
                    if env.publisher == self.node {
                        continue;
                    }
                    self.on_data(env, now_us);
                }
                Ok(Frame::Ack(ack)) => self.on_ack(ack),
                Err(e) => {
                    warn!("node {}: dropping undecodable frame: {e}", self.node);
                    self.stats.decode_errors += 1;
                    self.events.push(BusEvent::DecodeFailed { error: e.to_string() });
                }
            }
        }
        self.retransmit_due(now_us);
        self.skip_stalled_gaps(now_us);
    }

    fn on_data(&mut self, env: Envelope, now_us: u64) {
        if !self.has_local_reader(&env.topic) {
            return;
        }
        if env.qos.is_reliable() {
            let ack = Ack { from: self.node, topic: env.topic.clone(), seq: env.seq, timestamp_us: now_us };
            match self.transport.send(Destination::Node(env.publisher), &encode_ack(&ack), now_us) {
                Ok(()) => self.stats.acks_sent += 1,
                Err(e) => debug!("node {}: ack to {} failed: {e}", self.node, env.publisher),
            }
        }
        self.receive_data(env, now_us);
    }

    fn on_ack(&mut self, ack: Ack) {
        self.stats.acks_received += 1;
        let Some(writer) = self.writers.get_mut(&ack.topic) else { return };
        writer.readers.insert(ack.from);
        if let Some(p) = writer.pending.iter_mut().find(|p| p.env.seq == ack.seq) {
            p.acked_by.insert(ack.from);
        }
        let mut kept = VecDeque::with_capacity(writer.pending.len());
        for p in std::mem::take(&mut writer.pending) {
            if !writer.is_complete(&p) {
                kept.push_back(p);
            }
        }
        writer.pending = kept;
    }

    fn retransmit_due(&mut self, now_us: u64) {
        let mut resend = Vec::new();
        for (topic, writer) in self.writers.iter_mut() {
            let mut kept = VecDeque::with_capacity(writer.pending.len());
            for mut p in std::mem::take(&mut writer.pending) {
                if p.next_retransmit_us > now_us {
                    kept.push_back(p);
                    continue;
                }
                if p.retransmits >= MAX_RETRANSMITS {
                    self.stats.expired += 1;
                    self.events.push(BusEvent::Expired { topic: topic.clone(), seq: p.env.seq });
                    continue;
                }
                p.retransmits += 1;
                p.next_retransmit_us = now_us + RETRANSMIT_PERIOD_US;
                resend.push(p.frame.clone());
                self.stats.retransmitted += 1;
                self.events.push(BusEvent::Retransmitted { topic: topic.clone(), seq: p.env.seq, attempt: p.retransmits });
                kept.push_back(p);
            }
            writer.pending = kept;
        }
        for frame in resend {
            if let Err(e) = self.transport.send(Destination::Broadcast, &frame, now_us) {
                debug!("node {}: retransmit failed: {e}", self.node);
            }
        }
    }

    fn skip_stalled_gaps(&mut self, now_us: u64) {
        let stalled: Vec<(NodeId, TopicName)> = self
            .readers
            .iter()
            .filter(|(_, r)| r.gap_since_us.is_some_and(|t| now_us.saturating_sub(t) >= GAP_TIMEOUT_US))
            .map(|(k, _)| k.clone())
            .collect();
        for key in stalled {
            let reader = self.readers.get_mut(&key).expect("reader exists");
            let Some((&first, _)) = reader.held.iter().next() else {
                reader.gap_since_us = None;
                continue;
            };
            self.events.push(BusEvent::GapSkipped {
                from: key.0,
                topic: key.1.clone(),
                missing_from: reader.watermark + 1,
                resume_at: first,
            });
            reader.watermark = first - 1;
            self.release_in_order(&key, now_us);
        }
    }

    /// Applies the per-stream ordering and duplicate rules and hands the
    /// sample to local subscriptions.
    fn receive_data(&mut self, env: Envelope, now_us: u64) {
        let key = (env.publisher, env.topic.clone());
        let reader = self.readers.entry(key.clone()).or_default();
        if env.seq <= reader.watermark || reader.held.contains_key(&env.seq) {
            self.stats.duplicates += 1;
            self.events.push(BusEvent::Duplicate { from: env.publisher, topic: env.topic, seq: env.seq });
            return;
        }
        if !env.qos.is_reliable() {
            reader.watermark = env.seq;
            self.deliver(env);
            return;
        }
        reader.held.insert(env.seq, env);
        self.release_in_order(&key, now_us);
    }

    fn release_in_order(&mut self, key: &(NodeId, TopicName), now_us: u64) {
        let mut ready = Vec::new();
        {
            let reader = self.readers.get_mut(key).expect("reader exists");
            while let Some(env) = reader.held.remove(&(reader.watermark + 1)) {
                reader.watermark = env.seq;
                ready.push(env);
            }
            if reader.held.is_empty() {
                reader.gap_since_us = None;
            } else if reader.gap_since_us.is_none() || !ready.is_empty() {
                reader.gap_since_us = Some(now_us);
            }
        }
        for env in ready {
            self.deliver(env);
        }
    }

    fn deliver(&mut self, env: Envelope) {
        self.stats.delivered += 1;
        self.events.push(BusEvent::Delivered {
            from: env.publisher,
            topic: env.topic.clone(),
            seq: env.seq,
            reliable: env.qos.is_reliable(),
            sent_us: env.timestamp_us,
        });
        let mut matching = self.subscriptions.iter().filter(|s| s.topic() == &env.topic).peekable();
        while let Some(sub) = matching.next() {
            if matching.peek().is_some() {
                sub.push(env.clone());
            } else {
                sub.push(env);
                break;
            }
        }
    }
}

impl<T: Transport> Publisher for Bus<T> {
    fn publish_next(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError> {
        let env =
            Envelope { topic: topic.clone(), publisher: self.node, seq: self.last_seq(topic) + 1, timestamp_us: now_us, qos, payload };
        self.publish(env, now_us).map(|a| a.seq)
    }
}
