//! Two-node reliable delivery harness over a lossy simulated link.

use swarmlink_core::middleware::sim::{NetworkModel, SimNetwork, SimTransport};
use swarmlink_core::middleware::{Bus, MiddlewareError, Publisher, QosProfile, TopicName};
use swarmlink_core::model::NodeId;

use crate::trace::{bus_record, net_record, TraceRecord};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub messages: u64,
    pub drop_probability: f64,
    pub latency_mean_ms: f64,
    pub latency_jitter_ms: f64,
    pub step_us: u64,
    pub history_depth: u16,
    pub seed: u64,
    /// Extra time after the last publish for retransmits to settle.
    pub drain_us: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            messages: 500,
            drop_probability: 0.3,
            latency_mean_ms: 5.0,
            latency_jitter_ms: 2.0,
            step_us: 10_000,
            history_depth: 16,
            seed: 7,
            drain_us: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessResult {
    pub trace: Vec<TraceRecord>,
    /// Sequence numbers in the order the receiver's subscription saw them.
    pub received: Vec<u64>,
    pub payloads_intact: bool,
    pub back_pressure_hits: u64,
}

pub const HARNESS_TOPIC: &str = "test/reliable";

fn payload(i: u64) -> Vec<u8> {
    format!("msg-{i}").into_bytes()
}

/// Node 0 publishes `messages` reliable samples to node 1, retrying on
/// back-pressure.
pub fn run_reliable_harness(cfg: &HarnessConfig) -> Result<HarnessResult, SimError> {
    let model = NetworkModel {
        seed: cfg.seed,
        latency_mean_ms: cfg.latency_mean_ms,
        latency_jitter_ms: cfg.latency_jitter_ms,
        drop_probability: cfg.drop_probability,
    };
    let inv = |e: MiddlewareError| SimError::Invariant(e.to_string());
    let net = SimNetwork::shared(model).map_err(inv)?;
    let (a, b) = (NodeId(0), NodeId(1));
    let mut writer = Bus::new(a, SimTransport::new(a, net.clone()));
    let mut reader = Bus::new(b, SimTransport::new(b, net.clone()));
    let topic = TopicName::new(HARNESS_TOPIC).map_err(inv)?;
    let qos = QosProfile::reliable(cfg.history_depth);
    let sub = reader.subscribe(topic.clone(), qos);

    let mut trace = Vec::new();
    let mut received = Vec::new();
    let mut payloads_intact = true;
    let mut back_pressure_hits = 0;
    let mut sent = 0u64;
    let mut now = 0u64;
    let mut last_publish = 0u64;
    loop {
        net.borrow_mut().step_network(now).map_err(inv)?;
        writer.poll(now);
        reader.poll(now);
        if sent < cfg.messages {
            match writer.publish_next(&topic, qos, payload(sent), now) {
                Ok(_) => {
                    sent += 1;
                    last_publish = now;
                }
                Err(MiddlewareError::BackPressure { .. }) => back_pressure_hits += 1,
                Err(e) => return Err(inv(e)),
            }
        }
        for env in sub.drain() {
            payloads_intact &= env.payload == payload(env.seq - 1);
            received.push(env.seq);
        }
        trace.extend(writer.drain_events().iter().map(|e| bus_record(now, a, e)));
        trace.extend(reader.drain_events().iter().map(|e| bus_record(now, b, e)));
        trace.extend(net.borrow_mut().drain_events().iter().map(|e| net_record(now, e)));
        if sent == cfg.messages && (received.len() as u64 >= cfg.messages || now >= last_publish + cfg.drain_us) {
            break;
        }
        now += cfg.step_us;
    }
    Ok(HarnessResult { trace, received, payloads_intact, back_pressure_hits })
}
