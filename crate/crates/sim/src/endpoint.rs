//! What a node needs from its bus participant, so the same node code runs
//! over the simulated network and over UDP.

use std::sync::{Arc, Mutex};

use swarmlink_core::middleware::udp::UdpTransport;
use swarmlink_core::middleware::{Bus, MiddlewareError, Publisher, QosProfile, Subscription, TopicName, Transport};
use swarmlink_core::model::NodeId;

pub trait Endpoint {
    fn node(&self) -> NodeId;

    fn publish(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError>;

    fn subscribe(&mut self, topic: TopicName, qos: QosProfile) -> Subscription;

    /// Drops every subscription this participant holds on `topic`.
    fn unsubscribe(&mut self, topic: &TopicName);
}

impl<T: Transport> Endpoint for Bus<T> {
    fn node(&self) -> NodeId {
        Bus::node(self)
    }

    fn publish(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError> {
        self.publish_next(topic, qos, payload, now_us)
    }

    fn subscribe(&mut self, topic: TopicName, qos: QosProfile) -> Subscription {
        Bus::subscribe(self, topic, qos)
    }

    fn unsubscribe(&mut self, topic: &TopicName) {
        Bus::unsubscribe(self, topic)
    }
}

/// A UDP bus shared with its pump thread.
#[derive(Clone)]
pub struct SharedUdp {
    pub node: NodeId,
    pub bus: Arc<Mutex<Bus<UdpTransport>>>,
}

impl Endpoint for SharedUdp {
    fn node(&self) -> NodeId {
        self.node
    }

    fn publish(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError> {
        self.bus.lock().expect("bus poisoned").publish_next(topic, qos, payload, now_us)
    }

    fn subscribe(&mut self, topic: TopicName, qos: QosProfile) -> Subscription {
        self.bus.lock().expect("bus poisoned").subscribe(topic, qos)
    }

    fn unsubscribe(&mut self, topic: &TopicName) {
        self.bus.lock().expect("bus poisoned").unsubscribe(topic)
    }
}

/// Lets an endpoint stand in where a [`Publisher`] is expected.
pub struct AsPublisher<'a>(pub &'a mut dyn Endpoint);

impl Publisher for AsPublisher<'_> {
    fn publish_next(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError> {
        self.0.publish(topic, qos, payload, now_us)
    }
}
