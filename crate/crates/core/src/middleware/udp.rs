//! UDP transport: one socket per participant, one frame per datagram.
//! Broadcast is a unicast fan-out over the static peer table.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::bus::{Bus, Publisher};
use super::types::{QosProfile, TopicName};
use super::{Destination, MiddlewareError, Subscription, Transport};
use crate::model::NodeId;

const MAX_DATAGRAM: usize = 65_535;

pub struct UdpTransport {
    node: NodeId,
    socket: UdpSocket,
    peers: BTreeMap<NodeId, SocketAddr>,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn bind(node: NodeId, addr: SocketAddr) -> Result<Self, MiddlewareError> {
        let socket = UdpSocket::bind(addr).map_err(|e| MiddlewareError::Transport(format!("bind {addr}: {e}")))?;
        socket.set_nonblocking(true).map_err(|e| MiddlewareError::Transport(e.to_string()))?;
        Ok(UdpTransport { node, socket, peers: BTreeMap::new(), buf: vec![0; MAX_DATAGRAM] })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, MiddlewareError> {
        self.socket.local_addr().map_err(|e| MiddlewareError::Transport(e.to_string()))
    }

    pub fn add_peer(&mut self, node: NodeId, addr: SocketAddr) {
        if node != self.node {
            self.peers.insert(node, addr);
        }
    }

    pub fn peers(&self) -> &BTreeMap<NodeId, SocketAddr> {
        &self.peers
    }

    fn send_one(&self, to: SocketAddr, frame: &[u8]) {
        if let Err(e) = self.socket.send_to(frame, to) {
            // unreachable peers are routine on a lossy link
            debug!("node {}: send to {to} failed: {e}", self.node);
        }
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, dest: Destination, frame: &[u8], _now_us: u64) -> Result<(), MiddlewareError> {
        match dest {
            Destination::Broadcast => {
                for addr in self.peers.values() {
                    self.send_one(*addr, frame);
                }
            }
            Destination::Node(n) => match self.peers.get(&n) {
                Some(addr) => self.send_one(*addr, frame),
                None => return Err(MiddlewareError::Transport(format!("no address for node {n}"))),
            },
        }
        Ok(())
    }

    fn recv(&mut self, _now_us: u64) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        loop {
            match self.socket.recv_from(&mut self.buf) {
                Ok((n, _)) => out.push(self.buf[..n].to_vec()),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => {
                    warn!("node {}: recv failed: {e}", self.node);
                    break;
                }
            }
        }
        out
    }
}

/// Monotonic microsecond clock shared by every participant of a live run.
#[derive(Clone, Copy, Debug)]
pub struct LiveClock {
    epoch: Instant,
}

impl LiveClock {
    pub fn new() -> Self {
        LiveClock { epoch: Instant::now() }
    }

    pub fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }
}

impl Default for LiveClock {
    fn default() -> Self {
        Self::new()
    }
}

/// A UDP bus plus a background pump that receives frames, sends acks and
/// retransmits. Publishing is allowed from any thread through
/// [`UdpParticipant::publisher`]; subscriptions can be drained or blocked on
/// from their own threads.
pub struct UdpParticipant {
    bus: Arc<Mutex<Bus<UdpTransport>>>,
    clock: LiveClock,
    stop: Arc<AtomicBool>,
    pump: Option<JoinHandle<()>>,
}

impl UdpParticipant {
    pub fn start(transport: UdpTransport, clock: LiveClock) -> Self {
        let node = transport.node;
        let bus = Arc::new(Mutex::new(Bus::new(node, transport)));
        let stop = Arc::new(AtomicBool::new(false));
        let pump = {
            let bus = bus.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name(format!("udp-pump-{node}"))
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        bus.lock().expect("bus poisoned").poll(clock.now_us());
                        thread::sleep(Duration::from_millis(2));
                    }
                })
                .expect("spawn pump thread")
        };
        UdpParticipant { bus, clock, stop, pump: Some(pump) }
    }

    pub fn bus(&self) -> &Arc<Mutex<Bus<UdpTransport>>> {
        &self.bus
    }

    pub fn clock(&self) -> LiveClock {
        self.clock
    }

    pub fn subscribe(&self, topic: TopicName, qos: QosProfile) -> Subscription {
        self.bus.lock().expect("bus poisoned").subscribe(topic, qos)
    }

    pub fn publisher(&self) -> SharedPublisher {
        SharedPublisher { bus: self.bus.clone() }
    }
}

impl Drop for UdpParticipant {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.pump.take() {
            let _ = h.join();
        }
    }
}

/// Cloneable, thread-safe publishing handle onto a UDP participant.
#[derive(Clone)]
pub struct SharedPublisher {
    bus: Arc<Mutex<Bus<UdpTransport>>>,
}

impl Publisher for SharedPublisher {
    fn publish_next(&mut self, topic: &TopicName, qos: QosProfile, payload: Vec<u8>, now_us: u64) -> Result<u64, MiddlewareError> {
        self.bus.lock().expect("bus poisoned").publish_next(topic, qos, payload, now_us)
    }
}
