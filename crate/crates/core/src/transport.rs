//! In-process hub-and-spoke message bus with an exact uplink bit ledger.
//!
//! Uplink payload bits are charged per channel; serialization headers are
//! counted separately so that budget identities such as `K·T·m·B` can be
//! checked exactly. Downlink broadcasts are delivered but never charged.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::quant::QuantizedPayload;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Training,
    Inference,
    Calibration,
}

/// Anything that can be sent on the uplink.
pub trait Payload {
    /// Bits charged against the budget.
    fn payload_bits(&self) -> u64;
    /// Serialization overhead, tracked but not charged.
    fn header_bits(&self) -> u64;
}

impl Payload for QuantizedPayload {
    fn payload_bits(&self) -> u64 {
        QuantizedPayload::payload_bits(self)
    }

    fn header_bits(&self) -> u64 {
        QuantizedPayload::header_bits(self)
    }
}

/// Exact uplink accounting. Training is keyed by `(node, round)`,
/// inference by `(node, query)`, calibration by node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BitLedger {
    training: BTreeMap<(NodeId, u64), u64>,
    inference: BTreeMap<(NodeId, u64), u64>,
    calibration: BTreeMap<NodeId, u64>,
    header_bits: u64,
    messages: u64,
}

impl BitLedger {
    fn charge(&mut self, from: NodeId, channel: Channel, tag: u64, payload_bits: u64, header_bits: u64) {
        match channel {
            Channel::Training => *self.training.entry((from, tag)).or_default() += payload_bits,
            Channel::Inference => *self.inference.entry((from, tag)).or_default() += payload_bits,
            Channel::Calibration => *self.calibration.entry(from).or_default() += payload_bits,
        }
        self.header_bits += header_bits;
        self.messages += 1;
    }

    pub fn training_bits(&self, node: NodeId, round: u64) -> u64 {
        self.training.get(&(node, round)).copied().unwrap_or(0)
    }

    pub fn inference_bits(&self, node: NodeId, query: u64) -> u64 {
        self.inference.get(&(node, query)).copied().unwrap_or(0)
    }

    pub fn calibration_bits(&self, node: NodeId) -> u64 {
        self.calibration.get(&node).copied().unwrap_or(0)
    }

    pub fn total(&self, channel: Channel) -> u64 {
        match channel {
            Channel::Training => self.training.values().sum(),
            Channel::Inference => self.inference.values().sum(),
            Channel::Calibration => self.calibration.values().sum(),
        }
    }

    pub fn header_bits(&self) -> u64 {
        self.header_bits
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut per_node: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (&(node, _), &bits) in self.training.iter().chain(self.inference.iter()) {
            *per_node.entry(node).or_default() += bits;
        }
        for (&node, &bits) in &self.calibration {
            *per_node.entry(node).or_default() += bits;
        }
        LedgerSnapshot {
            training_payload_bits: self.total(Channel::Training),
            inference_payload_bits: self.total(Channel::Inference),
            calibration_payload_bits: self.total(Channel::Calibration),
            header_bits: self.header_bits,
            messages: self.messages,
            per_node_payload_bits: per_node.into_values().collect(),
        }
    }
}

/// Serializable summary of a ledger, embedded in experiment JSON.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub training_payload_bits: u64,
    pub inference_payload_bits: u64,
    pub calibration_payload_bits: u64,
    pub header_bits: u64,
    pub messages: u64,
    pub per_node_payload_bits: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
    pub payload_bits: u64,
    pub header_bits: u64,
}

#[derive(Debug)]
pub struct Envelope<U> {
    pub from: NodeId,
    pub channel: Channel,
    pub tag: u64,
    pub seq: u64,
    pub payload: U,
}

struct HubState<U> {
    ledger: BitLedger,
    mailbox: VecDeque<Envelope<U>>,
    next_seq: u64,
}

/// Synchronous, lossless bus between `num_nodes` nodes and one hub.
///
/// `U` is the uplink message type and `D` the downlink type. All ledger and
/// mailbox updates happen under one lock, so concurrent uplinks are
/// linearized and per-sender FIFO order is preserved.
pub struct Bus<U, D = ()> {
    hub: Mutex<HubState<U>>,
    inboxes: Vec<Mutex<VecDeque<D>>>,
}

impl<U: Payload, D: Clone> Bus<U, D> {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            hub: Mutex::new(HubState {
                ledger: BitLedger::default(),
                mailbox: VecDeque::new(),
                next_seq: 0,
            }),
            inboxes: (0..num_nodes).map(|_| Mutex::new(VecDeque::new())).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inboxes.len()
    }

    pub fn uplink(&self, from: NodeId, channel: Channel, tag: u64, payload: U) -> Receipt {
        let payload_bits = payload.payload_bits();
        let header_bits = payload.header_bits();
        let mut hub = self.hub.lock().unwrap();
        hub.ledger.charge(from, channel, tag, payload_bits, header_bits);
        let seq = hub.next_seq;
        hub.next_seq += 1;
        hub.mailbox.push_back(Envelope {
            from,
            channel,
            tag,
            seq,
            payload,
        });
        Receipt {
            seq,
            payload_bits,
            header_bits,
        }
    }

    /// Take everything currently in the hub mailbox, in arrival order.
    pub fn drain(&self) -> Vec<Envelope<U>> {
        self.hub.lock().unwrap().mailbox.drain(..).collect()
    }

    /// Deliver `msg` to every node. Free of charge.
    pub fn broadcast(&self, msg: D) {
        for inbox in &self.inboxes {
            inbox.lock().unwrap().push_back(msg.clone());
        }
    }

    pub fn recv_downlink(&self, node: NodeId) -> Option<D> {
        self.inboxes[node as usize].lock().unwrap().pop_front()
    }

    pub fn ledger(&self) -> BitLedger {
        self.hub.lock().unwrap().ledger.clone()
    }
}
