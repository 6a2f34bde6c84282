//! Message and timing accounting. Bytes count delivered messages only.

use std::collections::{BTreeMap, BTreeSet};

use crate::consensus::message::{Phase, ProtocolMessage};
use crate::ids::{Layer, SubLayer, Term, Tick};
use crate::replication::log::Hash32;
use crate::sim::observer::Observation;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub messages: u64,
    pub bytes: u64,
}

impl Tally {
    fn add(&mut self, bytes: u64) {
        self.messages += 1;
        self.bytes += bytes;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ElectionTiming {
    /// First candidacy seen in the scope.
    pub started: Option<Tick>,
    /// First leader established after `started` (confirmed, for upper layers).
    pub established: Option<Tick>,
}

impl ElectionTiming {
    pub fn latency(&self) -> Option<Tick> {
        Some(self.established? - self.started?)
    }
}

#[derive(Debug, Default)]
pub struct MetricsRecorder {
    delivered: BTreeMap<(Layer, Phase), Tally>,
    dropped: u64,
    lost: u64,
    elections: BTreeMap<SubLayer, ElectionTiming>,
    max_term: BTreeMap<SubLayer, Term>,
    /// Distinct transaction payloads; a retried payload committed twice counts once.
    committed_tx: BTreeSet<Hash32>,
    first_tx_commit: Option<Tick>,
    voided_confirmations: u64,
    signature_reuses: u64,
    global_index: u64,
}

impl MetricsRecorder {
    pub fn record_delivery(&mut self, _now: Tick, msg: &ProtocolMessage) {
        self.delivered.entry((msg.scope.layer, msg.phase())).or_default().add(msg.size_bytes());
    }

    /// Sent to a crashed receiver.
    pub fn record_lost(&mut self, _msg: &ProtocolMessage) {
        self.lost += 1;
    }

    /// Dropped by the network (loss or partition).
    pub fn record_dropped(&mut self, _msg: &ProtocolMessage) {
        self.dropped += 1;
    }

    pub fn observe(&mut self, now: Tick, o: &Observation) {
        match o {
            Observation::Candidacy { scope, term, .. } => {
                self.elections.entry(*scope).or_default().started.get_or_insert(now);
                let t = self.max_term.entry(*scope).or_default();
                *t = (*t).max(*term);
            }
            Observation::BecameLeader { scope, .. } if !scope.layer.is_upper() => self.established(*scope, now),
            Observation::UpperConfirmed { scope, .. } => self.established(*scope, now),
            Observation::Committed { tx: Some(h), .. } => {
                if self.committed_tx.insert(*h) {
                    self.first_tx_commit.get_or_insert(now);
                }
            }
            Observation::ConfirmationVoided { .. } => self.voided_confirmations += 1,
            Observation::SignatureReused { .. } => self.signature_reuses += 1,
            Observation::GlobalIndex { global_index, .. } => self.global_index = self.global_index.max(*global_index),
            _ => {}
        }
    }

    fn established(&mut self, scope: SubLayer, now: Tick) {
        let e = self.elections.entry(scope).or_default();
        if e.started.is_some() {
            e.established.get_or_insert(now);
        }
    }

    pub fn tally(&self, layer: Layer, phase: Phase) -> Tally {
        self.delivered.get(&(layer, phase)).copied().unwrap_or_default()
    }

    pub fn phase_total(&self, phase: Phase) -> Tally {
        Layer::ALL.iter().fold(Tally::default(), |acc, &l| {
            let t = self.tally(l, phase);
            Tally { messages: acc.messages + t.messages, bytes: acc.bytes + t.bytes }
        })
    }

    pub fn delivered_messages(&self) -> u64 {
        self.delivered.values().map(|t| t.messages).sum()
    }

    pub fn delivered_bytes(&self) -> u64 {
        self.delivered.values().map(|t| t.bytes).sum()
    }

    pub fn dropped_messages(&self) -> u64 {
        self.dropped
    }

    pub fn lost_messages(&self) -> u64 {
        self.lost
    }

    pub fn elections(&self) -> &BTreeMap<SubLayer, ElectionTiming> {
        &self.elections
    }

    pub fn max_term(&self, scope: SubLayer) -> Term {
        self.max_term.get(&scope).copied().unwrap_or(0)
    }

    pub fn terms_consumed(&self) -> Term {
        self.max_term.values().sum()
    }

    pub fn committed_tx(&self) -> u64 {
        self.committed_tx.len() as u64
    }

    pub fn is_committed(&self, payload_hash: &Hash32) -> bool {
        self.committed_tx.contains(payload_hash)
    }

    pub fn first_tx_commit(&self) -> Option<Tick> {
        self.first_tx_commit
    }

    pub fn voided_confirmations(&self) -> u64 {
        self.voided_confirmations
    }

    pub fn signature_reuses(&self) -> u64 {
        self.signature_reuses
    }

    pub fn global_index(&self) -> u64 {
        self.global_index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::message::Body;
    use crate::ids::NodeId;

    #[test]
    fn latency_spans_first_candidacy_to_leader() {
        let mut m = MetricsRecorder::default();
        let s = SubLayer::leaf(0);
        m.observe(5, &Observation::BecameLeader { scope: s, node: NodeId(0), term: 1 });
        m.observe(10, &Observation::Candidacy { scope: s, node: NodeId(0), term: 1 });
        m.observe(12, &Observation::Candidacy { scope: s, node: NodeId(1), term: 2 });
        m.observe(40, &Observation::BecameLeader { scope: s, node: NodeId(1), term: 2 });
        m.observe(90, &Observation::BecameLeader { scope: s, node: NodeId(0), term: 3 });
        assert_eq!(m.elections()[&s].latency(), Some(30));
        assert_eq!(m.max_term(s), 2);
    }

    #[test]
    fn upper_layers_wait_for_confirmation() {
        let mut m = MetricsRecorder::default();
        let s = SubLayer::new(Layer::Top, 0);
        m.observe(1, &Observation::Candidacy { scope: s, node: NodeId(0), term: 1 });
        m.observe(9, &Observation::BecameLeader { scope: s, node: NodeId(0), term: 1 });
        assert_eq!(m.elections()[&s].latency(), None);
    }

    #[test]
    fn bytes_follow_size_table() {
        let mut m = MetricsRecorder::default();
        let msg = ProtocolMessage::new(SubLayer::leaf(0), Body::Vote { term: 1, granted: true });
        m.record_delivery(0, &msg);
        m.record_delivery(0, &msg);
        m.record_dropped(&msg);
        assert_eq!(m.tally(Layer::Leaf, Phase::LeaderSelection), Tally { messages: 2, bytes: 128 });
        assert_eq!(m.delivered_bytes(), 128);
        assert_eq!(m.dropped_messages(), 1);
    }
}
