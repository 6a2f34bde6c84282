//! Global safety observer. Nodes report protocol facts as they happen; the
//! observer cross-checks them against everything reported before.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::crypto::ThresholdSignatureBundle;
use crate::ids::{NodeId, SubLayer, Term};
use crate::replication::global::BatchKey;
use crate::replication::log::Hash32;
use crate::sim::world::World;

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Candidacy {
        scope: SubLayer,
        node: NodeId,
        term: Term,
    },
    VoteGranted {
        scope: SubLayer,
        voter: NodeId,
        term: Term,
        candidate: NodeId,
    },
    BecameLeader {
        scope: SubLayer,
        node: NodeId,
        term: Term,
    },
    SteppedDown {
        scope: SubLayer,
        node: NodeId,
        term: Term,
    },
    Appended {
        scope: SubLayer,
        node: NodeId,
        index: u64,
        term: Term,
        chain: Hash32,
    },
    /// The first entry removed by a suffix truncation.
    Truncated {
        scope: SubLayer,
        node: NodeId,
        index: u64,
        chain: Hash32,
    },
    Committed {
        scope: SubLayer,
        node: NodeId,
        index: u64,
        term: Term,
        chain: Hash32,
        /// Payload hash of a committed client transaction.
        tx: Option<Hash32>,
    },
    TruncationRefused {
        scope: SubLayer,
        node: NodeId,
        index: u64,
    },
    Cursor {
        scope: SubLayer,
        node: NodeId,
        local_index: u64,
        commit_index: u64,
    },
    GlobalIndex {
        node: NodeId,
        global_index: u64,
    },
    GroupLearned {
        scope: SubLayer,
        node: NodeId,
        members: Vec<NodeId>,
    },
    /// A leader without threshold confirmation became visible to its sub-layer.
    LeaderAnnounced {
        scope: SubLayer,
        node: NodeId,
        term: Term,
    },
    UpperConfirmed {
        scope: SubLayer,
        leader: NodeId,
        term: Term,
        signers: Vec<NodeId>,
        bundle: ThresholdSignatureBundle,
        /// Participants whose share failed verification.
        rejected: Vec<NodeId>,
    },
    /// A signer handed out a one-time signature over a digest it signed before.
    SignatureReused {
        node: NodeId,
        digest: Hash32,
    },
    ConfirmationVoided {
        scope: SubLayer,
        node: NodeId,
        term: Term,
        valid: usize,
        rejected: Vec<NodeId>,
    },
    Redirected {
        scope: SubLayer,
        node: NodeId,
        payload: Vec<u8>,
        hint: Option<NodeId>,
    },
    BatchAcked {
        node: NodeId,
        key: BatchKey,
    },
    MembershipCommitted {
        scope: SubLayer,
        node: NodeId,
        change: crate::replication::log::MembershipChange,
    },
    Crashed {
        node: NodeId,
    },
    Restarted {
        node: NodeId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ElectionSafety,
    VoteUniqueness,
    LogMatching,
    AppendOnlyCommitment,
    CursorSanity,
    ThresholdConfirmation,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::ElectionSafety => "election_safety",
            ViolationKind::VoteUniqueness => "vote_uniqueness",
            ViolationKind::LogMatching => "log_matching",
            ViolationKind::AppendOnlyCommitment => "append_only_commitment",
            ViolationKind::CursorSanity => "cursor_sanity",
            ViolationKind::ThresholdConfirmation => "threshold_confirmation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Observer {
    leaders: BTreeMap<(SubLayer, Term), NodeId>,
    votes: BTreeMap<(SubLayer, NodeId, Term), NodeId>,
    entries: BTreeMap<(SubLayer, u64, Term), Hash32>,
    committed: BTreeMap<(SubLayer, u64), Hash32>,
    global_index: BTreeMap<NodeId, u64>,
    violations: Vec<Violation>,
}

impl Observer {
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn violation_count(&self) -> usize {
        self.violations.len()
    }

    fn flag(&mut self, kind: ViolationKind, detail: String) {
        log::warn!("safety violation {}: {}", kind.as_str(), detail);
        self.violations.push(Violation { kind, detail });
    }

    pub fn observe(&mut self, o: &Observation, world: &World) {
        match o {
            Observation::BecameLeader { scope, node, term } => {
                if let Some(prev) = self.leaders.insert((*scope, *term), *node) {
                    if prev != *node {
                        self.flag(ViolationKind::ElectionSafety, format!("{scope} term {term}: {prev} and {node}"));
                    }
                }
            }
            Observation::VoteGranted { scope, voter, term, candidate } => {
                if let Some(prev) = self.votes.insert((*scope, *voter, *term), *candidate) {
                    if prev != *candidate {
                        self.flag(
                            ViolationKind::VoteUniqueness,
                            format!("{scope} term {term}: {voter} voted for {prev} and {candidate}"),
                        );
                    }
                }
            }
            Observation::Appended { scope, node, index, term, chain } => {
                if let Some(prev) = self.entries.insert((*scope, *index, *term), *chain) {
                    if prev != *chain {
                        self.flag(
                            ViolationKind::LogMatching,
                            format!("{scope} ({index}, {term}) at {node} has a different prefix"),
                        );
                    }
                }
            }
            Observation::Truncated { scope, node, index, chain } => {
                if self.committed.get(&(*scope, *index)) == Some(chain) {
                    self.flag(
                        ViolationKind::AppendOnlyCommitment,
                        format!("{scope} committed index {index} removed at {node}"),
                    );
                }
            }
            Observation::TruncationRefused { scope, node, index } => {
                self.flag(
                    ViolationKind::AppendOnlyCommitment,
                    format!("{scope} leader asked {node} to overwrite committed index {index}"),
                );
            }
            Observation::Committed { scope, node, index, chain, .. } => match self.committed.get(&(*scope, *index)) {
                Some(prev) if prev != chain => {
                    self.flag(
                        ViolationKind::AppendOnlyCommitment,
                        format!("{scope} index {index} committed with two values (seen at {node})"),
                    );
                }
                Some(_) => {}
                None => {
                    self.committed.insert((*scope, *index), *chain);
                }
            },
            Observation::Cursor { scope, node, local_index, commit_index } => {
                if local_index > commit_index {
                    self.flag(
                        ViolationKind::CursorSanity,
                        format!("{scope} {node}: local index {local_index} > commit {commit_index}"),
                    );
                }
            }
            Observation::GlobalIndex { node, global_index } => {
                let prev = self.global_index.insert(*node, *global_index).unwrap_or(0);
                if *global_index < prev {
                    self.flag(
                        ViolationKind::CursorSanity,
                        format!("{node}: global index fell {prev} -> {global_index}"),
                    );
                }
            }
            Observation::UpperConfirmed { scope, leader, term, signers, bundle, .. } => {
                if self.leaders.get(&(*scope, *term)) != Some(leader) {
                    self.flag(
                        ViolationKind::ThresholdConfirmation,
                        format!("{scope} term {term}: {leader} confirmed without winning the election"),
                    );
                }
                let ok = world.crypto.as_ref().is_some_and(|c| {
                    let keys = c.verify_keys(signers);
                    keys.len() == signers.len() && c.check_bundle(bundle, &keys).is_ok_and(|out| out.accepted)
                });
                if !ok {
                    self.flag(
                        ViolationKind::ThresholdConfirmation,
                        format!("{scope} term {term}: bundle for {leader} does not verify"),
                    );
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::ProtocolParams;

    #[test]
    fn flags_double_vote_and_double_leader() {
        let w = World::new(ProtocolParams::default());
        let mut obs = Observer::default();
        let s = SubLayer::leaf(0);
        obs.observe(&Observation::VoteGranted { scope: s, voter: NodeId(1), term: 3, candidate: NodeId(2) }, &w);
        obs.observe(&Observation::VoteGranted { scope: s, voter: NodeId(1), term: 3, candidate: NodeId(2) }, &w);
        assert_eq!(obs.violation_count(), 0);
        obs.observe(&Observation::VoteGranted { scope: s, voter: NodeId(1), term: 3, candidate: NodeId(4) }, &w);
        assert_eq!(obs.violations()[0].kind, ViolationKind::VoteUniqueness);
        obs.observe(&Observation::BecameLeader { scope: s, node: NodeId(1), term: 3 }, &w);
        obs.observe(&Observation::BecameLeader { scope: SubLayer::leaf(1), node: NodeId(2), term: 3 }, &w);
        assert_eq!(obs.violation_count(), 1);
        obs.observe(&Observation::BecameLeader { scope: s, node: NodeId(2), term: 3 }, &w);
        assert_eq!(obs.violations()[1].kind, ViolationKind::ElectionSafety);
    }

    #[test]
    fn flags_divergent_prefix_and_rewritten_commit() {
        let w = World::new(ProtocolParams::default());
        let mut obs = Observer::default();
        let s = SubLayer::leaf(0);
        let app = |node, chain| Observation::Appended { scope: s, node: NodeId(node), index: 2, term: 1, chain };
        obs.observe(&app(0, [1; 32]), &w);
        obs.observe(&app(1, [1; 32]), &w);
        assert_eq!(obs.violation_count(), 0);
        obs.observe(&app(2, [9; 32]), &w);
        assert_eq!(obs.violations()[0].kind, ViolationKind::LogMatching);

        let com = |node, chain| Observation::Committed {
            scope: s,
            node: NodeId(node),
            index: 5,
            term: 1,
            chain,
            tx: Some([1; 32]),
        };
        obs.observe(&com(0, [3; 32]), &w);
        obs.observe(&Observation::Truncated { scope: s, node: NodeId(4), index: 5, chain: [3; 32] }, &w);
        assert_eq!(obs.violations()[1].kind, ViolationKind::AppendOnlyCommitment);
        obs.observe(&com(1, [4; 32]), &w);
        assert_eq!(obs.violation_count(), 3);
    }

    #[test]
    fn flags_cursor_regressions() {
        let w = World::new(ProtocolParams::default());
        let mut obs = Observer::default();
        obs.observe(
            &Observation::Cursor { scope: SubLayer::leaf(0), node: NodeId(0), local_index: 3, commit_index: 2 },
            &w,
        );
        obs.observe(&Observation::GlobalIndex { node: NodeId(0), global_index: 4 }, &w);
        obs.observe(&Observation::GlobalIndex { node: NodeId(0), global_index: 3 }, &w);
        assert_eq!(obs.violation_count(), 2);
    }
}
