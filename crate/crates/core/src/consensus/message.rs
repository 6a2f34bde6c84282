use serde::{Deserialize, Serialize};

use crate::crypto::{OneTimeSignature, ThresholdSignatureBundle, SIGNATURE_BYTES};
use crate::geo::GeoRecord;
use crate::ids::{NodeId, SubLayer, Term};
use crate::replication::global::{BatchItem, BatchKey};
use crate::replication::log::LogEntry;

pub const HEADER_BYTES: u64 = 64;
pub const ENTRY_BYTES: u64 = 128;
pub const CGF_REPLY_BYTES: u64 = 16;
/// Accounting weight of one signature; the compressed G1 point itself is
/// [`SIGNATURE_BYTES`] long.
pub const SIGNATURE_WEIGHT: u64 = 96;

const _: () = assert!(SIGNATURE_BYTES as u64 <= SIGNATURE_WEIGHT);

/// Group-formation ballot. Ordered by round, then by initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Ballot {
    pub round: u64,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupProposal {
    pub ballot: Ballot,
    /// Descending CGF order.
    pub members: Vec<NodeId>,
}

/// Message phases used for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CandidateSelection,
    CandidateNotification,
    LeaderSelection,
    LeaderNotification,
    ThresholdConfirmation,
    Replication,
    Heartbeat,
    GlobalReplication,
    Maintenance,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::CandidateSelection,
        Phase::CandidateNotification,
        Phase::LeaderSelection,
        Phase::LeaderNotification,
        Phase::ThresholdConfirmation,
        Phase::Replication,
        Phase::Heartbeat,
        Phase::GlobalReplication,
        Phase::Maintenance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::CandidateSelection => "candidate_selection",
            Phase::CandidateNotification => "candidate_notification",
            Phase::LeaderSelection => "leader_selection",
            Phase::LeaderNotification => "leader_notification",
            Phase::ThresholdConfirmation => "threshold_confirmation",
            Phase::Replication => "replication",
            Phase::Heartbeat => "heartbeat",
            Phase::GlobalReplication => "global_replication",
            Phase::Maintenance => "maintenance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Group-formation prepare.
    FormGroup {
        ballot: Ballot,
    },
    /// Promise carrying the replier's score and any group it already accepted
    /// or committed.
    CgfReply {
        ballot: Ballot,
        score: f64,
        accepted: Option<GroupProposal>,
        committed: bool,
    },
    /// Group-formation accept request.
    GroupAnnounce {
        proposal: GroupProposal,
    },
    GroupAck {
        ballot: Ballot,
    },
    GroupCommit {
        proposal: GroupProposal,
    },
    /// A candidate makes itself known to a follower.
    CandidateNotice {
        ballot: Ballot,
    },
    RequestVotes {
        term: Term,
        last_log_index: u64,
        last_log_term: Term,
        group: Ballot,
    },
    Vote {
        term: Term,
        granted: bool,
    },
    AppendEntries {
        term: Term,
        prev_log_index: u64,
        prev_log_term: Term,
        entries: Vec<LogEntry>,
        leader_commit: u64,
        leader_local_index: u64,
    },
    AppendReply {
        term: Term,
        success: bool,
        match_index: u64,
        appended: u32,
    },
    /// Liveness signal to sub-layer members outside the candidate group.
    Heartbeat {
        term: Term,
        leader_commit: u64,
        leader_local_index: u64,
    },
    ConfirmRequest {
        term: Term,
    },
    SignatureShare {
        term: Term,
        signature: OneTimeSignature,
        geo: GeoRecord,
    },
    LeaderConfirm {
        term: Term,
        leader: NodeId,
        bundle: Option<ThresholdSignatureBundle>,
    },
    BatchPropose {
        key: BatchKey,
        items: Vec<BatchItem>,
    },
    BatchAck {
        key: BatchKey,
    },
    GeoReport {
        geo: GeoRecord,
    },
}

/// A message scoped to one sub-layer consensus instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub scope: SubLayer,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn new(scope: SubLayer, body: Body) -> Self {
        ProtocolMessage { scope, body }
    }

    /// Header plus declared payload.
    pub fn size_bytes(&self) -> u64 {
        HEADER_BYTES
            + match &self.body {
                Body::AppendEntries { entries, .. } => ENTRY_BYTES * entries.len() as u64,
                Body::BatchPropose { items, .. } => ENTRY_BYTES * items.len() as u64,
                Body::CgfReply { .. } => CGF_REPLY_BYTES,
                Body::SignatureShare { .. } => SIGNATURE_WEIGHT,
                Body::LeaderConfirm { bundle: Some(b), .. } => SIGNATURE_WEIGHT * b.signatures.len() as u64,
                _ => 0,
            }
    }

    pub fn phase(&self) -> Phase {
        match &self.body {
            Body::FormGroup { .. }
            | Body::CgfReply { .. }
            | Body::GroupAnnounce { .. }
            | Body::GroupAck { .. }
            | Body::GroupCommit { .. } => Phase::CandidateSelection,
            Body::CandidateNotice { .. } => Phase::CandidateNotification,
            Body::RequestVotes { .. } | Body::Vote { .. } => Phase::LeaderSelection,
            Body::LeaderConfirm { .. } => Phase::LeaderNotification,
            Body::ConfirmRequest { .. } | Body::SignatureShare { .. } => Phase::ThresholdConfirmation,
            Body::AppendEntries { entries, .. } if !entries.is_empty() => Phase::Replication,
            Body::AppendReply { appended, .. } if *appended > 0 => Phase::Replication,
            Body::AppendEntries { .. } | Body::AppendReply { .. } | Body::Heartbeat { .. } => Phase::Heartbeat,
            Body::BatchPropose { .. } | Body::BatchAck { .. } => Phase::GlobalReplication,
            Body::GeoReport { .. } => Phase::Maintenance,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.body {
            Body::FormGroup { .. } => "FormGroup",
            Body::CgfReply { .. } => "CgfReply",
            Body::GroupAnnounce { .. } => "GroupAnnounce",
            Body::GroupAck { .. } => "GroupAck",
            Body::GroupCommit { .. } => "GroupCommit",
            Body::CandidateNotice { .. } => "CandidateNotice",
            Body::RequestVotes { .. } => "RequestVotes",
            Body::Vote { .. } => "Vote",
            Body::AppendEntries { .. } => "AppendEntries",
            Body::AppendReply { .. } => "AppendReply",
            Body::Heartbeat { .. } => "Heartbeat",
            Body::ConfirmRequest { .. } => "ConfirmRequest",
            Body::SignatureShare { .. } => "SignatureShare",
            Body::LeaderConfirm { .. } => "LeaderConfirm",
            Body::BatchPropose { .. } => "BatchPropose",
            Body::BatchAck { .. } => "BatchAck",
            Body::GeoReport { .. } => "GeoReport",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::Layer;
    use crate::replication::log::{EntryKind, LocalLog};

    fn msg(body: Body) -> ProtocolMessage {
        ProtocolMessage::new(SubLayer::leaf(0), body)
    }

    #[test]
    fn size_table() {
        let mut log = LocalLog::new();
        log.append_new(1, EntryKind::LeaderStatus, Layer::Leaf);
        log.append_new(1, EntryKind::Transaction(vec![1; 500]), Layer::Leaf);
        let ae = msg(Body::AppendEntries {
            term: 1,
            prev_log_index: 0,
            prev_log_term: 0,
            entries: log.entries().to_vec(),
            leader_commit: 0,
            leader_local_index: 0,
        });
        assert_eq!(ae.size_bytes(), 64 + 2 * 128);
        assert_eq!(ae.phase(), Phase::Replication);
        let reply = msg(Body::CgfReply { ballot: Ballot::default(), score: 3.75, accepted: None, committed: false });
        assert_eq!(reply.size_bytes(), 80);
        assert_eq!(msg(Body::Vote { term: 1, granted: true }).size_bytes(), 64);
        let hb = msg(Body::AppendEntries {
            term: 1,
            prev_log_index: 0,
            prev_log_term: 0,
            entries: vec![],
            leader_commit: 0,
            leader_local_index: 0,
        });
        assert_eq!(hb.phase(), Phase::Heartbeat);
    }
}
