//! The global log: local entries batched upward and inserted once by the
//! upper leader.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ids::{SubLayer, Term};
use crate::replication::log::{EntryKind, Hash32, LocalLog};

/// Idempotency key of a batch proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchKey {
    pub origin: SubLayer,
    pub from: u64,
    pub to: u64,
}

/// One local entry as carried in a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub local_index: u64,
    pub local_term: Term,
    pub payload_hash: Hash32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub key: BatchKey,
    pub items: Vec<BatchItem>,
}

/// Builds the next proposal from a local log, or `None` when fewer than
/// `batch_size` committed entries are buffered past `local_index`.
pub fn propose_global_batch(origin: SubLayer, log: &LocalLog, batch_size: u64) -> Option<BatchProposal> {
    let entries = log.next_batch(batch_size)?;
    let from = entries.first()?.index;
    let to = entries.last()?.index;
    Some(BatchProposal {
        key: BatchKey { origin, from, to },
        items: entries
            .iter()
            .map(|e| BatchItem { local_index: e.index, local_term: e.term, payload_hash: e.kind.payload_hash() })
            .collect(),
    })
}

/// Committed global record, one per local entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalRecord {
    pub index: u64,
    pub term: Term,
    pub origin: SubLayer,
    pub local_index: u64,
    pub payload_hash: Hash32,
}

/// Global view derived from the committed prefix of the top layer's log.
/// `global_index` counts committed records and never decreases.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalLog {
    records: Vec<GlobalRecord>,
    keys: BTreeSet<(SubLayer, u64)>,
    scanned: u64,
}

impl GlobalLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global_index(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn records(&self) -> &[GlobalRecord] {
        &self.records
    }

    pub fn contains(&self, origin: SubLayer, local_index: u64) -> bool {
        self.keys.contains(&(origin, local_index))
    }

    /// Absorbs newly committed entries of the top log.
    pub fn sync(&mut self, top: &LocalLog) {
        for e in top.slice(self.scanned + 1, top.commit_index()) {
            if let EntryKind::Global { origin, local_index, payload_hash, .. } = &e.kind {
                if self.keys.insert((*origin, *local_index)) {
                    self.records.push(GlobalRecord {
                        index: self.records.len() as u64 + 1,
                        term: e.term,
                        origin: *origin,
                        local_index: *local_index,
                        payload_hash: *payload_hash,
                    });
                }
            }
        }
        self.scanned = self.scanned.max(top.commit_index());
    }

    /// Newline-delimited `index,term,origin,payload_hash` records.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.index, r.term, r.origin, hex::encode(r.payload_hash));
        }
        out
    }
}

/// Does the top log (committed or not) already hold an entry for this key?
pub fn log_holds_batch(top: &LocalLog, key: &BatchKey) -> Option<u64> {
    top.entries().iter().rev().find_map(|e| match &e.kind {
        EntryKind::Global { origin, local_index, .. } if *origin == key.origin && *local_index == key.to => {
            Some(e.index)
        }
        _ => None,
    })
}
