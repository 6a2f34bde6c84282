use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ids::{Layer, NodeId, SubLayer, Term};

pub type Hash32 = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("not the leader (hint: {hint:?})")]
    NotLeader { hint: Option<NodeId> },
    #[error("would truncate committed index {index} (commit {commit})")]
    TruncateCommitted { index: u64, commit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MembershipChange {
    Add(NodeId),
    Remove(NodeId),
}

impl MembershipChange {
    pub fn node(self) -> NodeId {
        match self {
            MembershipChange::Add(n) | MembershipChange::Remove(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    /// Appended by every new leader; lets it commit prior-term entries.
    LeaderStatus,
    Transaction(Vec<u8>),
    Membership(MembershipChange),
    /// One local entry inserted into the global log.
    Global {
        origin: SubLayer,
        local_index: u64,
        local_term: Term,
        payload_hash: Hash32,
    },
}

impl EntryKind {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            EntryKind::LeaderStatus => out.push(0),
            EntryKind::Transaction(p) => {
                out.push(1);
                out.extend_from_slice(&(p.len() as u64).to_le_bytes());
                out.extend_from_slice(p);
            }
            EntryKind::Membership(c) => {
                let (tag, n) = match c {
                    MembershipChange::Add(n) => (2, n),
                    MembershipChange::Remove(n) => (3, n),
                };
                out.push(tag);
                out.extend_from_slice(&n.0.to_le_bytes());
            }
            EntryKind::Global { origin, local_index, local_term, payload_hash } => {
                out.push(4);
                out.push(origin.layer as u8);
                out.extend_from_slice(&origin.index.to_le_bytes());
                out.extend_from_slice(&local_index.to_le_bytes());
                out.extend_from_slice(&local_term.to_le_bytes());
                out.extend_from_slice(payload_hash);
            }
        }
    }

    pub fn payload_hash(&self) -> Hash32 {
        let mut buf = Vec::new();
        self.encode(&mut buf);
        Sha256::digest(&buf).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: Term,
    pub index: u64,
    pub kind: EntryKind,
    pub origin_layer: Layer,
    /// Hash over the whole prefix ending at this entry. Recomputed by every
    /// appender from its own predecessor, so equal chains imply equal prefixes.
    pub chain: Hash32,
}

fn chain_hash(prev: &Hash32, term: Term, index: u64, kind: &EntryKind) -> Hash32 {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(term.to_le_bytes());
    h.update(index.to_le_bytes());
    let mut buf = Vec::new();
    kind.encode(&mut buf);
    h.update(&buf);
    h.finalize().into()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppendOutcome {
    /// Indices newly written, ascending.
    pub written: Vec<u64>,
    /// First removed index and its chain hash, if a suffix was dropped.
    pub truncated: Option<(u64, Hash32)>,
}

/// A sub-layer's replicated log with its commit and global cursors.
///
/// Invariant: `local_index <= commit_index <= last_index`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocalLog {
    entries: Vec<LogEntry>,
    commit_index: u64,
    local_index: u64,
}

impl LocalLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_index(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn last_term(&self) -> Term {
        self.entries.last().map_or(0, |e| e.term)
    }

    pub fn term_at(&self, index: u64) -> Option<Term> {
        match index {
            0 => Some(0),
            i => self.entries.get(i as usize - 1).map(|e| e.term),
        }
    }

    pub fn get(&self, index: u64) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.entries.get(i as usize))
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Entries with index in `from..=to`.
    pub fn slice(&self, from: u64, to: u64) -> &[LogEntry] {
        let lo = (from.max(1) - 1) as usize;
        let hi = (to as usize).min(self.entries.len());
        if lo >= hi {
            &[]
        } else {
            &self.entries[lo..hi]
        }
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn local_index(&self) -> u64 {
        self.local_index
    }

    fn prev_chain(&self) -> Hash32 {
        self.entries.last().map_or([0; 32], |e| e.chain)
    }

    /// Leader-side append.
    pub fn append_new(&mut self, term: Term, kind: EntryKind, origin_layer: Layer) -> &LogEntry {
        let index = self.last_index() + 1;
        let chain = chain_hash(&self.prev_chain(), term, index, &kind);
        self.entries.push(LogEntry { term, index, kind, origin_layer, chain });
        self.entries.last().expect("just pushed")
    }

    /// Follower-side consistency check and append. Returns `None` if the log
    /// does not contain `(prev_index, prev_term)`. Conflicting suffixes are
    /// truncated; the committed prefix is never touched.
    pub fn try_append(
        &mut self,
        prev_index: u64,
        prev_term: Term,
        incoming: &[LogEntry],
    ) -> Result<Option<AppendOutcome>, LogError> {
        if self.term_at(prev_index) != Some(prev_term) {
            return Ok(None);
        }
        let mut out = AppendOutcome::default();
        for (offset, e) in incoming.iter().enumerate() {
            let index = prev_index + 1 + offset as u64;
            if index <= self.last_index() {
                if self.term_at(index) == Some(e.term) {
                    continue;
                }
                if index <= self.commit_index {
                    return Err(LogError::TruncateCommitted { index, commit: self.commit_index });
                }
                let removed = self.get(index).expect("index <= last").chain;
                out.truncated.get_or_insert((index, removed));
                self.entries.truncate(index as usize - 1);
            }
            let chain = chain_hash(&self.prev_chain(), e.term, index, &e.kind);
            self.entries.push(LogEntry {
                term: e.term,
                index,
                kind: e.kind.clone(),
                origin_layer: e.origin_layer,
                chain,
            });
            out.written.push(index);
        }
        Ok(Some(out))
    }

    /// Raises the commit index (never lowers it). Returns the newly committed range.
    pub fn commit_to(&mut self, index: u64) -> std::ops::RangeInclusive<u64> {
        let target = index.min(self.last_index());
        let from = self.commit_index + 1;
        if target > self.commit_index {
            self.commit_index = target;
        }
        from..=target
    }

    /// Raises `local_index`, clamped to the commit index.
    pub fn set_local_index(&mut self, index: u64) {
        self.local_index = self.local_index.max(index.min(self.commit_index));
    }

    /// Newline-delimited `index,term,payload_hash` for the committed prefix.
    pub fn export_committed(&self) -> String {
        let mut out = String::new();
        for e in self.slice(1, self.commit_index) {
            out.push_str(&format!("{},{},{}\n", e.index, e.term, hex::encode(e.kind.payload_hash())));
        }
        out
    }

    /// Entries `(local_index, local_index + batch]` when at least `batch`
    /// committed entries are buffered.
    pub fn next_batch(&self, batch: u64) -> Option<&[LogEntry]> {
        if batch == 0 || self.commit_index < self.local_index + batch {
            return None;
        }
        Some(self.slice(self.local_index + 1, self.local_index + batch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(b: u8) -> EntryKind {
        EntryKind::Transaction(vec![b])
    }

    fn leader_log(terms: &[Term]) -> LocalLog {
        let mut l = LocalLog::new();
        for (i, &t) in terms.iter().enumerate() {
            l.append_new(t, tx(i as u8), Layer::Leaf);
        }
        l
    }

    #[test]
    fn append_and_terms() {
        let l = leader_log(&[1, 1, 2]);
        assert_eq!(l.last_index(), 3);
        assert_eq!(l.last_term(), 2);
        assert_eq!(l.term_at(0), Some(0));
        assert_eq!(l.term_at(4), None);
        assert_eq!(l.slice(2, 3).len(), 2);
        assert!(l.slice(4, 9).is_empty());
    }

    #[test]
    fn follower_repairs_divergent_suffix() {
        let leader = leader_log(&[1, 1, 3, 3]);
        let mut follower = leader_log(&[1, 1, 2, 2, 2]);
        follower.commit_to(2);
        let old = follower.get(3).unwrap().chain;
        let got = follower.try_append(2, 1, leader.slice(3, 4)).unwrap().unwrap();
        assert_eq!(got.written, vec![3, 4]);
        assert_eq!(got.truncated, Some((3, old)));
        assert_eq!(follower.entries(), leader.entries());
    }

    #[test]
    fn rejects_missing_prev() {
        let mut f = leader_log(&[1]);
        assert_eq!(f.try_append(3, 1, &[]).unwrap(), None);
        assert_eq!(f.try_append(1, 2, &[]).unwrap(), None);
    }

    #[test]
    fn refuses_to_truncate_committed() {
        let leader = leader_log(&[1, 4]);
        let mut f = leader_log(&[1, 2]);
        f.commit_to(2);
        assert_eq!(f.try_append(1, 1, leader.slice(2, 2)), Err(LogError::TruncateCommitted { index: 2, commit: 2 }));
    }

    #[test]
    fn duplicate_append_is_idempotent() {
        let leader = leader_log(&[1, 1]);
        let mut f = LocalLog::new();
        f.try_append(0, 0, leader.slice(1, 2)).unwrap();
        let again = f.try_append(0, 0, leader.slice(1, 2)).unwrap().unwrap();
        assert!(again.written.is_empty());
        assert_eq!(f.entries(), leader.entries());
    }

    #[test]
    fn chains_differ_when_prefix_differs() {
        let a = leader_log(&[1, 2]);
        let mut b = LocalLog::new();
        b.append_new(1, tx(9), Layer::Leaf);
        b.append_new(2, tx(1), Layer::Leaf);
        assert_eq!(a.get(2).unwrap().kind, b.get(2).unwrap().kind);
        assert_ne!(a.get(2).unwrap().chain, b.get(2).unwrap().chain);
    }

    #[test]
    fn batch_cursor_arithmetic() {
        let mut l = leader_log(&[1, 1, 1, 1, 1]);
        l.commit_to(4);
        l.set_local_index(2);
        let b: Vec<u64> = l.next_batch(2).unwrap().iter().map(|e| e.index).collect();
        assert_eq!(b, vec![3, 4]);
        l.set_local_index(4);
        assert!(l.next_batch(1).is_none());
        l.commit_to(5);
        assert_eq!(l.next_batch(1).unwrap()[0].index, 5);
        l.set_local_index(99);
        assert_eq!(l.local_index(), 5);
        l.commit_to(1);
        assert_eq!(l.commit_index(), 5);
    }
}
