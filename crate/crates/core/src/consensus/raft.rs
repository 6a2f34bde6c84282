//! One node's seat in one consensus group: terms, votes, log replication and
//! single-node membership changes. LH-Raft runs one seat per sub-layer it
//! belongs to; the classical baseline runs one flat seat.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::consensus::message::{Ballot, Body, ProtocolMessage};
use crate::ids::{NodeId, SubLayer, Term, Tick};
use crate::replication::log::{EntryKind, LocalLog, LogEntry, LogError, MembershipChange};
use crate::sim::engine::{Cx, TimerKey, TimerKind};
use crate::sim::observer::Observation;
use crate::sim::world::ProtocolParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// Which slice of the election window a seat draws its timeout from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutBand {
    /// `[min, max)`.
    Full,
    /// `[min, min + w/6)` with `w = max - min`.
    Early,
    /// `[min + w/3, max)`.
    Late,
}

impl TimeoutBand {
    pub fn range(self, min: Tick, max: Tick) -> (Tick, Tick) {
        let w = max.saturating_sub(min);
        match self {
            TimeoutBand::Full => (min, max),
            TimeoutBand::Early => (min, min + (w / 6).max(1)),
            TimeoutBand::Late => (min + w / 3, max),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MembershipError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("membership change at index {0} is still in flight")]
    InFlight(u64),
    #[error("leader has not committed an entry in its term yet")]
    TermNotCommitted,
    #[error("{0} is already a member")]
    AlreadyMember(NodeId),
    #[error("{0} is not a member")]
    NotMember(NodeId),
    #[error("group already at its cap of {0}")]
    AtCap(usize),
    #[error("cannot remove the last member")]
    LastMember,
}

pub struct RaftSeat {
    scope: SubLayer,
    me: NodeId,
    // Durable across crashes.
    term: Term,
    voted_for: Option<NodeId>,
    log: LocalLog,
    // Volatile.
    role: Role,
    leader: Option<NodeId>,
    votes: BTreeSet<NodeId>,
    next_index: BTreeMap<NodeId, u64>,
    match_index: BTreeMap<NodeId, u64>,
    // Configuration.
    base: Vec<NodeId>,
    members: Vec<NodeId>,
    pending_change: Option<u64>,
    cap: usize,
    group: Ballot,
    band: TimeoutBand,
    active: bool,
    /// Grants votes without consulting `voted_for`. Test-only defect.
    canary: bool,
}

impl RaftSeat {
    pub fn new(scope: SubLayer, me: NodeId, members: Vec<NodeId>, cap: usize) -> Self {
        let mut s = RaftSeat {
            scope,
            me,
            term: 0,
            voted_for: None,
            log: LocalLog::new(),
            role: Role::Follower,
            leader: None,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            base: members,
            members: Vec::new(),
            pending_change: None,
            cap,
            group: Ballot::default(),
            band: TimeoutBand::Full,
            active: false,
            canary: false,
        };
        s.recompute_members();
        s
    }

    pub fn scope(&self) -> SubLayer {
        self.scope
    }
    pub fn term(&self) -> Term {
        self.term
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }
    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }
    pub fn log(&self) -> &LocalLog {
        &self.log
    }
    pub fn members(&self) -> &[NodeId] {
        &self.members
    }
    pub fn is_member(&self) -> bool {
        self.members.contains(&self.me)
    }
    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }
    pub fn is_active(&self) -> bool {
        self.active
    }
    pub fn set_band(&mut self, band: TimeoutBand) {
        self.band = band;
    }
    pub fn set_group(&mut self, group: Ballot) {
        self.group = group;
    }
    pub fn set_canary(&mut self, canary: bool) {
        self.canary = canary;
    }

    fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    fn msg(&self, body: Body) -> ProtocolMessage {
        ProtocolMessage::new(self.scope, body)
    }

    fn key(&self, kind: TimerKind) -> TimerKey {
        TimerKey::new(self.scope, kind)
    }

    /// Members come from the base group followed by every membership entry
    /// in the log, committed or not.
    fn recompute_members(&mut self) {
        let mut members = self.base.clone();
        self.pending_change = None;
        for e in self.log.entries() {
            if let EntryKind::Membership(c) = &e.kind {
                match *c {
                    MembershipChange::Add(n) if !members.contains(&n) => members.push(n),
                    MembershipChange::Remove(n) => members.retain(|&m| m != n),
                    MembershipChange::Add(_) => {}
                }
                if e.index > self.log.commit_index() {
                    self.pending_change = Some(e.index);
                }
            }
        }
        self.members = members;
    }

    fn params<'a>(cx: &'a Cx<'_>) -> &'a ProtocolParams {
        &cx.world.params
    }

    pub fn arm_election(&mut self, cx: &mut Cx<'_>) {
        let p = Self::params(cx);
        let (lo, hi) = self.band.range(p.election_min, p.election_max);
        let d = cx.uniform(lo, hi);
        cx.set_timer(self.key(TimerKind::Election), d);
    }

    /// Starts election timers. Idempotent.
    pub fn activate(&mut self, cx: &mut Cx<'_>) {
        if !self.active {
            self.active = true;
            if self.role != Role::Leader {
                self.arm_election(cx);
            }
        }
    }

    pub fn deactivate(&mut self, cx: &mut Cx<'_>) {
        self.active = false;
        cx.cancel_timer(self.key(TimerKind::Election));
        cx.cancel_timer(self.key(TimerKind::Heartbeat));
    }

    /// Drops volatile state.
    pub fn crash(&mut self) {
        self.role = Role::Follower;
        self.leader = None;
        self.votes.clear();
        self.next_index.clear();
        self.match_index.clear();
        self.active = false;
    }

    fn adopt_term(&mut self, term: Term, cx: &mut Cx<'_>) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
            self.leader = None;
            self.become_follower(cx);
        }
    }

    fn become_follower(&mut self, cx: &mut Cx<'_>) {
        if self.role == Role::Leader {
            cx.cancel_timer(self.key(TimerKind::Heartbeat));
            cx.observe(Observation::SteppedDown { scope: self.scope, node: self.me, term: self.term });
        }
        self.role = Role::Follower;
        self.votes.clear();
    }

    /// Voluntary step-down, e.g. after a voided confirmation round.
    pub fn step_down(&mut self, cx: &mut Cx<'_>) {
        if self.role != Role::Follower {
            self.become_follower(cx);
            self.leader = None;
            if self.active {
                self.arm_election(cx);
            }
        }
    }

    pub fn on_timer(&mut self, kind: TimerKind, cx: &mut Cx<'_>) {
        match kind {
            TimerKind::Election if self.active && self.role != Role::Leader => self.start_election(cx),
            TimerKind::Heartbeat if self.role == Role::Leader => {
                self.broadcast_append(cx);
                let hb = Self::params(cx).heartbeat;
                cx.set_timer(self.key(TimerKind::Heartbeat), hb);
            }
            _ => {}
        }
    }

    fn start_election(&mut self, cx: &mut Cx<'_>) {
        self.arm_election(cx);
        if !self.is_member() {
            return;
        }
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.me);
        self.leader = None;
        self.votes = BTreeSet::from([self.me]);
        cx.observe(Observation::Candidacy { scope: self.scope, node: self.me, term: self.term });
        cx.observe(Observation::VoteGranted { scope: self.scope, voter: self.me, term: self.term, candidate: self.me });
        if self.votes.len() >= self.majority() {
            self.become_leader(cx);
            return;
        }
        let rv = self.msg(Body::RequestVotes {
            term: self.term,
            last_log_index: self.log.last_index(),
            last_log_term: self.log.last_term(),
            group: self.group,
        });
        let others: Vec<NodeId> = self.members.iter().copied().filter(|&m| m != self.me).collect();
        cx.broadcast(&others, &rv);
    }

    pub fn on_request_votes(&mut self, from: NodeId, term: Term, last_index: u64, last_term: Term, cx: &mut Cx<'_>) {
        self.adopt_term(term, cx);
        let up_to_date = (last_term, last_index) >= (self.log.last_term(), self.log.last_index());
        let free = self.canary || self.voted_for.is_none() || self.voted_for == Some(from);
        let granted = term == self.term && self.role == Role::Follower && up_to_date && free;
        if granted {
            self.voted_for = Some(from);
            cx.observe(Observation::VoteGranted { scope: self.scope, voter: self.me, term, candidate: from });
            if self.active {
                self.arm_election(cx);
            }
        }
        let reply = self.msg(Body::Vote { term: self.term, granted });
        cx.send(from, reply);
    }

    /// Returns `true` if this vote made the seat leader.
    pub fn on_vote(&mut self, from: NodeId, term: Term, granted: bool, cx: &mut Cx<'_>) -> bool {
        self.adopt_term(term, cx);
        if self.role != Role::Candidate || term != self.term || !granted {
            return false;
        }
        self.votes.insert(from);
        let support = self.votes.iter().filter(|v| self.members.contains(v)).count();
        if support >= self.majority() {
            self.become_leader(cx);
            return true;
        }
        false
    }

    fn become_leader(&mut self, cx: &mut Cx<'_>) {
        self.role = Role::Leader;
        self.leader = Some(self.me);
        self.votes.clear();
        cx.cancel_timer(self.key(TimerKind::Election));
        cx.observe(Observation::BecameLeader { scope: self.scope, node: self.me, term: self.term });
        let next = self.log.last_index() + 1;
        self.next_index = self.members.iter().map(|&m| (m, next)).collect();
        self.match_index = self.members.iter().map(|&m| (m, 0)).collect();
        self.append_local(EntryKind::LeaderStatus, cx);
        self.broadcast_append(cx);
        let hb = Self::params(cx).heartbeat;
        cx.set_timer(self.key(TimerKind::Heartbeat), hb);
        self.advance_commit(cx);
    }

    fn append_local(&mut self, kind: EntryKind, cx: &mut Cx<'_>) -> u64 {
        let is_config = matches!(kind, EntryKind::Membership(_));
        let e = self.log.append_new(self.term, kind, self.scope.layer);
        cx.observe(Observation::Appended {
            scope: self.scope,
            node: self.me,
            index: e.index,
            term: e.term,
            chain: e.chain,
        });
        let index = e.index;
        if is_config {
            self.recompute_members();
            let next = self.log.last_index() + 1;
            for &m in &self.members {
                self.next_index.entry(m).or_insert(next);
                self.match_index.entry(m).or_insert(0);
            }
        }
        index
    }

    /// Leader-side client append. Non-leaders return the known leader.
    pub fn propose(&mut self, kind: EntryKind, cx: &mut Cx<'_>) -> Result<u64, LogError> {
        if self.role != Role::Leader {
            return Err(LogError::NotLeader { hint: self.leader });
        }
        let index = self.append_local(kind, cx);
        self.broadcast_append(cx);
        self.advance_commit(cx);
        Ok(index)
    }

    /// Appends several entries and replicates them in one round.
    pub fn propose_all(&mut self, kinds: Vec<EntryKind>, cx: &mut Cx<'_>) -> Result<Vec<u64>, LogError> {
        if self.role != Role::Leader {
            return Err(LogError::NotLeader { hint: self.leader });
        }
        let indices = kinds.into_iter().map(|k| self.append_local(k, cx)).collect();
        self.broadcast_append(cx);
        self.advance_commit(cx);
        Ok(indices)
    }

    /// Proposes a single-node membership change. Only one change may be in
    /// flight, and only after the leader committed an entry of its own term.
    pub fn propose_membership(&mut self, change: MembershipChange, cx: &mut Cx<'_>) -> Result<u64, MembershipError> {
        if self.role != Role::Leader {
            return Err(LogError::NotLeader { hint: self.leader }.into());
        }
        if let Some(i) = self.pending_change {
            return Err(MembershipError::InFlight(i));
        }
        if self.log.term_at(self.log.commit_index()) != Some(self.term) {
            return Err(MembershipError::TermNotCommitted);
        }
        match change {
            MembershipChange::Add(n) if self.members.contains(&n) => return Err(MembershipError::AlreadyMember(n)),
            MembershipChange::Add(_) if self.members.len() >= self.cap => return Err(MembershipError::AtCap(self.cap)),
            MembershipChange::Remove(n) if !self.members.contains(&n) => return Err(MembershipError::NotMember(n)),
            MembershipChange::Remove(_) if self.members.len() == 1 => return Err(MembershipError::LastMember),
            _ => {}
        }
        let index = self.append_local(EntryKind::Membership(change), cx);
        self.broadcast_append(cx);
        self.advance_commit(cx);
        Ok(index)
    }

    fn broadcast_append(&mut self, cx: &mut Cx<'_>) {
        let peers: Vec<NodeId> = self.members.iter().copied().filter(|&m| m != self.me).collect();
        for p in peers {
            self.send_append(p, cx);
        }
    }

    /// Sends the entries from the peer's next index on, optimistically
    /// advancing it so pipelined sends do not repeat entries.
    fn send_append(&mut self, to: NodeId, cx: &mut Cx<'_>) {
        let last = self.log.last_index();
        let next = self.next_index.get(&to).copied().unwrap_or(last + 1).clamp(1, last + 1);
        let max = Self::params(cx).max_entries_per_append as u64;
        let upto = last.min(next + max.max(1) - 1);
        let entries: Vec<LogEntry> = self.log.slice(next, upto).to_vec();
        let prev_log_index = next - 1;
        let msg = self.msg(Body::AppendEntries {
            term: self.term,
            prev_log_index,
            prev_log_term: self.log.term_at(prev_log_index).unwrap_or(0),
            entries,
            leader_commit: self.log.commit_index(),
            leader_local_index: self.log.local_index(),
        });
        self.next_index.insert(to, upto.max(prev_log_index) + 1);
        cx.send(to, msg);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_append_entries(
        &mut self,
        from: NodeId,
        term: Term,
        prev_index: u64,
        prev_term: Term,
        entries: &[LogEntry],
        leader_commit: u64,
        leader_local_index: u64,
        cx: &mut Cx<'_>,
    ) {
        let fail = |s: &Self, hint: u64| {
            s.msg(Body::AppendReply { term: s.term, success: false, match_index: hint, appended: 0 })
        };
        if term < self.term {
            cx.send(from, fail(self, 0));
            return;
        }
        self.adopt_term(term, cx);
        if self.role != Role::Follower {
            self.become_follower(cx);
        }
        self.leader = Some(from);
        if self.active {
            self.arm_election(cx);
        }
        let outcome = match self.log.try_append(prev_index, prev_term, entries) {
            Ok(Some(o)) => o,
            Ok(None) => {
                let hint = self.log.last_index().min(prev_index.saturating_sub(1));
                cx.send(from, fail(self, hint));
                return;
            }
            Err(LogError::TruncateCommitted { index, .. }) => {
                cx.observe(Observation::TruncationRefused { scope: self.scope, node: self.me, index });
                cx.send(from, fail(self, self.log.commit_index()));
                return;
            }
            Err(LogError::NotLeader { .. }) => unreachable!("try_append never reports NotLeader"),
        };
        if let Some((index, chain)) = outcome.truncated {
            cx.observe(Observation::Truncated { scope: self.scope, node: self.me, index, chain });
        }
        let mut config_touched = outcome.truncated.is_some();
        for &i in &outcome.written {
            let e = self.log.get(i).expect("just written");
            config_touched |= matches!(e.kind, EntryKind::Membership(_));
            cx.observe(Observation::Appended {
                scope: self.scope,
                node: self.me,
                index: i,
                term: e.term,
                chain: e.chain,
            });
        }
        if config_touched {
            self.recompute_members();
        }
        let matched = prev_index + entries.len() as u64;
        self.commit_through(leader_commit.min(matched), cx);
        self.set_local_index(leader_local_index, cx);
        let reply = self.msg(Body::AppendReply {
            term: self.term,
            success: true,
            match_index: matched,
            appended: entries.len() as u32,
        });
        cx.send(from, reply);
    }

    /// Heartbeats to non-members carry the leader's cursors; they never
    /// touch the log.
    pub fn on_heartbeat(&mut self, from: NodeId, term: Term, cx: &mut Cx<'_>) {
        if term >= self.term {
            self.adopt_term(term, cx);
            self.leader = Some(from);
        }
    }

    pub fn on_append_reply(&mut self, from: NodeId, term: Term, success: bool, match_index: u64, cx: &mut Cx<'_>) {
        self.adopt_term(term, cx);
        if self.role != Role::Leader || term != self.term {
            return;
        }
        if success {
            let m = self.match_index.entry(from).or_insert(0);
            *m = (*m).max(match_index);
            let n = self.next_index.entry(from).or_insert(match_index + 1);
            *n = (*n).max(match_index + 1);
            self.advance_commit(cx);
            if self.role == Role::Leader && self.next_index[&from] <= self.log.last_index() {
                self.send_append(from, cx);
            }
        } else {
            let n = self.next_index.entry(from).or_insert(1);
            *n = (match_index + 1).min(*n).max(1);
            self.send_append(from, cx);
        }
    }

    fn advance_commit(&mut self, cx: &mut Cx<'_>) {
        let commit = self.log.commit_index();
        let mut target = None;
        for n in (commit + 1..=self.log.last_index()).rev() {
            if self.log.term_at(n) != Some(self.term) {
                break;
            }
            let acks = self
                .members
                .iter()
                .filter(|&&m| if m == self.me { true } else { self.match_index.get(&m).is_some_and(|&x| x >= n) })
                .count();
            if acks >= self.majority() {
                target = Some(n);
                break;
            }
        }
        if let Some(n) = target {
            self.commit_through(n, cx);
        }
    }

    fn commit_through(&mut self, index: u64, cx: &mut Cx<'_>) {
        let range = self.log.commit_to(index);
        let mut config_committed = false;
        for i in range {
            let e = self.log.get(i).expect("committed entries exist");
            let tx = matches!(e.kind, EntryKind::Transaction(_)).then(|| e.kind.payload_hash());
            cx.observe(Observation::Committed {
                scope: self.scope,
                node: self.me,
                index: i,
                term: e.term,
                chain: e.chain,
                tx,
            });
            if let EntryKind::Membership(change) = e.kind {
                config_committed = true;
                cx.observe(Observation::MembershipCommitted { scope: self.scope, node: self.me, change });
            }
        }
        if config_committed {
            self.recompute_members();
            if self.role == Role::Leader && !self.is_member() {
                self.step_down(cx);
            }
        }
    }

    /// Raises the global cursor (leader: after an upper-layer ack; follower:
    /// from a leader's piggybacked value).
    pub fn set_local_index(&mut self, index: u64, cx: &mut Cx<'_>) {
        let before = self.log.local_index();
        self.log.set_local_index(index);
        if self.log.local_index() != before {
            cx.observe(Observation::Cursor {
                scope: self.scope,
                node: self.me,
                local_index: self.log.local_index(),
                commit_index: self.log.commit_index(),
            });
        }
    }

    /// Dispatches the Raft message kinds. Returns `true` if the seat became
    /// leader while handling it.
    pub fn handle(&mut self, from: NodeId, body: &Body, cx: &mut Cx<'_>) -> bool {
        match body {
            Body::RequestVotes { term, last_log_index, last_log_term, .. } => {
                self.on_request_votes(from, *term, *last_log_index, *last_log_term, cx);
            }
            Body::Vote { term, granted } => return self.on_vote(from, *term, *granted, cx),
            Body::AppendEntries { term, prev_log_index, prev_log_term, entries, leader_commit, leader_local_index } => {
                self.on_append_entries(
                    from,
                    *term,
                    *prev_log_index,
                    *prev_log_term,
                    entries,
                    *leader_commit,
                    *leader_local_index,
                    cx,
                );
            }
            Body::AppendReply { term, success, match_index, .. } => {
                self.on_append_reply(from, *term, *success, *match_index, cx);
            }
            _ => {}
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_partition_the_window() {
        assert_eq!(TimeoutBand::Full.range(150, 300), (150, 300));
        assert_eq!(TimeoutBand::Early.range(150, 300), (150, 175));
        assert_eq!(TimeoutBand::Late.range(150, 300), (200, 300));
    }
}
