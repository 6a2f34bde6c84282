//! The LH-Raft node. A node holds one layer state per sub-layer it
//! participates in. Each sub-layer runs:
//!
//! 1. candidate-group formation: a follower whose setup timer fires collects
//!    CGF scores from nearby nodes and gets a majority of the sub-layer to
//!    accept the top-`M` group (prepare/accept with ballots, so at most one
//!    group is ever committed per sub-layer);
//! 2. candidate notice and a Raft election restricted to the group;
//! 3. for upper layers, threshold-signature confirmation of the winner;
//! 4. local replication, geographic rechecks, and (leaf leaders) batched
//!    proposals of committed entries to the top leader's global log.

use std::collections::{BTreeMap, BTreeSet};

use crate::cgf::solve_cgf;
use crate::consensus::message::{Ballot, Body, GroupProposal, ProtocolMessage};
use crate::consensus::raft::{RaftSeat, Role, TimeoutBand};
use crate::crypto::{sign, MessageDigest, OneTimeSignature, ThresholdSignatureBundle};
use crate::geo::{haversine_distance, identity_message, mac_for, GeoRecord};
use crate::ids::{Layer, NodeId, SubLayer, Term};
use crate::replication::global::{log_holds_batch, propose_global_batch, BatchItem, BatchKey, GlobalLog};
use crate::replication::log::{EntryKind, Hash32, LogError, MembershipChange};
use crate::reputation::NodeScore;
use crate::sim::engine::{Control, Cx, Node, TimerKey, TimerKind};
use crate::sim::observer::Observation;
use crate::sim::world::CandidateTimer;

struct Promise {
    score: f64,
    accepted: Option<GroupProposal>,
}

enum Setup {
    Idle,
    Preparing { ballot: Ballot, promises: BTreeMap<NodeId, Promise> },
    Accepting { proposal: GroupProposal, acks: BTreeSet<NodeId> },
}

struct Confirmation {
    term: Term,
    shares: BTreeMap<NodeId, OneTimeSignature>,
    valid: BTreeSet<NodeId>,
    rejected: BTreeSet<NodeId>,
}

#[derive(Default)]
struct GeoWatch {
    /// Position of each member at the start of the current window.
    window_start: BTreeMap<NodeId, GeoRecord>,
    /// Latest report and when it arrived.
    latest: BTreeMap<NodeId, GeoRecord>,
    reported: BTreeSet<NodeId>,
    evicted: BTreeSet<NodeId>,
}

struct LayerState {
    scope: SubLayer,
    raft: RaftSeat,
    // Acceptor state; durable.
    promised: Ballot,
    accepted: Option<GroupProposal>,
    committed: Option<GroupProposal>,
    // Initiator state.
    setup: Setup,
    round: u64,
    last_contact: u64,
    /// Leader accepted through a leader confirmation, with its term.
    confirmed: Option<(NodeId, Term)>,
    confirm: Option<Confirmation>,
    geo_watch: GeoWatch,
    batch_inflight: Option<BatchKey>,
    /// Top leader: batches awaiting commit, with the log index of their last item.
    batch_waiters: BTreeMap<BatchKey, (NodeId, u64)>,
    global: GlobalLog,
}

impl LayerState {
    fn new(scope: SubLayer, me: NodeId) -> Self {
        LayerState {
            scope,
            raft: RaftSeat::new(scope, me, Vec::new(), 0),
            promised: Ballot::default(),
            accepted: None,
            committed: None,
            setup: Setup::Idle,
            round: 0,
            last_contact: 0,
            confirmed: None,
            confirm: None,
            geo_watch: GeoWatch::default(),
            batch_inflight: None,
            batch_waiters: BTreeMap::new(),
            global: GlobalLog::new(),
        }
    }
}

pub struct LhNode {
    id: NodeId,
    geo: GeoRecord,
    frozen: bool,
    tamper: bool,
    layers: BTreeMap<SubLayer, LayerState>,
    /// Digests this node has issued a one-time signature over. Reuse is
    /// observed, not refused.
    signed: BTreeSet<Hash32>,
}

impl LhNode {
    pub fn new(id: NodeId, geo: GeoRecord) -> Self {
        LhNode { id, geo, frozen: false, tamper: false, layers: BTreeMap::new(), signed: BTreeSet::new() }
    }

    pub fn seat(&self, scope: SubLayer) -> Option<&RaftSeat> {
        self.layers.get(&scope).map(|l| &l.raft)
    }

    pub fn scopes(&self) -> impl Iterator<Item = SubLayer> + '_ {
        self.layers.keys().copied()
    }

    pub fn committed_group(&self, scope: SubLayer) -> Option<&[NodeId]> {
        self.layers.get(&scope)?.committed.as_ref().map(|p| p.members.as_slice())
    }

    pub fn global_log(&self, scope: SubLayer) -> Option<&GlobalLog> {
        self.layers.get(&scope).map(|l| &l.global)
    }

    /// Leader that may act for its sub-layer: elected and, above the leaf
    /// layer, threshold-confirmed in its current term.
    pub fn is_established(&self, scope: SubLayer) -> bool {
        self.layers.get(&scope).is_some_and(|l| established(l, self.id))
    }

    fn layer(&mut self, scope: SubLayer) -> &mut LayerState {
        self.layers.get_mut(&scope).expect("joined")
    }

    fn geo_fresh(&self, cx: &Cx<'_>) -> bool {
        cx.now.saturating_sub(self.geo.timestamp) <= cx.world.params.geo_window
    }

    fn refresh_geo(&mut self, cx: &Cx<'_>) {
        if !self.frozen {
            self.geo = self.geo.refreshed(cx.now);
        }
    }

    fn join(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let l = self.layers.entry(scope).or_insert_with(|| LayerState::new(scope, me));
        l.raft.set_canary(cx.world.canary.contains(&me));
        l.last_contact = cx.now;
        if l.committed.is_some() && l.raft.is_member() {
            l.raft.activate(cx);
        }
        let p = cx.world.params;
        let d = cx.uniform(p.election_min, p.election_max);
        cx.set_timer(TimerKey::new(scope, TimerKind::SetupWait), d);
        let g = cx.uniform(1, p.geo_window / 2 + 1);
        cx.set_timer(TimerKey::new(scope, TimerKind::GeoReport), g);
    }

    fn nearby(cx: &Cx<'_>, scope: SubLayer, me: NodeId) -> Vec<NodeId> {
        cx.world.sublayer(scope).map(|s| s.nearby(me).to_vec()).unwrap_or_default()
    }

    fn sublayer_members(cx: &Cx<'_>, scope: SubLayer) -> Vec<NodeId> {
        cx.world.sublayer(scope).map(|s| s.members.clone()).unwrap_or_default()
    }

    // ---- candidate-group formation ----

    fn start_setup(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let Some(score) = cx.world.score(scope, me) else { return };
        let fresh = self.geo_fresh(cx);
        let l = self.layer(scope);
        l.round = l.round.max(l.promised.round) + 1;
        let ballot = Ballot { round: l.round, node: me };
        let mut promises = BTreeMap::new();
        if fresh && ballot > l.promised {
            l.promised = ballot;
            promises.insert(me, Promise { score, accepted: l.accepted.clone().or_else(|| l.committed.clone()) });
        }
        l.setup = Setup::Preparing { ballot, promises };
        let msg = ProtocolMessage::new(scope, Body::FormGroup { ballot });
        cx.broadcast(&Self::nearby(cx, scope, me), &msg);
        let wait = cx.world.params.setup_wait;
        cx.set_timer(TimerKey::new(scope, TimerKind::SetupWait), wait);
    }

    fn on_form_group(&mut self, from: NodeId, scope: SubLayer, ballot: Ballot, cx: &mut Cx<'_>) {
        if !self.geo_fresh(cx) {
            return;
        }
        let Some(score) = cx.world.score(scope, self.id) else { return };
        let l = self.layer(scope);
        if ballot <= l.promised {
            return;
        }
        l.promised = ballot;
        if !matches!(l.setup, Setup::Idle) {
            l.setup = Setup::Idle;
        }
        let (accepted, committed) = match &l.committed {
            Some(p) => (Some(p.clone()), true),
            None => (l.accepted.clone(), false),
        };
        let reply = ProtocolMessage::new(scope, Body::CgfReply { ballot, score, accepted, committed });
        cx.send(from, reply);
        if l.committed.is_none() {
            Self::backoff_setup(scope, cx);
        }
    }

    /// An acceptor that promised or accepted gives the initiator a full
    /// watch window before competing with it.
    fn backoff_setup(scope: SubLayer, cx: &mut Cx<'_>) {
        Self::arm_follower_watch(scope, cx);
    }

    /// The initiator's wait is a no-progress timeout.
    fn extend_setup(scope: SubLayer, cx: &mut Cx<'_>) {
        let wait = cx.world.params.setup_wait;
        cx.set_timer(TimerKey::new(scope, TimerKind::SetupWait), wait);
    }

    fn on_cgf_reply(
        &mut self,
        from: NodeId,
        scope: SubLayer,
        ballot: Ballot,
        score: f64,
        accepted: Option<GroupProposal>,
        committed: bool,
        cx: &mut Cx<'_>,
    ) {
        let l = self.layer(scope);
        if committed {
            if let Some(p) = accepted {
                l.setup = Setup::Idle;
                self.install_group(scope, p, cx);
            }
            return;
        }
        // A member that missed the commit broadcast learns it from anyone who holds it.
        if let Some(p) = l.committed.clone() {
            cx.send(from, ProtocolMessage::new(scope, Body::GroupCommit { proposal: p }));
        }
        let promises = match &mut l.setup {
            Setup::Preparing { ballot: mine, promises } if *mine == ballot => promises,
            Setup::Accepting { proposal, .. } if proposal.ballot == ballot => {
                Self::extend_setup(scope, cx);
                return;
            }
            _ => return,
        };
        promises.insert(from, Promise { score, accepted });
        Self::extend_setup(scope, cx);
        let n = promises.len();
        let size = cx.world.sublayer(scope).map_or(0, |s| s.members.len());
        let cap = cx.world.sublayer(scope).map_or(0, |s| s.cap);
        if n >= size.min(cap).max(majority(size)) {
            self.announce(scope, cx);
        }
    }

    /// Adopts the highest-ballot accepted group among the promises, or
    /// solves CGF over the reported scores.
    fn announce(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let cap = cx.world.sublayer(scope).map_or(1, |s| s.cap);
        let l = self.layer(scope);
        let Setup::Preparing { ballot, promises } = &l.setup else { return };
        let ballot = *ballot;
        let prior = promises.values().filter_map(|p| p.accepted.as_ref()).max_by_key(|p| p.ballot).cloned();
        let members = match prior {
            Some(p) => p.members,
            None => {
                let scores: Vec<NodeScore> = promises.iter().map(|(&n, p)| NodeScore::from_cgf(n, p.score)).collect();
                match solve_cgf(&scores, cap.min(scores.len()).max(1)) {
                    Ok(g) => g.members,
                    Err(_) => return,
                }
            }
        };
        let proposal = GroupProposal { ballot, members };
        let mut acks = BTreeSet::new();
        if ballot >= l.promised {
            l.promised = ballot;
            l.accepted = Some(proposal.clone());
            acks.insert(me);
        }
        l.setup = Setup::Accepting { proposal: proposal.clone(), acks };
        let msg = ProtocolMessage::new(scope, Body::GroupAnnounce { proposal });
        cx.broadcast(&Self::nearby(cx, scope, me), &msg);
        let wait = cx.world.params.setup_wait;
        cx.set_timer(TimerKey::new(scope, TimerKind::SetupWait), wait);
    }

    fn on_group_announce(&mut self, from: NodeId, scope: SubLayer, proposal: GroupProposal, cx: &mut Cx<'_>) {
        let l = self.layer(scope);
        if proposal.ballot < l.promised || l.committed.is_some() {
            return;
        }
        l.promised = proposal.ballot;
        let ballot = proposal.ballot;
        l.accepted = Some(proposal);
        cx.send(from, ProtocolMessage::new(scope, Body::GroupAck { ballot }));
        Self::backoff_setup(scope, cx);
    }

    fn on_group_ack(&mut self, from: NodeId, scope: SubLayer, ballot: Ballot, cx: &mut Cx<'_>) {
        let size = cx.world.sublayer(scope).map_or(0, |s| s.members.len());
        let l = self.layer(scope);
        let Setup::Accepting { proposal, acks } = &mut l.setup else { return };
        if proposal.ballot != ballot {
            return;
        }
        acks.insert(from);
        Self::extend_setup(scope, cx);
        if acks.len() >= majority(size) {
            let proposal = proposal.clone();
            l.setup = Setup::Idle;
            let others: Vec<NodeId> = Self::sublayer_members(cx, scope).into_iter().filter(|&n| n != self.id).collect();
            cx.broadcast(&others, &ProtocolMessage::new(scope, Body::GroupCommit { proposal: proposal.clone() }));
            self.install_group(scope, proposal, cx);
        }
    }

    /// Learns the committed group. Candidates notify the followers and arm
    /// their election timers; followers wait for a leader.
    fn install_group(&mut self, scope: SubLayer, proposal: GroupProposal, cx: &mut Cx<'_>) {
        let me = self.id;
        let cap = cx.world.sublayer(scope).map_or(proposal.members.len(), |s| s.cap);
        let policy = cx.world.params.candidate_timer;
        let l = self.layer(scope);
        if l.committed.is_some() {
            return;
        }
        l.accepted = Some(proposal.clone());
        l.committed = Some(proposal.clone());
        l.last_contact = cx.now;
        let mut raft = RaftSeat::new(scope, me, proposal.members.clone(), cap.max(proposal.members.len()));
        raft.set_group(proposal.ballot);
        raft.set_canary(cx.world.canary.contains(&me));
        let rank = proposal.members.iter().position(|&n| n == me);
        raft.set_band(match (policy, rank) {
            (CandidateTimer::CgfRanked, Some(0)) => TimeoutBand::Early,
            (CandidateTimer::CgfRanked, _) => TimeoutBand::Late,
            (CandidateTimer::Randomized, _) => TimeoutBand::Full,
        });
        l.raft = raft;
        cx.observe(Observation::GroupLearned { scope, node: me, members: proposal.members.clone() });
        if rank.is_some() {
            l.raft.activate(cx);
            cx.cancel_timer(TimerKey::new(scope, TimerKind::SetupWait));
            let followers: Vec<NodeId> =
                Self::sublayer_members(cx, scope).into_iter().filter(|n| !proposal.members.contains(n)).collect();
            cx.broadcast(&followers, &ProtocolMessage::new(scope, Body::CandidateNotice { ballot: proposal.ballot }));
        } else {
            Self::arm_follower_watch(scope, cx);
        }
    }

    /// Followers outside the group restart setup when the leader stays silent
    /// for longer than candidates need to elect a replacement.
    fn arm_follower_watch(scope: SubLayer, cx: &mut Cx<'_>) {
        let p = cx.world.params;
        let d = p.election_max + cx.uniform(p.election_min, p.election_max);
        cx.set_timer(TimerKey::new(scope, TimerKind::SetupWait), d);
    }

    fn on_setup_timer(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let l = self.layer(scope);
        match std::mem::replace(&mut l.setup, Setup::Idle) {
            Setup::Preparing { ballot, promises } => {
                let size = cx.world.sublayer(scope).map_or(0, |s| s.members.len());
                if promises.len() >= majority(size) {
                    l.setup = Setup::Preparing { ballot, promises };
                    self.announce(scope, cx);
                } else {
                    Self::backoff_setup(scope, cx);
                }
            }
            Setup::Accepting { .. } => Self::backoff_setup(scope, cx),
            Setup::Idle => {
                if l.committed.is_some() {
                    if l.raft.is_member() {
                        return;
                    }
                    let silent = cx.now.saturating_sub(l.last_contact) >= cx.world.params.election_max;
                    if silent {
                        self.start_setup(scope, cx);
                    } else {
                        Self::arm_follower_watch(scope, cx);
                    }
                } else {
                    self.start_setup(scope, cx);
                }
            }
        }
    }

    // ---- leadership ----

    fn after_raft(&mut self, scope: SubLayer, was: (Role, Term), became: bool, cx: &mut Cx<'_>) {
        let me = self.id;
        let l = self.layer(scope);
        if l.raft.is_member() && !l.raft.is_active() && l.committed.is_some() {
            l.raft.activate(cx);
            cx.cancel_timer(TimerKey::new(scope, TimerKind::SetupWait));
        }
        let now_leader = l.raft.is_leader();
        if was.0 == Role::Leader && (!now_leader || l.raft.term() != was.1) {
            l.confirm = None;
            l.confirmed = l.confirmed.filter(|&(n, _)| n != me);
            l.batch_waiters.clear();
        }
        if became {
            self.on_became_leader(scope, cx);
        }
        self.after_commit(scope, cx);
    }

    fn on_became_leader(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let l = self.layer(scope);
        let term = l.raft.term();
        l.geo_watch = GeoWatch::default();
        let recheck = cx.world.params.geo_window;
        cx.set_timer(TimerKey::new(scope, TimerKind::GeoRecheck), recheck);
        let others: Vec<NodeId> = Self::sublayer_members(cx, scope).into_iter().filter(|&n| n != me).collect();
        if scope.layer.is_upper() {
            let own = self.own_share(cx);
            let l = self.layer(scope);
            let mut c =
                Confirmation { term, shares: BTreeMap::new(), valid: BTreeSet::new(), rejected: BTreeSet::new() };
            if let Some(s) = own {
                c.shares.insert(me, s);
                Self::check_share(&mut c, me, cx);
            }
            l.confirm = Some(c);
            cx.broadcast(&others, &ProtocolMessage::new(scope, Body::ConfirmRequest { term }));
            let wait = cx.world.params.confirm_wait;
            cx.set_timer(TimerKey::new(scope, TimerKind::ConfirmWait), wait);
            self.try_confirm(scope, cx);
        } else {
            l.confirmed = Some((me, term));
            cx.observe(Observation::LeaderAnnounced { scope, node: me, term });
            cx.broadcast(&others, &ProtocolMessage::new(scope, Body::LeaderConfirm { term, leader: me, bundle: None }));
        }
    }

    fn own_share(&mut self, cx: &mut Cx<'_>) -> Option<OneTimeSignature> {
        let crypto = cx.world.crypto.as_ref()?;
        let kp = crypto.key_pair(self.id)?;
        let msg = identity_message(mac_for(self.id), &self.geo);
        let mut sig = sign(&crypto.params, kp, &msg).ok()?;
        if self.tamper {
            // Sign a different location but claim the true digest.
            let forged = identity_message(mac_for(self.id), &self.geo.offset(90.0, 5000.0));
            sig = sign(&crypto.params, kp, &forged).ok()?;
            sig.message_digest = MessageDigest::of(&msg);
        }
        if !self.signed.insert(sig.message_digest.0) {
            cx.observe(Observation::SignatureReused { node: self.id, digest: sig.message_digest.0 });
        }
        Some(sig)
    }

    fn check_share(c: &mut Confirmation, from: NodeId, cx: &Cx<'_>) {
        let ok = match (cx.world.crypto.as_ref(), c.shares.get(&from)) {
            (Some(crypto), Some(sig)) => {
                sig.node == from && crypto.key_pair(from).is_some_and(|kp| crypto.check_share(sig, &kp.verify_key))
            }
            _ => false,
        };
        if ok {
            c.valid.insert(from);
        } else {
            c.rejected.insert(from);
        }
    }

    fn on_signature_share(
        &mut self,
        from: NodeId,
        scope: SubLayer,
        term: Term,
        signature: OneTimeSignature,
        cx: &mut Cx<'_>,
    ) {
        let l = self.layer(scope);
        let Some(c) = l.confirm.as_mut() else { return };
        if c.term != term || c.shares.contains_key(&from) {
            return;
        }
        c.shares.insert(from, signature);
        Self::check_share(c, from, cx);
        self.try_confirm(scope, cx);
    }

    fn try_confirm(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let members = Self::sublayer_members(cx, scope);
        let policy = cx.world.params.threshold.policy(members.len());
        let Some(crypto) = cx.world.crypto.as_ref() else { return };
        let l = self.layer(scope);
        let Some(c) = l.confirm.as_ref() else { return };
        if c.valid.len() < policy.t() {
            return;
        }
        let bundle = ThresholdSignatureBundle { policy, signatures: c.valid.iter().map(|n| c.shares[n]).collect() };
        let keys = crypto.verify_keys(&members);
        if !bundle.verify(&crypto.params, &keys).is_ok_and(|o| o.accepted) {
            return;
        }
        let term = c.term;
        let rejected: Vec<NodeId> = c.rejected.iter().copied().collect();
        l.confirm = None;
        l.confirmed = Some((me, term));
        cx.cancel_timer(TimerKey::new(scope, TimerKind::ConfirmWait));
        cx.observe(Observation::UpperConfirmed {
            scope,
            leader: me,
            term,
            signers: members.clone(),
            bundle: bundle.clone(),
            rejected,
        });
        let others: Vec<NodeId> = members.into_iter().filter(|&n| n != me).collect();
        cx.broadcast(
            &others,
            &ProtocolMessage::new(scope, Body::LeaderConfirm { term, leader: me, bundle: Some(bundle) }),
        );
    }

    /// No threshold within the wait: the round is void and the leader steps down.
    fn on_confirm_timeout(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let l = self.layer(scope);
        let Some(c) = l.confirm.take() else { return };
        cx.observe(Observation::ConfirmationVoided {
            scope,
            node: me,
            term: c.term,
            valid: c.valid.len(),
            rejected: c.rejected.iter().copied().collect(),
        });
        if l.raft.is_leader() && l.raft.term() == c.term {
            l.raft.step_down(cx);
        }
    }

    fn on_leader_confirm(
        &mut self,
        from: NodeId,
        scope: SubLayer,
        term: Term,
        leader: NodeId,
        bundle: Option<ThresholdSignatureBundle>,
        cx: &mut Cx<'_>,
    ) {
        if from != leader {
            return;
        }
        let valid = if scope.layer.is_upper() {
            let members = Self::sublayer_members(cx, scope);
            match (cx.world.crypto.as_ref(), bundle) {
                (Some(crypto), Some(b)) => {
                    b.policy == cx.world.params.threshold.policy(members.len())
                        && crypto.check_bundle(&b, &crypto.verify_keys(&members)).is_ok_and(|o| o.accepted)
                }
                _ => false,
            }
        } else {
            true
        };
        let l = self.layer(scope);
        if !valid || l.confirmed.is_some_and(|(_, t)| t > term) {
            return;
        }
        l.confirmed = Some((leader, term));
        l.last_contact = cx.now;
        l.raft.on_heartbeat(from, term, cx);
    }

    // ---- geography ----

    fn on_geo_report_timer(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        self.refresh_geo(cx);
        let me = self.id;
        let geo = self.geo;
        let fresh = self.geo_fresh(cx);
        let l = self.layer(scope);
        if fresh && l.raft.is_member() {
            if let Some(leader) = l.raft.leader().filter(|&n| n != me) {
                cx.send(leader, ProtocolMessage::new(scope, Body::GeoReport { geo }));
            }
        }
        let d = cx.world.params.geo_window / 2;
        cx.set_timer(TimerKey::new(scope, TimerKind::GeoReport), d.max(1));
    }

    fn on_geo_report(&mut self, from: NodeId, scope: SubLayer, geo: GeoRecord) {
        let l = self.layer(scope);
        if l.raft.is_leader() {
            let w = &mut l.geo_watch;
            w.window_start.entry(from).or_insert(geo);
            w.latest.insert(from, geo);
            w.reported.insert(from);
        }
    }

    /// Once per window the leader evicts members that moved too far or went
    /// silent, one membership change at a time, and refills the group from
    /// the best-scoring followers.
    fn on_geo_recheck(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let own = self.geo;
        let own_fresh = self.geo_fresh(cx);
        let p = cx.world.params;
        let l = self.layer(scope);
        if !l.raft.is_leader() {
            return;
        }
        cx.set_timer(TimerKey::new(scope, TimerKind::GeoRecheck), p.geo_window);
        let w = &mut l.geo_watch;
        w.window_start.entry(me).or_insert(own);
        w.latest.insert(me, own);
        if own_fresh {
            w.reported.insert(me);
        }
        let mut evict = None;
        for &m in l.raft.members() {
            let moved = match (w.window_start.get(&m), w.latest.get(&m)) {
                (Some(a), Some(b)) => haversine_distance(a, b) > p.displacement_limit_m,
                _ => false,
            };
            if moved || !w.reported.contains(&m) {
                evict = Some(m);
                break;
            }
        }
        w.window_start = w.latest.clone();
        w.reported.clear();
        let change = match evict {
            Some(m) => {
                w.evicted.insert(m);
                Some(MembershipChange::Remove(m))
            }
            None => {
                let sub = cx.world.sublayer(scope);
                let target = sub.map_or(0, |s| s.cap.min(s.members.len()));
                if l.raft.members().len() < target {
                    sub.and_then(|s| {
                        s.members
                            .iter()
                            .filter(|n| !l.raft.members().contains(n) && !w.evicted.contains(n))
                            .filter_map(|&n| Some(NodeScore::from_cgf(n, cx.world.score(scope, n)?)))
                            .min_by(crate::cgf::rank_order)
                            .map(|s| MembershipChange::Add(s.node))
                    })
                } else {
                    None
                }
            }
        };
        if let Some(c) = change {
            match l.raft.propose_membership(c, cx) {
                Ok(_) => {}
                Err(e) => log::debug!("{me} {scope}: membership change {c:?} deferred: {e}"),
            }
        }
    }

    // ---- replication ----

    /// Transactions enter at the lowest sub-layer the node belongs to. An
    /// upper leader accepts them only once confirmed.
    fn on_client_tx(&mut self, payload: Vec<u8>, cx: &mut Cx<'_>) {
        let Some(scope) = self.layers.keys().next().copied() else { return };
        if scope.layer.is_upper() && self.layers[&scope].raft.is_leader() && !self.is_established(scope) {
            cx.observe(Observation::Redirected { scope, node: self.id, payload, hint: None });
            return;
        }
        let l = self.layers.get_mut(&scope).expect("listed");
        let was = (l.raft.role(), l.raft.term());
        match l.raft.propose(EntryKind::Transaction(payload.clone()), cx) {
            Ok(_) => self.after_raft(scope, was, false, cx),
            Err(LogError::NotLeader { hint }) => {
                cx.observe(Observation::Redirected { scope, node: self.id, payload, hint });
            }
            Err(e) => log::debug!("{}: {e}", self.id),
        }
    }

    fn after_commit(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let me = self.id;
        let l = self.layer(scope);
        if Some(scope) == cx.world.top {
            let before = l.global.global_index();
            l.global.sync(l.raft.log());
            if l.global.global_index() != before {
                cx.observe(Observation::GlobalIndex { node: me, global_index: l.global.global_index() });
            }
            let commit = l.raft.log().commit_index();
            let done: Vec<BatchKey> =
                l.batch_waiters.iter().filter(|(_, &(_, i))| i <= commit).map(|(k, _)| *k).collect();
            let mut own = Vec::new();
            for k in done {
                let (origin_leader, _) = l.batch_waiters.remove(&k).expect("listed");
                if origin_leader == me {
                    own.push(k);
                } else {
                    cx.send(origin_leader, ProtocolMessage::new(scope, Body::BatchAck { key: k }));
                }
            }
            for k in own {
                self.on_batch_ack(k.origin, k, cx);
            }
        }
        let l = self.layer(scope);
        if scope.layer == Layer::Leaf && l.raft.is_leader() && l.batch_inflight.is_none() {
            self.send_batch(scope, cx);
        }
    }

    fn send_batch(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let Some(top) = cx.world.top else { return };
        let Some(&target) = cx.world.leaders.get(&top) else { return };
        let batch = cx.world.params.batch_size;
        let l = self.layer(scope);
        let Some(p) = propose_global_batch(scope, l.raft.log(), batch) else { return };
        l.batch_inflight = Some(p.key);
        if target == self.id {
            self.insert_batch(self.id, top, p.key, p.items, cx);
        } else {
            cx.send(target, ProtocolMessage::new(top, Body::BatchPropose { key: p.key, items: p.items }));
        }
        let retry = cx.world.params.batch_retry;
        cx.set_timer(TimerKey::new(scope, TimerKind::BatchRetry), retry);
    }

    fn on_batch_retry(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let l = self.layer(scope);
        l.batch_inflight = None;
        if l.raft.is_leader() {
            self.send_batch(scope, cx);
        }
    }

    /// Top leader: inserts a batch once (keyed by origin and range) and acks
    /// after it commits.
    fn insert_batch(&mut self, from: NodeId, top: SubLayer, key: BatchKey, items: Vec<BatchItem>, cx: &mut Cx<'_>) {
        if !self.is_established(top) {
            return;
        }
        let l = self.layers.get_mut(&top).expect("established implies joined");
        let was = (l.raft.role(), l.raft.term());
        let last = match log_holds_batch(l.raft.log(), &key) {
            Some(i) => i,
            None => {
                let kinds = items
                    .into_iter()
                    .map(|it| EntryKind::Global {
                        origin: key.origin,
                        local_index: it.local_index,
                        local_term: it.local_term,
                        payload_hash: it.payload_hash,
                    })
                    .collect();
                match l.raft.propose_all(kinds, cx) {
                    Ok(ix) => ix.last().copied().unwrap_or(0),
                    Err(_) => return,
                }
            }
        };
        l.batch_waiters.insert(key, (from, last));
        self.after_raft(top, was, false, cx);
    }

    fn on_batch_ack(&mut self, scope_of_origin: SubLayer, key: BatchKey, cx: &mut Cx<'_>) {
        let Some(l) = self.layers.get_mut(&scope_of_origin) else { return };
        if l.batch_inflight != Some(key) {
            return;
        }
        l.batch_inflight = None;
        l.raft.set_local_index(key.to, cx);
        cx.cancel_timer(TimerKey::new(scope_of_origin, TimerKind::BatchRetry));
        cx.observe(Observation::BatchAcked { node: self.id, key });
        self.after_commit(scope_of_origin, cx);
    }

    fn leader_heartbeat(&mut self, scope: SubLayer, cx: &mut Cx<'_>) {
        let l = self.layer(scope);
        if !l.raft.is_leader() {
            return;
        }
        let followers: Vec<NodeId> =
            Self::sublayer_members(cx, scope).into_iter().filter(|n| !l.raft.members().contains(n)).collect();
        let log = l.raft.log();
        let hb = Body::Heartbeat {
            term: l.raft.term(),
            leader_commit: log.commit_index(),
            leader_local_index: log.local_index(),
        };
        cx.broadcast(&followers, &ProtocolMessage::new(scope, hb));
        // Entries committed before the top leader was known still need a batch.
        if scope.layer == Layer::Leaf && self.layer(scope).batch_inflight.is_none() {
            self.send_batch(scope, cx);
        }
    }
}

fn majority(n: usize) -> usize {
    n / 2 + 1
}

fn established(l: &LayerState, me: NodeId) -> bool {
    l.raft.is_leader() && (!l.scope.layer.is_upper() || l.confirmed == Some((me, l.raft.term())))
}

impl Node for LhNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_start(&mut self, cx: &mut Cx<'_>) {
        self.refresh_geo(cx);
        let mine: Vec<SubLayer> =
            cx.world.sublayers.iter().filter(|(_, s)| s.contains(self.id)).map(|(k, _)| *k).collect();
        for s in mine.into_iter().chain(self.layers.keys().copied().collect::<Vec<_>>()) {
            self.join(s, cx);
        }
    }

    fn on_message(&mut self, from: NodeId, msg: ProtocolMessage, cx: &mut Cx<'_>) {
        let scope = msg.scope;
        match msg.body {
            Body::BatchPropose { key, items } => return self.insert_batch(from, scope, key, items, cx),
            Body::BatchAck { key } => return self.on_batch_ack(key.origin, key, cx),
            _ => {}
        }
        if !self.layers.contains_key(&scope) {
            return;
        }
        match msg.body {
            Body::FormGroup { ballot } => self.on_form_group(from, scope, ballot, cx),
            Body::CgfReply { ballot, score, accepted, committed } => {
                self.on_cgf_reply(from, scope, ballot, score, accepted, committed, cx)
            }
            Body::GroupAnnounce { proposal } => self.on_group_announce(from, scope, proposal, cx),
            Body::GroupAck { ballot } => self.on_group_ack(from, scope, ballot, cx),
            Body::GroupCommit { proposal } => {
                self.layer(scope).setup = Setup::Idle;
                self.install_group(scope, proposal, cx);
            }
            Body::CandidateNotice { .. } => self.layer(scope).last_contact = cx.now,
            Body::Heartbeat { term, .. } => {
                let l = self.layer(scope);
                l.last_contact = cx.now;
                l.raft.on_heartbeat(from, term, cx);
            }
            Body::ConfirmRequest { term } => {
                if let Some(signature) = self.own_share(cx) {
                    let geo = self.geo;
                    cx.send(from, ProtocolMessage::new(scope, Body::SignatureShare { term, signature, geo }));
                }
            }
            Body::SignatureShare { term, signature, .. } => self.on_signature_share(from, scope, term, signature, cx),
            Body::LeaderConfirm { term, leader, bundle } => {
                self.on_leader_confirm(from, scope, term, leader, bundle, cx)
            }
            Body::GeoReport { geo } => self.on_geo_report(from, scope, geo),
            body @ (Body::RequestVotes { .. }
            | Body::Vote { .. }
            | Body::AppendEntries { .. }
            | Body::AppendReply { .. }) => {
                let l = self.layer(scope);
                if l.committed.is_none() {
                    return;
                }
                if matches!(body, Body::AppendEntries { .. }) {
                    l.last_contact = cx.now;
                }
                let was = (l.raft.role(), l.raft.term());
                let became = l.raft.handle(from, &body, cx);
                self.after_raft(scope, was, became, cx);
            }
            Body::BatchPropose { .. } | Body::BatchAck { .. } => {}
        }
    }

    fn on_timer(&mut self, key: TimerKey, cx: &mut Cx<'_>) {
        let scope = key.scope;
        if !self.layers.contains_key(&scope) {
            return;
        }
        match key.kind {
            TimerKind::Election => {
                let l = self.layer(scope);
                let was = (l.raft.role(), l.raft.term());
                l.raft.on_timer(key.kind, cx);
                let became = l.raft.is_leader() && was.0 != Role::Leader;
                self.after_raft(scope, was, became, cx);
            }
            TimerKind::Heartbeat => {
                self.layer(scope).raft.on_timer(key.kind, cx);
                self.leader_heartbeat(scope, cx);
            }
            TimerKind::SetupWait => self.on_setup_timer(scope, cx),
            TimerKind::ConfirmWait => self.on_confirm_timeout(scope, cx),
            TimerKind::GeoReport => self.on_geo_report_timer(scope, cx),
            TimerKind::GeoRecheck => self.on_geo_recheck(scope, cx),
            TimerKind::BatchRetry => self.on_batch_retry(scope, cx),
        }
    }

    fn on_control(&mut self, ctl: Control, cx: &mut Cx<'_>) {
        match ctl {
            Control::ClientTx { payload } => self.on_client_tx(payload, cx),
            Control::JoinLayer { scope } => self.join(scope, cx),
            Control::Relocate { geo } => self.geo = geo,
            Control::FreezeGeo => self.frozen = true,
            Control::TamperSignatures => self.tamper = true,
        }
    }

    fn on_crash(&mut self) {
        for l in self.layers.values_mut() {
            l.raft.crash();
            l.setup = Setup::Idle;
            l.confirm = None;
            l.confirmed = None;
            l.batch_inflight = None;
            l.batch_waiters.clear();
            l.geo_watch = GeoWatch::default();
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
