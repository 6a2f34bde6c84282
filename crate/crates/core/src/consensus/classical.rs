//! Classical Raft baseline: every node is a candidate in one flat group.

use crate::consensus::message::ProtocolMessage;
use crate::consensus::raft::{RaftSeat, Role, TimeoutBand};
use crate::ids::{NodeId, SubLayer};
use crate::replication::log::{EntryKind, LogError};
use crate::sim::engine::{Control, Cx, Node, TimerKey};
use crate::sim::observer::Observation;

pub struct RaftNode {
    id: NodeId,
    seat: RaftSeat,
    /// Only candidates run election timers; every member votes.
    candidate: bool,
}

impl RaftNode {
    pub fn new(id: NodeId, scope: SubLayer, members: Vec<NodeId>, candidate: bool) -> Self {
        let cap = members.len();
        let mut seat = RaftSeat::new(scope, id, members, cap);
        seat.set_band(TimeoutBand::Full);
        RaftNode { id, seat, candidate }
    }

    pub fn seat(&self) -> &RaftSeat {
        &self.seat
    }

    pub fn role(&self) -> Role {
        self.seat.role()
    }
}

impl Node for RaftNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_start(&mut self, cx: &mut Cx<'_>) {
        self.seat.set_canary(cx.world.canary.contains(&self.id));
        if self.candidate {
            self.seat.activate(cx);
        }
    }

    fn on_message(&mut self, from: NodeId, msg: ProtocolMessage, cx: &mut Cx<'_>) {
        if msg.scope == self.seat.scope() {
            self.seat.handle(from, &msg.body, cx);
        }
    }

    fn on_timer(&mut self, key: TimerKey, cx: &mut Cx<'_>) {
        if key.scope == self.seat.scope() {
            self.seat.on_timer(key.kind, cx);
        }
    }

    fn on_control(&mut self, ctl: Control, cx: &mut Cx<'_>) {
        if let Control::ClientTx { payload } = ctl {
            if let Err(LogError::NotLeader { hint }) = self.seat.propose(EntryKind::Transaction(payload.clone()), cx) {
                cx.observe(Observation::Redirected { scope: self.seat.scope(), node: self.id, payload, hint });
            }
        }
    }

    fn on_crash(&mut self) {
        self.seat.crash();
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
