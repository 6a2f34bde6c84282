//! Scenario driver. Builds the world and nodes for one `(scenario, n, seed)`,
//! plays the workload and fault schedule, keeps the leader directory
//! current, raises the hierarchy layer by layer, and summarizes the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::classical::RaftNode;
use crate::consensus::lh::LhNode;
use crate::consensus::message::Phase;
use crate::crypto::SystemParams;
use crate::geo::GeoRecord;
use crate::ids::{Layer, NodeId, SubLayer, Tick};
use crate::replication::log::EntryKind;
use crate::replication::merge::{merge_all, ScoredNode};
use crate::reputation::{ReputationGraph, RoundOutcome};
use crate::scenario::{node_ids, ConfigError, FaultSpec, FieldError, NodeSweep, ScenarioConfig, StopRule, Topology};
use crate::sim::engine::{Control, Engine, Fault, NetworkConfig, Partition};
use crate::sim::metrics::MetricsRecorder;
use crate::sim::observer::{Observation, Violation};
use crate::sim::world::{CryptoWorld, World};

const PLACEMENT_STREAM: u64 = u64::MAX - 1;
const WORKLOAD_STREAM: u64 = u64::MAX - 2;
const REPUTATION_STREAM: u64 = u64::MAX - 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    LhRaft,
    Raft,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::LhRaft => "lhraft",
            Protocol::Raft => "raft",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Test-only instrumentation.
#[derive(Debug, Clone, Default)]
pub struct RunHooks {
    /// Nodes that grant every vote request, even twice in one term.
    pub canary: BTreeSet<NodeId>,
    /// Keep every observation with its tick.
    pub trace: bool,
}

/// One CSV row. Consensus bytes are leader-selection plus replication
/// traffic; formation, notification, confirmation and heartbeats are
/// reported in their own phase columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub protocol: Protocol,
    pub topology: String,
    pub n: usize,
    /// Candidates in the primary sub-layer (`cr` for the classical baseline).
    pub c: usize,
    pub seed: u64,
    pub candidate_selection_msgs: u64,
    pub candidate_notification_msgs: u64,
    pub leader_selection_msgs: u64,
    pub leader_notification_msgs: u64,
    pub threshold_confirmation_msgs: u64,
    pub replication_msgs: u64,
    pub heartbeat_msgs: u64,
    pub global_replication_msgs: u64,
    pub maintenance_msgs: u64,
    pub candidate_selection_bytes: u64,
    pub candidate_notification_bytes: u64,
    pub leader_selection_bytes: u64,
    pub leader_notification_bytes: u64,
    pub threshold_confirmation_bytes: u64,
    pub replication_bytes: u64,
    pub heartbeat_bytes: u64,
    pub global_replication_bytes: u64,
    pub maintenance_bytes: u64,
    pub delivered_msgs: u64,
    pub delivered_bytes: u64,
    pub dropped_msgs: u64,
    pub lost_msgs: u64,
    pub committed_tx: u64,
    pub consensus_bytes: u64,
    pub leaf_consensus_bytes: u64,
    pub middle_consensus_bytes: u64,
    pub top_consensus_bytes: u64,
    pub bytes_per_tx: Option<f64>,
    pub total_bytes_per_tx: Option<f64>,
    /// Mean over the layer's sub-layers, first candidacy to established leader.
    pub leaf_election_latency: Option<f64>,
    pub middle_election_latency: Option<f64>,
    pub top_election_latency: Option<f64>,
    pub terms_consumed: u64,
    pub first_commit_tick: Option<Tick>,
    pub global_index: u64,
    pub voided_confirmations: u64,
    /// One-time signatures handed out again over an already signed digest.
    pub signature_reuses: u64,
    pub violations: usize,
    pub end_tick: Tick,
}

impl RunMetrics {
    pub fn phase_msgs(&self, p: Phase) -> u64 {
        match p {
            Phase::CandidateSelection => self.candidate_selection_msgs,
            Phase::CandidateNotification => self.candidate_notification_msgs,
            Phase::LeaderSelection => self.leader_selection_msgs,
            Phase::LeaderNotification => self.leader_notification_msgs,
            Phase::ThresholdConfirmation => self.threshold_confirmation_msgs,
            Phase::Replication => self.replication_msgs,
            Phase::Heartbeat => self.heartbeat_msgs,
            Phase::GlobalReplication => self.global_replication_msgs,
            Phase::Maintenance => self.maintenance_msgs,
        }
    }

    pub fn election_latency(&self, layer: Layer) -> Option<f64> {
        match layer {
            Layer::Leaf => self.leaf_election_latency,
            Layer::Middle => self.middle_election_latency,
            Layer::Top => self.top_election_latency,
        }
    }
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    /// Committed log of the primary sub-layer, or the global log for a hierarchy.
    pub log_export: String,
    pub violations: Vec<Violation>,
    pub trace: Vec<(Tick, Observation)>,
    /// Leader directory at the end of the run.
    pub leaders: BTreeMap<SubLayer, NodeId>,
}

pub fn run_scenario(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<RunOutput, ConfigError> {
    run(cfg, Protocol::LhRaft, n, seed, &RunHooks::default())
}

pub fn run_classical_raft(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<RunOutput, ConfigError> {
    run(cfg, Protocol::Raft, n, seed, &RunHooks::default())
}

pub fn run(
    cfg: &ScenarioConfig,
    protocol: Protocol,
    n: usize,
    seed: u64,
    hooks: &RunHooks,
) -> Result<RunOutput, ConfigError> {
    let mut single = cfg.clone();
    single.nodes = NodeSweep::One(n);
    single.validate()?;
    if let Some(&bad) = hooks.canary.iter().find(|c| c.0 as usize >= n) {
        return Err(ConfigError::Invalid(vec![FieldError {
            field: "canary".into(),
            message: format!("{bad} is not a node"),
        }]));
    }
    let mut d = Driver::new(&single, protocol, n, seed, hooks);
    d.execute();
    Ok(d.finish())
}

enum Action {
    Submit(usize),
    Resend { to: NodeId, payload: Vec<u8> },
    Retry(usize),
    CrashLeader { scope: SubLayer, restart_after: Option<Tick> },
    Relocate { node: NodeId, bearing_deg: f64, distance_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Leaves,
    Middles,
    Top,
}

struct Driver<'a> {
    cfg: &'a ScenarioConfig,
    protocol: Protocol,
    n: usize,
    seed: u64,
    engine: Engine,
    primary: SubLayer,
    c: usize,
    rng: ChaCha8Rng,
    actions: BTreeMap<(Tick, u64), Action>,
    action_seq: u64,
    workload_started: bool,
    stage: Stage,
    regions: Vec<Vec<NodeId>>,
    region_centers: Vec<GeoRecord>,
    groups: BTreeMap<SubLayer, Vec<NodeId>>,
    trace: Option<Vec<(Tick, Observation)>>,
}

impl<'a> Driver<'a> {
    fn new(cfg: &'a ScenarioConfig, protocol: Protocol, n: usize, seed: u64, hooks: &RunHooks) -> Self {
        let region_count = match (protocol, cfg.topology) {
            (Protocol::LhRaft, Topology::Hierarchy { leaf_regions, .. }) => leaf_regions,
            _ => 1,
        };
        let (positions, regions, region_centers) = place(cfg, n, seed, region_count);

        let mut world = World::new(cfg.protocol);
        world.weights = cfg.score_weights();
        world.geo = positions.clone();
        world.reputation = initial_reputation(cfg, n, seed);
        world.canary = hooks.canary.clone();

        let net = NetworkConfig { latency: cfg.latency, drop_rate: 0.0 };
        let (primary, c) = match (protocol, cfg.topology) {
            (Protocol::Raft, _) => (SubLayer::leaf(0), cfg.classical_candidates.unwrap_or(n)),
            (Protocol::LhRaft, Topology::Single { layer }) => {
                let scope = SubLayer::new(layer, 0);
                let c = cfg.group_size(layer).min(n);
                if layer.is_upper() {
                    world.crypto = Some(crypto_world(seed, node_ids(n)));
                }
                world.register_sublayer(scope, node_ids(n).collect(), c, cfg.event_record());
                (scope, c)
            }
            (Protocol::LhRaft, Topology::Hierarchy { .. }) => {
                world.crypto = Some(crypto_world(seed, std::iter::empty()));
                for (r, members) in regions.iter().enumerate() {
                    let m = cfg.group_size(Layer::Leaf).min(members.len());
                    world.register_sublayer(SubLayer::leaf(r as u32), members.clone(), m, region_centers[r]);
                }
                let smallest = regions.iter().map(Vec::len).min().unwrap_or(1);
                (SubLayer::new(Layer::Top, 0), cfg.group_size(Layer::Leaf).min(smallest))
            }
        };

        let mut engine = Engine::new(seed, net, world);
        match protocol {
            Protocol::Raft => {
                let members: Vec<NodeId> = node_ids(n).collect();
                for id in node_ids(n) {
                    let candidate = (id.0 as usize) < c;
                    engine.add_node(Box::new(RaftNode::new(id, primary, members.clone(), candidate)));
                }
            }
            Protocol::LhRaft => {
                for id in node_ids(n) {
                    engine.add_node(Box::new(LhNode::new(id, positions[&id])));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(WORKLOAD_STREAM);
        let mut d = Driver {
            cfg,
            protocol,
            n,
            seed,
            engine,
            primary,
            c,
            rng,
            actions: BTreeMap::new(),
            action_seq: 0,
            workload_started: false,
            stage: Stage::Leaves,
            regions,
            region_centers,
            groups: BTreeMap::new(),
            trace: hooks.trace.then(Vec::new),
        };
        d.schedule_faults();
        if let Some(at) = cfg.workload.start {
            d.start_workload(at);
        }
        d.engine.start_all();
        d
    }

    fn push(&mut self, at: Tick, a: Action) {
        self.action_seq += 1;
        self.actions.insert((at, self.action_seq), a);
    }

    fn schedule_faults(&mut self) {
        let hierarchy = matches!(self.cfg.topology, Topology::Hierarchy { .. }) && self.protocol == Protocol::LhRaft;
        for f in self.cfg.faults.clone() {
            match f {
                FaultSpec::Crash { node, at } => self.engine.schedule_fault(at, Fault::Crash(NodeId(node))),
                FaultSpec::Restart { node, at } => self.engine.schedule_fault(at, Fault::Restart(NodeId(node))),
                FaultSpec::CrashLeader { at, layer, restart_after } => {
                    let scope = if hierarchy { SubLayer::new(layer, 0) } else { self.primary };
                    self.push(at, Action::CrashLeader { scope, restart_after });
                }
                FaultSpec::DropRate { probability, at } => self.engine.schedule_fault(at, Fault::DropRate(probability)),
                FaultSpec::Partition { nodes, from, to } => {
                    self.engine.add_partition(Partition { nodes: nodes.into_iter().map(NodeId).collect(), from, to })
                }
                FaultSpec::TamperSignature { node } => {
                    self.engine.schedule_control(0, NodeId(node), Control::TamperSignatures)
                }
                FaultSpec::Relocate { node, at, bearing_deg, distance_m } => {
                    self.push(at, Action::Relocate { node: NodeId(node), bearing_deg, distance_m })
                }
                FaultSpec::FreezeGeo { node, at } => self.engine.schedule_control(at, NodeId(node), Control::FreezeGeo),
            }
        }
    }

    fn execute(&mut self) {
        let horizon = self.cfg.horizon;
        loop {
            let next_event = self.engine.next_time();
            let next_action = self.actions.keys().next().map(|&(t, _)| t);
            let now = match (next_event, next_action) {
                (None, None) => break,
                (Some(e), Some(a)) => e.min(a),
                (Some(t), None) | (None, Some(t)) => t,
            };
            if now > horizon {
                break;
            }
            if next_action == Some(now) {
                let (key, action) = self.actions.pop_first().expect("peeked");
                self.perform(key.0, action);
                continue;
            }
            self.engine.step();
            for o in self.engine.take_observations() {
                self.on_observation(o);
            }
            if self.done() {
                break;
            }
        }
    }

    fn done(&self) -> bool {
        match self.cfg.stop {
            StopRule::Horizon => false,
            StopRule::AllCommitted if self.cfg.workload.count == 0 => {
                self.engine.world.leaders.contains_key(&self.primary)
            }
            StopRule::AllCommitted => {
                let count = self.cfg.workload.count as u64;
                let global = match self.cfg.topology {
                    Topology::Hierarchy { .. } => self.batches_settled(),
                    Topology::Single { .. } => true,
                };
                self.engine.metrics.committed_tx() >= count && global
            }
        }
    }

    /// No leaf leader holds a full batch that the global log lacks.
    fn batches_settled(&self) -> bool {
        let batch = self.engine.world.params.batch_size.max(1);
        self.engine.world.leaders.iter().filter(|(s, _)| s.layer == Layer::Leaf).all(|(&scope, &leader)| {
            let seat = self.engine.node(leader).and_then(|n| n.as_any().downcast_ref::<LhNode>()?.seat(scope));
            seat.is_none_or(|s| s.log().commit_index() < s.log().local_index() + batch)
        })
    }

    fn start_workload(&mut self, at: Tick) {
        if !self.workload_started && self.cfg.workload.count > 0 {
            self.workload_started = true;
            self.push(at, Action::Submit(0));
        }
    }

    fn payload(&self, i: usize) -> Vec<u8> {
        let mut p = format!("tx-{}-{i}", self.seed).into_bytes();
        p.resize(p.len().max(self.cfg.workload.payload_bytes), 0);
        p
    }

    fn schedule_retry(&mut self, at: Tick, i: usize) {
        let after = self.cfg.workload.retry_after;
        if after > 0 {
            self.push(at + after, Action::Retry(i));
        }
    }

    fn random_node(&mut self) -> NodeId {
        NodeId(self.rng.gen_range(0..self.n as u32))
    }

    fn perform(&mut self, at: Tick, action: Action) {
        match action {
            Action::Submit(i) => {
                let to = self.random_node();
                let payload = self.payload(i);
                self.engine.schedule_control(at, to, Control::ClientTx { payload });
                self.schedule_retry(at, i);
                if i + 1 < self.cfg.workload.count {
                    self.push(at + self.cfg.workload.interval, Action::Submit(i + 1));
                }
            }
            Action::Resend { to, payload } => self.engine.schedule_control(at, to, Control::ClientTx { payload }),
            Action::Retry(i) => {
                let payload = self.payload(i);
                if !self.engine.metrics.is_committed(&EntryKind::Transaction(payload.clone()).payload_hash()) {
                    let to = match self.engine.world.leaders.get(&self.primary) {
                        Some(&l) if matches!(self.cfg.topology, Topology::Single { .. }) => l,
                        _ => self.random_node(),
                    };
                    self.engine.schedule_control(at, to, Control::ClientTx { payload });
                    self.schedule_retry(at, i);
                }
            }
            Action::CrashLeader { scope, restart_after } => match self.engine.world.leaders.get(&scope).copied() {
                Some(leader) => {
                    self.engine.schedule_fault(at, Fault::Crash(leader));
                    if let Some(d) = restart_after {
                        self.engine.schedule_fault(at + d, Fault::Restart(leader));
                    }
                }
                // No leader yet: try again shortly.
                None => self.push(at + self.cfg.protocol.heartbeat, Action::CrashLeader { scope, restart_after }),
            },
            Action::Relocate { node, bearing_deg, distance_m } => {
                let world = &mut self.engine.world;
                let Some(old) = world.geo.get(&node).copied() else { return };
                let geo = old.offset(bearing_deg, distance_m).refreshed(at);
                world.geo.insert(node, geo);
                world.rescore();
                self.engine.schedule_control(at, node, Control::Relocate { geo });
            }
        }
    }

    fn on_observation(&mut self, o: Observation) {
        let now = self.engine.now();
        log::trace!("t={now} seed={} {o:?}", self.seed);
        match &o {
            Observation::LeaderAnnounced { scope, node, .. } => {
                self.engine.world.leaders.insert(*scope, *node);
            }
            Observation::BecameLeader { scope, node, .. } if self.protocol == Protocol::Raft => {
                self.engine.world.leaders.insert(*scope, *node);
            }
            Observation::UpperConfirmed { scope, leader, signers, rejected, .. } => {
                self.engine.world.leaders.insert(*scope, *leader);
                let outcomes = signers
                    .iter()
                    .map(|s| (*s, if rejected.contains(s) { RoundOutcome::ForkCausing } else { RoundOutcome::Honest }))
                    .collect();
                self.feedback(&outcomes);
            }
            Observation::ConfirmationVoided { node, rejected, .. } if !rejected.is_empty() => {
                let mut outcomes: BTreeMap<NodeId, RoundOutcome> =
                    rejected.iter().map(|r| (*r, RoundOutcome::ForkCausing)).collect();
                outcomes.insert(*node, RoundOutcome::Honest);
                self.feedback(&outcomes);
            }
            Observation::SteppedDown { scope, node, .. } => {
                if self.engine.world.leaders.get(scope) == Some(node) {
                    self.engine.world.leaders.remove(scope);
                }
            }
            Observation::Crashed { node } => self.engine.world.leaders.retain(|_, l| l != node),
            Observation::GroupLearned { scope, members, .. } => {
                self.groups.entry(*scope).or_insert_with(|| members.clone());
            }
            Observation::Redirected { scope, node, payload, hint } => {
                let known = hint.or_else(|| self.engine.world.leaders.get(scope).copied()).filter(|h| h != node);
                let (to, delay) = match known {
                    Some(h) => (h, 1),
                    None => (self.random_node(), self.cfg.protocol.election_min),
                };
                self.push(now + delay, Action::Resend { to, payload: payload.clone() });
            }
            _ => {}
        }
        if let Some(t) = self.trace.as_mut() {
            t.push((now, o));
        }
        if self.cfg.workload.start.is_none() && self.engine.world.leaders.contains_key(&self.primary) {
            self.start_workload(now);
        }
        self.advance_hierarchy();
    }

    fn feedback(&mut self, outcomes: &BTreeMap<NodeId, RoundOutcome>) {
        let delta = self.cfg.protocol.reputation_delta;
        let world = &mut self.engine.world;
        world.reputation.update_after_round(outcomes, delta);
        world.rescore();
    }

    /// Raises the next layer once every sub-layer below has an established
    /// leader and a committed candidate group.
    fn advance_hierarchy(&mut self) {
        let Topology::Hierarchy { middle_groups, .. } = self.cfg.topology else { return };
        if self.protocol != Protocol::LhRaft {
            return;
        }
        let ready = |d: &Self, scopes: &[SubLayer]| {
            scopes.iter().all(|s| d.engine.world.leaders.contains_key(s) && d.groups.contains_key(s))
        };
        match self.stage {
            Stage::Leaves => {
                let leaves: Vec<SubLayer> = (0..self.regions.len() as u32).map(SubLayer::leaf).collect();
                if !ready(self, &leaves) {
                    return;
                }
                let per_group = self.regions.len().div_ceil(middle_groups);
                let chunks: Vec<Vec<SubLayer>> = leaves.chunks(per_group).map(<[SubLayer]>::to_vec).collect();
                for (g, chunk) in chunks.iter().enumerate() {
                    let centre = self.region_centers[chunk[0].index as usize];
                    self.raise(SubLayer::new(Layer::Middle, g as u32), chunk, centre);
                }
                self.stage = Stage::Middles;
            }
            Stage::Middles => {
                let middles: Vec<SubLayer> =
                    self.engine.world.sublayers.keys().copied().filter(|s| s.layer == Layer::Middle).collect();
                if !ready(self, &middles) {
                    return;
                }
                let top = SubLayer::new(Layer::Top, 0);
                let event = self.cfg.event_record();
                self.raise(top, &middles, event);
                self.engine.world.top = Some(top);
                self.stage = Stage::Top;
            }
            Stage::Top => {}
        }
    }

    /// Merges the candidate groups of `parts` into the participant list of
    /// `scope`, enrolls their keys, and tells them to join.
    fn raise(&mut self, scope: SubLayer, parts: &[SubLayer], event: GeoRecord) {
        let world = &mut self.engine.world;
        let scored: Vec<Vec<ScoredNode>> = parts
            .iter()
            .map(|p| {
                self.groups[p]
                    .iter()
                    .map(|&node| ScoredNode { node, cgf: world.score(*p, node).unwrap_or(0.0) })
                    .collect()
            })
            .collect();
        let authority = world.leaders.get(&parts[0]).copied();
        let merged = match merge_all(&scored, authority) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("cannot raise {scope}: {e}");
                return;
            }
        };
        let mut participants: Vec<NodeId> = Vec::new();
        for node in merged.nodes() {
            if !participants.contains(&node) {
                participants.push(node);
            }
        }
        if let Some(crypto) = world.crypto.as_mut() {
            for &p in &participants {
                crypto.enroll(p);
            }
        }
        let m = self.cfg.group_size(scope.layer).min(participants.len());
        world.register_sublayer(scope, participants.clone(), m, event);
        let now = self.engine.now();
        for p in participants {
            self.engine.schedule_control(now, p, Control::JoinLayer { scope });
        }
    }

    fn finish(self) -> RunOutput {
        let m = &self.engine.metrics;
        let layer_bytes = |l: Layer| m.tally(l, Phase::LeaderSelection).bytes + m.tally(l, Phase::Replication).bytes;
        let consensus_bytes = Layer::ALL.iter().map(|&l| layer_bytes(l)).sum::<u64>();
        let committed = m.committed_tx();
        let per_tx = |b: u64| (committed > 0).then(|| b as f64 / committed as f64);
        let topology = match (self.protocol, self.cfg.topology) {
            (Protocol::Raft, _) => "flat".to_string(),
            (_, Topology::Single { layer }) => format!("single-{layer}"),
            (_, Topology::Hierarchy { leaf_regions, middle_groups }) => {
                format!("hierarchy-{leaf_regions}x{middle_groups}")
            }
        };
        let msgs = |p| m.phase_total(p).messages;
        let bytes = |p| m.phase_total(p).bytes;
        let metrics = RunMetrics {
            scenario: self.cfg.name.clone(),
            protocol: self.protocol,
            topology,
            n: self.n,
            c: self.c,
            seed: self.seed,
            candidate_selection_msgs: msgs(Phase::CandidateSelection),
            candidate_notification_msgs: msgs(Phase::CandidateNotification),
            leader_selection_msgs: msgs(Phase::LeaderSelection),
            leader_notification_msgs: msgs(Phase::LeaderNotification),
            threshold_confirmation_msgs: msgs(Phase::ThresholdConfirmation),
            replication_msgs: msgs(Phase::Replication),
            heartbeat_msgs: msgs(Phase::Heartbeat),
            global_replication_msgs: msgs(Phase::GlobalReplication),
            maintenance_msgs: msgs(Phase::Maintenance),
            candidate_selection_bytes: bytes(Phase::CandidateSelection),
            candidate_notification_bytes: bytes(Phase::CandidateNotification),
            leader_selection_bytes: bytes(Phase::LeaderSelection),
            leader_notification_bytes: bytes(Phase::LeaderNotification),
            threshold_confirmation_bytes: bytes(Phase::ThresholdConfirmation),
            replication_bytes: bytes(Phase::Replication),
            heartbeat_bytes: bytes(Phase::Heartbeat),
            global_replication_bytes: bytes(Phase::GlobalReplication),
            maintenance_bytes: bytes(Phase::Maintenance),
            delivered_msgs: m.delivered_messages(),
            delivered_bytes: m.delivered_bytes(),
            dropped_msgs: m.dropped_messages(),
            lost_msgs: m.lost_messages(),
            committed_tx: committed,
            consensus_bytes,
            leaf_consensus_bytes: layer_bytes(Layer::Leaf),
            middle_consensus_bytes: layer_bytes(Layer::Middle),
            top_consensus_bytes: layer_bytes(Layer::Top),
            bytes_per_tx: per_tx(consensus_bytes),
            total_bytes_per_tx: per_tx(m.delivered_bytes()),
            leaf_election_latency: mean_latency(m, Layer::Leaf),
            middle_election_latency: mean_latency(m, Layer::Middle),
            top_election_latency: mean_latency(m, Layer::Top),
            terms_consumed: m.terms_consumed(),
            first_commit_tick: m.first_tx_commit(),
            global_index: m.global_index(),
            voided_confirmations: m.voided_confirmations(),
            signature_reuses: m.signature_reuses(),
            violations: self.engine.observer.violation_count(),
            end_tick: self.engine.now(),
        };
        RunOutput {
            log_export: self.export_log(),
            metrics,
            violations: self.engine.observer.violations().to_vec(),
            trace: self.trace.unwrap_or_default(),
            leaders: self.engine.world.leaders.clone(),
        }
    }

    fn export_log(&self) -> String {
        let nodes = || self.engine.node_ids().filter_map(|id| self.engine.node(id));
        if let Some(top) = self.engine.world.top {
            let best = nodes()
                .filter_map(|n| n.as_any().downcast_ref::<LhNode>()?.global_log(top))
                .max_by_key(|g| g.global_index());
            return format!("# global\n{}", best.map(|g| g.export()).unwrap_or_default());
        }
        let scope = self.primary;
        let best = nodes()
            .filter_map(|n| {
                let any = n.as_any();
                any.downcast_ref::<LhNode>()
                    .and_then(|l| l.seat(scope))
                    .or_else(|| any.downcast_ref::<RaftNode>().map(RaftNode::seat))
                    .map(|s| s.log())
            })
            .max_by_key(|log| log.commit_index());
        format!("# {scope}\n{}", best.map(|l| l.export_committed()).unwrap_or_default())
    }
}

fn mean_latency(m: &MetricsRecorder, layer: Layer) -> Option<f64> {
    let v: Vec<f64> = m
        .elections()
        .iter()
        .filter(|(s, _)| s.layer == layer)
        .filter_map(|(_, e)| e.latency())
        .map(|t| t as f64)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn crypto_world(seed: u64, enrolled: impl IntoIterator<Item = NodeId>) -> CryptoWorld {
    let params = SystemParams::setup(seed).expect("pairing self-test");
    let mut c = CryptoWorld::new(params, seed);
    for n in enrolled {
        c.enroll(n);
    }
    c
}

/// Positions: region `r` is centred `region_spacing_m` from the event (the
/// event itself when there is one region); nodes are assigned to regions in
/// contiguous id blocks and drawn uniformly from the region's disk.
fn place(
    cfg: &ScenarioConfig,
    n: usize,
    seed: u64,
    regions: usize,
) -> (BTreeMap<NodeId, GeoRecord>, Vec<Vec<NodeId>>, Vec<GeoRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PLACEMENT_STREAM);
    let event = cfg.event_record();
    let centers: Vec<GeoRecord> = (0..regions)
        .map(|r| {
            if regions == 1 {
                event
            } else {
                event.offset(360.0 * r as f64 / regions as f64, cfg.placement.region_spacing_m)
            }
        })
        .collect();
    let mut positions = BTreeMap::new();
    let mut members = vec![Vec::new(); regions];
    for id in node_ids(n) {
        let r = id.0 as usize * regions / n;
        let bearing = rng.gen_range(0.0..360.0);
        let dist = cfg.placement.radius_m * rng.gen::<f64>().sqrt();
        positions.insert(id, centers[r].offset(bearing, dist));
        members[r].push(id);
    }
    (positions, members, centers)
}

fn initial_reputation(cfg: &ScenarioConfig, n: usize, seed: u64) -> ReputationGraph {
    let mut g = ReputationGraph::complete(cfg.r_max, node_ids(n)).expect("validated r_max");
    if cfg.reputation_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(REPUTATION_STREAM);
        let arcs: Vec<(NodeId, NodeId)> = g.arcs().map(|(k, _)| k).collect();
        for (a, b) in arcs {
            let w = 1.0 + rng.gen_range(0.0..=cfg.reputation_jitter);
            g.assign(a, b, w).expect("validated jitter");
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TX: u64 = 6;

    fn scenario(n: usize, layer: &str, drop: f64, fault: u8) -> ScenarioConfig {
        let mut faults = vec![format!(r#"{{"kind": "drop_rate", "probability": {drop}}}"#)];
        match fault {
            1 => faults
                .push(format!(r#"{{"kind": "crash_leader", "at": 150, "layer": "{layer}", "restart_after": 150}}"#)),
            2 => faults.push(format!(r#"{{"kind": "crash_leader", "at": 150, "layer": "{layer}"}}"#)),
            3 => {
                let minority: Vec<String> = (0..(n - 1) / 2).map(|i| i.to_string()).collect();
                faults.push(format!(
                    r#"{{"kind": "partition", "nodes": [{}], "from": 100, "to": 600}}"#,
                    minority.join(", ")
                ));
            }
            _ => {}
        }
        let json = format!(
            r#"{{"nodes": {n}, "topology": {{"kind": "single", "layer": "{layer}"}},
                "workload": {{"count": {TX}, "interval": 30}}, "faults": [{}], "horizon": 3000}}"#,
            faults.join(", ")
        );
        ScenarioConfig::from_json(&json).unwrap()
    }

    fn arb_run() -> impl Strategy<Value = (Protocol, &'static str, usize, f64, u8, u64)> {
        (
            prop_oneof![Just(Protocol::LhRaft), Just(Protocol::Raft)],
            prop_oneof![Just("leaf"), Just("top")],
            3usize..=10,
            prop_oneof![Just(0.0), 0.0f64..0.25],
            0u8..4,
            any::<u64>(),
        )
    }

    fn once(p: Protocol, layer: &str, n: usize, drop: f64, fault: u8, seed: u64) -> RunMetrics {
        run(&scenario(n, layer, drop, fault), p, n, seed, &RunHooks::default()).unwrap().metrics
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

        #[test]
        fn faults_never_break_safety((p, layer, n, drop, fault, seed) in arb_run()) {
            let m = once(p, layer, n, drop, fault, seed);
            prop_assert_eq!(m.violations, 0);
            prop_assert!(m.committed_tx <= TX);
        }

        #[test]
        fn a_seed_fixes_the_run((p, layer, n, drop, fault, seed) in arb_run()) {
            prop_assert_eq!(once(p, layer, n, drop, fault, seed), once(p, layer, n, drop, fault, seed));
        }

        #[test]
        fn reliable_network_commits_everything(n in 3usize..=10, seed in any::<u64>(), raft in any::<bool>()) {
            let p = if raft { Protocol::Raft } else { Protocol::LhRaft };
            let m = once(p, "leaf", n, 0.0, 0, seed);
            prop_assert_eq!(m.committed_tx, TX);
            prop_assert_eq!(m.dropped_msgs, 0);
        }
    }

    #[test]
    fn reelection_reuses_one_time_signatures_without_refusing_them() {
        // Two confirmations inside one location-report period sign the same digest.
        let m = once(Protocol::LhRaft, "top", 5, 0.2, 1, 1);
        assert!(m.terms_consumed >= 2);
        assert!(m.signature_reuses > 0);
        assert!(m.top_election_latency.is_some());
        assert_eq!((m.committed_tx, m.violations), (TX, 0));
    }
}
