//! Deterministic discrete-event engine.
//!
//! Events are totally ordered by `(at, seq)`. Message delivery is split into
//! arrival (accounting, drop-on-crash) and handling, which is delayed by the
//! receiver's serial processing queue. All randomness comes from one seeded
//! ChaCha stream per node plus one for the network.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::message::ProtocolMessage;
use crate::geo::{haversine_distance, GeoRecord};
use crate::ids::{Layer, NodeId, SubLayer, Tick};
use crate::sim::latency::LatencyModel;
use crate::sim::metrics::MetricsRecorder;
use crate::sim::observer::{Observation, Observer};
use crate::sim::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerKind {
    Election,
    Heartbeat,
    SetupWait,
    ConfirmWait,
    GeoReport,
    GeoRecheck,
    BatchRetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerKey {
    pub scope: SubLayer,
    pub kind: TimerKind,
}

impl TimerKey {
    pub fn new(scope: SubLayer, kind: TimerKind) -> Self {
        TimerKey { scope, kind }
    }
}

/// Out-of-band inputs from the scenario driver.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    ClientTx {
        payload: Vec<u8>,
    },
    /// The node now participates in `scope`; membership is in the world.
    JoinLayer {
        scope: SubLayer,
    },
    /// The node's own position changed.
    Relocate {
        geo: GeoRecord,
    },
    /// The node stops refreshing its location attestation.
    FreezeGeo,
    /// Every signature share the node produces from now on is corrupted.
    TamperSignatures,
}

pub trait Node {
    fn id(&self) -> NodeId;
    fn on_start(&mut self, cx: &mut Cx<'_>);
    fn on_message(&mut self, from: NodeId, msg: ProtocolMessage, cx: &mut Cx<'_>);
    fn on_timer(&mut self, key: TimerKey, cx: &mut Cx<'_>);
    fn on_control(&mut self, ctl: Control, cx: &mut Cx<'_>);
    /// Drops volatile state; durable state (term, vote, log) survives.
    fn on_crash(&mut self);
    fn on_restart(&mut self, cx: &mut Cx<'_>) {
        self.on_start(cx);
    }
    fn as_any(&self) -> &dyn std::any::Any;
}

#[derive(Default)]
pub struct Effects {
    sends: Vec<(NodeId, ProtocolMessage)>,
    timers: Vec<(TimerKey, Option<Tick>)>,
    observations: Vec<Observation>,
}

/// Handler context: the only way a node touches the outside world.
pub struct Cx<'a> {
    pub now: Tick,
    pub me: NodeId,
    pub rng: &'a mut ChaCha8Rng,
    pub world: &'a World,
    effects: &'a mut Effects,
}

impl<'a> Cx<'a> {
    pub fn send(&mut self, to: NodeId, msg: ProtocolMessage) {
        if to != self.me {
            self.effects.sends.push((to, msg));
        }
    }

    pub fn broadcast<'n>(&mut self, to: impl IntoIterator<Item = &'n NodeId>, msg: &ProtocolMessage) {
        for &n in to {
            self.send(n, msg.clone());
        }
    }

    pub fn set_timer(&mut self, key: TimerKey, delay: Tick) {
        self.effects.timers.push((key, Some(delay)));
    }

    pub fn cancel_timer(&mut self, key: TimerKey) {
        self.effects.timers.push((key, None));
    }

    pub fn observe(&mut self, o: Observation) {
        self.effects.observations.push(o);
    }

    pub fn uniform(&mut self, lo: Tick, hi: Tick) -> Tick {
        if hi <= lo {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Crash(NodeId),
    Restart(NodeId),
    DropRate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub nodes: BTreeSet<NodeId>,
    pub from: Tick,
    pub to: Tick,
}

impl Partition {
    fn separates(&self, now: Tick, a: NodeId, b: NodeId) -> bool {
        (self.from..self.to).contains(&now) && self.nodes.contains(&a) != self.nodes.contains(&b)
    }
}

enum EventKind {
    Arrive { from: NodeId, to: NodeId, msg: ProtocolMessage },
    Handle { from: NodeId, to: NodeId, msg: ProtocolMessage, incarnation: u64 },
    Timer { node: NodeId, key: TimerKey, generation: u64, incarnation: u64 },
    Control { node: NodeId, ctl: Control },
    Fault(Fault),
}

struct Event {
    at: Tick,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

struct Status {
    up: bool,
    incarnation: u64,
    /// End of the handling queue in units of `1 / processing_rate` ticks.
    busy_until: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub latency: LatencyModel,
    pub drop_rate: f64,
}

pub struct Engine {
    now: Tick,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: BTreeMap<NodeId, Box<dyn Node>>,
    status: BTreeMap<NodeId, Status>,
    rngs: BTreeMap<NodeId, ChaCha8Rng>,
    timer_gen: BTreeMap<(NodeId, TimerKey), u64>,
    net_rng: ChaCha8Rng,
    seed: u64,
    net: NetworkConfig,
    partitions: Vec<Partition>,
    pub world: World,
    pub metrics: MetricsRecorder,
    pub observer: Observer,
    fresh: Vec<Observation>,
}

/// Stream reserved for the network; node streams use their id.
const NET_STREAM: u64 = u64::MAX;

impl Engine {
    pub fn new(seed: u64, net: NetworkConfig, world: World) -> Self {
        let mut net_rng = ChaCha8Rng::seed_from_u64(seed);
        net_rng.set_stream(NET_STREAM);
        Engine {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            status: BTreeMap::new(),
            rngs: BTreeMap::new(),
            timer_gen: BTreeMap::new(),
            net_rng,
            seed,
            net,
            partitions: Vec::new(),
            world,
            metrics: MetricsRecorder::default(),
            observer: Observer::default(),
            fresh: Vec::new(),
        }
    }

    pub fn add_node(&mut self, node: Box<dyn Node>) {
        let id = node.id();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(id.0));
        self.rngs.insert(id, rng);
        self.status.insert(id, Status { up: true, incarnation: 0, busy_until: 0 });
        self.nodes.insert(id, node);
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn node(&self, id: NodeId) -> Option<&dyn Node> {
        self.nodes.get(&id).map(|b| b.as_ref())
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.status.get(&id).is_some_and(|s| s.up)
    }

    pub fn add_partition(&mut self, p: Partition) {
        self.partitions.push(p);
    }

    pub fn drop_rate(&self) -> f64 {
        self.net.drop_rate
    }

    fn push(&mut self, at: Tick, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event { at, seq: self.seq, kind }));
    }

    pub fn schedule_control(&mut self, at: Tick, node: NodeId, ctl: Control) {
        self.push(at.max(self.now), EventKind::Control { node, ctl });
    }

    pub fn schedule_fault(&mut self, at: Tick, fault: Fault) {
        self.push(at.max(self.now), EventKind::Fault(fault));
    }

    /// Calls `on_start` on every node at the current time.
    pub fn start_all(&mut self) {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            self.dispatch(id, |n, cx| n.on_start(cx));
        }
    }

    pub fn next_time(&self) -> Option<Tick> {
        self.queue.peek().map(|Reverse(e)| e.at)
    }

    /// Observations produced since the last call.
    pub fn take_observations(&mut self) -> Vec<Observation> {
        std::mem::take(&mut self.fresh)
    }

    /// Processes one event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.queue.pop() else { return false };
        self.now = ev.at;
        match ev.kind {
            EventKind::Arrive { from, to, msg } => self.arrive(from, to, msg),
            EventKind::Handle { from, to, msg, incarnation } => {
                if self.alive_as(to, incarnation) {
                    self.dispatch(to, |n, cx| n.on_message(from, msg, cx));
                }
            }
            EventKind::Timer { node, key, generation, incarnation } => {
                if self.alive_as(node, incarnation) && self.timer_gen.get(&(node, key)) == Some(&generation) {
                    self.dispatch(node, |n, cx| n.on_timer(key, cx));
                }
            }
            EventKind::Control { node, ctl } => {
                if self.is_up(node) {
                    self.dispatch(node, |n, cx| n.on_control(ctl, cx));
                }
            }
            EventKind::Fault(f) => self.apply_fault(f),
        }
        true
    }

    fn alive_as(&self, id: NodeId, incarnation: u64) -> bool {
        self.status.get(&id).is_some_and(|s| s.up && s.incarnation == incarnation)
    }

    fn arrive(&mut self, from: NodeId, to: NodeId, msg: ProtocolMessage) {
        let Some(st) = self.status.get_mut(&to) else { return };
        if !st.up {
            self.metrics.record_lost(&msg);
            return;
        }
        self.metrics.record_delivery(self.now, &msg);
        let rate = u64::from(self.net.latency.processing_rate);
        if rate == 0 {
            self.dispatch(to, |n, cx| n.on_message(from, msg, cx));
        } else {
            let start = st.busy_until.max(self.now * rate);
            st.busy_until = start + 1;
            let (at, incarnation) = (st.busy_until.div_ceil(rate), st.incarnation);
            self.push(at, EventKind::Handle { from, to, msg, incarnation });
        }
    }

    fn apply_fault(&mut self, f: Fault) {
        match f {
            Fault::Crash(id) => {
                if let Some(st) = self.status.get_mut(&id) {
                    if st.up {
                        st.up = false;
                        st.incarnation += 1;
                        if let Some(n) = self.nodes.get_mut(&id) {
                            n.on_crash();
                        }
                        self.emit(Observation::Crashed { node: id });
                    }
                }
            }
            Fault::Restart(id) => {
                let now = self.now;
                if let Some(st) = self.status.get_mut(&id) {
                    if !st.up {
                        st.up = true;
                        st.busy_until = now * u64::from(self.net.latency.processing_rate);
                        self.emit(Observation::Restarted { node: id });
                        self.dispatch(id, |n, cx| n.on_restart(cx));
                    }
                }
            }
            Fault::DropRate(p) => self.net.drop_rate = p.clamp(0.0, 1.0),
        }
    }

    fn emit(&mut self, o: Observation) {
        self.observer.observe(&o, &self.world);
        self.metrics.observe(self.now, &o);
        self.fresh.push(o);
    }

    fn dispatch(&mut self, id: NodeId, f: impl FnOnce(&mut dyn Node, &mut Cx<'_>)) {
        let mut effects = Effects::default();
        {
            let (Some(node), Some(rng)) = (self.nodes.get_mut(&id), self.rngs.get_mut(&id)) else { return };
            let mut cx = Cx { now: self.now, me: id, rng, world: &self.world, effects: &mut effects };
            f(node.as_mut(), &mut cx);
        }
        self.apply(id, effects);
    }

    fn apply(&mut self, id: NodeId, effects: Effects) {
        let Effects { sends, timers, observations } = effects;
        for o in observations {
            self.emit(o);
        }
        let incarnation = self.status[&id].incarnation;
        for (key, delay) in timers {
            let generation = {
                let g = self.timer_gen.entry((id, key)).or_insert(0);
                *g += 1;
                *g
            };
            if let Some(d) = delay {
                self.push(self.now + d, EventKind::Timer { node: id, key, generation, incarnation });
            }
        }
        for (to, msg) in sends {
            if !self.nodes.contains_key(&to) {
                continue;
            }
            if self.partitions.iter().any(|p| p.separates(self.now, id, to)) {
                self.metrics.record_dropped(&msg);
                continue;
            }
            if self.net.drop_rate > 0.0 && self.net_rng.gen_bool(self.net.drop_rate) {
                self.metrics.record_dropped(&msg);
                continue;
            }
            let delay = self.latency(id, to, msg.scope.layer);
            self.push(self.now + delay, EventKind::Arrive { from: id, to, msg });
        }
    }

    fn latency(&mut self, a: NodeId, b: NodeId, layer: Layer) -> Tick {
        let km = match (self.world.geo.get(&a), self.world.geo.get(&b)) {
            (Some(x), Some(y)) => haversine_distance(x, y) / 1000.0,
            _ => 0.0,
        };
        self.net.latency.sample(layer, km, &mut self.net_rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::message::Body;
    use crate::sim::world::ProtocolParams;

    struct Pinger {
        id: NodeId,
        peer: NodeId,
        got: Vec<(Tick, NodeId)>,
        fired: u32,
    }

    impl Node for Pinger {
        fn id(&self) -> NodeId {
            self.id
        }
        fn on_start(&mut self, cx: &mut Cx<'_>) {
            cx.send(self.peer, ProtocolMessage::new(SubLayer::leaf(0), Body::Vote { term: 1, granted: true }));
            cx.set_timer(TimerKey::new(SubLayer::leaf(0), TimerKind::Election), 100);
            cx.set_timer(TimerKey::new(SubLayer::leaf(0), TimerKind::Heartbeat), 10);
            cx.cancel_timer(TimerKey::new(SubLayer::leaf(0), TimerKind::Heartbeat));
        }
        fn on_message(&mut self, from: NodeId, _: ProtocolMessage, cx: &mut Cx<'_>) {
            self.got.push((cx.now, from));
        }
        fn on_timer(&mut self, _: TimerKey, _: &mut Cx<'_>) {
            self.fired += 1;
        }
        fn on_control(&mut self, _: Control, _: &mut Cx<'_>) {}
        fn on_crash(&mut self) {}
        fn as_any(&self) -> &dyn std::any::Any {
            self
        }
    }

    fn engine(seed: u64, rate: u32) -> Engine {
        let latency = LatencyModel { processing_rate: rate, ..LatencyModel::default() };
        let mut e = Engine::new(seed, NetworkConfig { latency, drop_rate: 0.0 }, World::new(ProtocolParams::default()));
        for (a, b) in [(0, 1), (1, 0), (2, 1)] {
            e.add_node(Box::new(Pinger { id: NodeId(a), peer: NodeId(b), got: vec![], fired: 0 }));
        }
        e.start_all();
        e
    }

    fn run(e: &mut Engine) {
        while e.step() {}
    }

    fn pinger(e: &Engine, id: u32) -> &Pinger {
        e.node(NodeId(id)).unwrap().as_any().downcast_ref::<Pinger>().unwrap()
    }

    #[test]
    fn same_seed_same_trace() {
        let (mut a, mut b) = (engine(5, 1), engine(5, 1));
        run(&mut a);
        run(&mut b);
        assert_eq!(pinger(&a, 1).got, pinger(&b, 1).got);
        assert_eq!(pinger(&a, 0).fired, 1);
        assert_eq!(a.metrics.delivered_messages(), 3);
    }

    #[test]
    fn processing_serializes_handling() {
        let mut e = engine(1, 1);
        run(&mut e);
        let got = &pinger(&e, 1).got;
        assert_eq!(got.len(), 2);
        assert!(got[1].0 > got[0].0);
    }

    #[test]
    fn crashed_node_receives_nothing_and_timers_die() {
        let mut e = engine(2, 0);
        e.schedule_fault(0, Fault::Crash(NodeId(1)));
        run(&mut e);
        assert!(pinger(&e, 1).got.is_empty());
        assert_eq!(pinger(&e, 1).fired, 0);
        assert_eq!(e.metrics.delivered_messages(), 1);
    }

    #[test]
    fn full_drop_delivers_nothing() {
        let mut e = engine(3, 0);
        e.net.drop_rate = 1.0;
        e.start_all();
        run(&mut e);
        // Only the three messages from the first start precede the drop.
        assert_eq!(e.metrics.delivered_messages(), 3);
        assert_eq!(e.metrics.dropped_messages(), 3);
    }
}
