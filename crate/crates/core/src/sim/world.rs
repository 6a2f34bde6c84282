//! Scenario-level knowledge shared read-only with every node: positions,
//! sub-layer membership and scores, verify keys, and the leader directory.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::crypto::{
    verify_single, verify_threshold_with, CryptoError, KeyPair, OneTimeSignature, SystemParams, ThresholdOutcome,
    ThresholdPolicy, ThresholdSignatureBundle, VerifyKey, SIGNATURE_BYTES, VERIFY_KEY_BYTES,
};
use crate::geo::{event_distances, haversine_distance, GeoRecord};
use crate::ids::{Layer, NodeId, SubLayer, Tick};
use crate::reputation::{score_nodes, NodeScore, ReputationGraph, ScoreWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateTimer {
    /// The top-ranked candidate times out first; the rest draw from a later band.
    #[default]
    CgfRanked,
    /// Every candidate draws uniformly from the full election window.
    Randomized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdRule {
    TwoThirds,
    Fixed { t: usize },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::TwoThirds
    }
}

impl ThresholdRule {
    /// Policy for `n` signers; a fixed `t` is clamped to `n`.
    pub fn policy(self, n: usize) -> ThresholdPolicy {
        let n = n.max(1);
        let t = match self {
            ThresholdRule::TwoThirds => (2 * n).div_ceil(3),
            ThresholdRule::Fixed { t } => t.clamp(1, n),
        };
        ThresholdPolicy::new(t, n).expect("1 <= t <= n by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    pub election_min: Tick,
    pub election_max: Tick,
    pub heartbeat: Tick,
    /// How long a setup initiator waits for promises or acks.
    pub setup_wait: Tick,
    /// How long an upper leader waits for signature shares.
    pub confirm_wait: Tick,
    pub geo_window: Tick,
    pub displacement_limit_m: f64,
    pub nearby_radius_m: f64,
    pub batch_size: u64,
    pub batch_retry: Tick,
    pub max_entries_per_append: usize,
    pub candidate_timer: CandidateTimer,
    pub threshold: ThresholdRule,
    pub reputation_delta: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            election_min: 150,
            election_max: 300,
            heartbeat: 50,
            setup_wait: 100,
            confirm_wait: 300,
            geo_window: 500,
            displacement_limit_m: 100.0,
            nearby_radius_m: 1000.0,
            batch_size: 4,
            batch_retry: 400,
            max_entries_per_append: 64,
            candidate_timer: CandidateTimer::CgfRanked,
            threshold: ThresholdRule::TwoThirds,
            reputation_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubLayerInfo {
    /// Participants, in the order the driver supplied them.
    pub members: Vec<NodeId>,
    pub cap: usize,
    /// Reference location distance scores are measured from.
    pub event: GeoRecord,
    pub scores: BTreeMap<NodeId, NodeScore>,
    nearby: BTreeMap<NodeId, Vec<NodeId>>,
}

impl SubLayerInfo {
    pub fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    pub fn nearby(&self, node: NodeId) -> &[NodeId] {
        self.nearby.get(&node).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }
}

pub struct CryptoWorld {
    pub params: SystemParams,
    pub seed: u64,
    pairs: BTreeMap<NodeId, KeyPair>,
    /// Memoized pairing checks. Verification is a pure function of
    /// `(v, σ, digest)`, so every node that checks the same share gets the
    /// same answer without repeating the pairings.
    checked: RefCell<HashMap<ShareKey, bool>>,
}

type ShareKey = ([u8; VERIFY_KEY_BYTES], [u8; SIGNATURE_BYTES], [u8; 32]);

impl CryptoWorld {
    pub fn new(params: SystemParams, seed: u64) -> Self {
        CryptoWorld { params, seed, pairs: BTreeMap::new(), checked: RefCell::default() }
    }

    pub fn check_share(&self, sig: &OneTimeSignature, v: &VerifyKey) -> bool {
        let key = (v.to_bytes(), sig.sigma_bytes(), sig.message_digest.0);
        if let Some(&ok) = self.checked.borrow().get(&key) {
            return ok;
        }
        let ok = verify_single(&self.params, sig, v);
        self.checked.borrow_mut().insert(key, ok);
        ok
    }

    pub fn check_bundle(
        &self,
        bundle: &ThresholdSignatureBundle,
        keys: &BTreeMap<NodeId, VerifyKey>,
    ) -> Result<ThresholdOutcome, CryptoError> {
        verify_threshold_with(&bundle.signatures, keys, bundle.policy, |sig, v| self.check_share(sig, v))
    }

    pub fn enroll(&mut self, node: NodeId) {
        if !self.pairs.contains_key(&node) {
            let kp = KeyPair::generate(&self.params, node, self.seed);
            self.pairs.insert(node, kp);
        }
    }

    pub fn key_pair(&self, node: NodeId) -> Option<&KeyPair> {
        self.pairs.get(&node)
    }

    pub fn verify_keys<'a>(&self, nodes: impl IntoIterator<Item = &'a NodeId>) -> BTreeMap<NodeId, VerifyKey> {
        nodes.into_iter().filter_map(|n| self.pairs.get(n).map(|k| (*n, k.verify_key))).collect()
    }
}

pub struct World {
    pub params: ProtocolParams,
    pub weights: ScoreWeights,
    pub geo: BTreeMap<NodeId, GeoRecord>,
    pub reputation: ReputationGraph,
    pub sublayers: BTreeMap<SubLayer, SubLayerInfo>,
    /// Confirmed leader per sub-layer, as published by the driver.
    pub leaders: BTreeMap<SubLayer, NodeId>,
    pub crypto: Option<CryptoWorld>,
    /// Nodes with the deliberate double-vote defect.
    pub canary: BTreeSet<NodeId>,
    pub top: Option<SubLayer>,
}

impl World {
    pub fn new(params: ProtocolParams) -> Self {
        World {
            params,
            weights: ScoreWeights::default(),
            geo: BTreeMap::new(),
            reputation: ReputationGraph::new(crate::reputation::DEFAULT_R_MAX).expect("positive cap"),
            sublayers: BTreeMap::new(),
            leaders: BTreeMap::new(),
            crypto: None,
            canary: BTreeSet::new(),
            top: None,
        }
    }

    pub fn sublayer(&self, scope: SubLayer) -> Option<&SubLayerInfo> {
        self.sublayers.get(&scope)
    }

    /// Registers (or replaces) a sub-layer and computes scores and
    /// neighbor sets for its members.
    pub fn register_sublayer(&mut self, scope: SubLayer, members: Vec<NodeId>, cap: usize, event: GeoRecord) {
        let mut info = SubLayerInfo { members, cap, event, scores: BTreeMap::new(), nearby: BTreeMap::new() };
        self.fill_nearby(scope.layer, &mut info);
        info.scores = self.compute_scores(&info);
        self.sublayers.insert(scope, info);
    }

    fn fill_nearby(&self, layer: Layer, info: &mut SubLayerInfo) {
        let radius = self.params.nearby_radius_m;
        for &a in &info.members {
            let near: Vec<NodeId> = info
                .members
                .iter()
                .copied()
                .filter(|&b| {
                    b != a
                        && match (layer, self.geo.get(&a), self.geo.get(&b)) {
                            (Layer::Leaf, Some(x), Some(y)) => haversine_distance(x, y) <= radius,
                            _ => true,
                        }
                })
                .collect();
            info.nearby.insert(a, near);
        }
    }

    fn compute_scores(&self, info: &SubLayerInfo) -> BTreeMap<NodeId, NodeScore> {
        let positions = info.members.iter().filter_map(|n| self.geo.get(n).map(|g| (*n, g)));
        let distances = event_distances(&info.event, positions);
        score_nodes(&self.reputation, &distances, self.weights)
            .map(|v| v.into_iter().map(|s| (s.node, s)).collect())
            .unwrap_or_default()
    }

    /// Refreshes scores and neighbor sets after positions or reputation changed.
    pub fn rescore(&mut self) {
        let scopes: Vec<SubLayer> = self.sublayers.keys().copied().collect();
        for s in scopes {
            let mut info = self.sublayers.remove(&s).expect("key just listed");
            self.fill_nearby(s.layer, &mut info);
            info.scores = self.compute_scores(&info);
            self.sublayers.insert(s, info);
        }
    }

    pub fn score(&self, scope: SubLayer, node: NodeId) -> Option<f64> {
        self.sublayers.get(&scope)?.scores.get(&node).map(|s| s.cgf)
    }
}
