//! Scenario configuration: one JSON document, unknown keys rejected,
//! every range checked up front with the failing field named.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoRecord;
use crate::ids::{Layer, NodeId, Tick};
use crate::reputation::{ScoreWeights, DEFAULT_R_MAX};
use crate::sim::latency::LatencyModel;
use crate::sim::world::{ProtocolParams, ThresholdRule};

pub const MAX_NODES: usize = 5000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario:\n{}", list(.0))]
    Invalid(Vec<FieldError>),
}

fn list(errors: &[FieldError]) -> String {
    errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

/// Node counts to sweep: a single count, an explicit list, or a range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSweep {
    One(usize),
    List(Vec<usize>),
    Range(NodeRange),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRange {
    pub from: usize,
    pub to: usize,
    #[serde(default = "one")]
    pub step: usize,
}

fn one() -> usize {
    1
}

impl NodeSweep {
    /// Inclusive range semantics; an invalid range yields nothing.
    pub fn counts(&self) -> Vec<usize> {
        match self {
            NodeSweep::One(n) => vec![*n],
            NodeSweep::List(v) => v.clone(),
            NodeSweep::Range(r) if r.step > 0 && r.from <= r.to => (r.from..=r.to).step_by(r.step).collect(),
            NodeSweep::Range(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// All nodes form one sub-layer at the given layer.
    Single { layer: Layer },
    /// Leaf regions, middle sub-layers over groups of regions, one top sub-layer.
    Hierarchy { leaf_regions: usize, middle_groups: usize },
}

impl Default for Topology {
    fn default() -> Self {
        Topology::Single { layer: Layer::Leaf }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerCaps {
    pub leaf: usize,
    pub middle: usize,
    pub top: usize,
}

impl Default for LayerCaps {
    fn default() -> Self {
        LayerCaps { leaf: 20, middle: 40, top: 80 }
    }
}

impl LayerCaps {
    pub fn get(&self, layer: Layer) -> usize {
        match layer {
            Layer::Leaf => self.leaf,
            Layer::Middle => self.middle,
            Layer::Top => self.top,
        }
    }
}

/// Candidate-group size `M` per layer; defaults to the layer cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateSizes {
    pub leaf: Option<usize>,
    pub middle: Option<usize>,
    pub top: Option<usize>,
}

impl CandidateSizes {
    pub fn get(&self, layer: Layer) -> Option<usize> {
        match layer {
            Layer::Leaf => self.leaf,
            Layer::Middle => self.middle,
            Layer::Top => self.top,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Weights {
    fn default() -> Self {
        let w = ScoreWeights::default();
        Weights { alpha: w.alpha, beta: w.beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoPoint {
    pub longitude: f64,
    pub latitude: f64,
}

impl Default for GeoPoint {
    fn default() -> Self {
        GeoPoint { longitude: 8.54, latitude: 47.37 }
    }
}

/// How node positions are drawn around the event location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Placement {
    /// Nodes of one region lie uniformly within this disk.
    pub radius_m: f64,
    /// Distance between the event location and each leaf region's center.
    pub region_spacing_m: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Placement { radius_m: 400.0, region_spacing_m: 20_000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    Crash {
        node: u32,
        at: Tick,
    },
    Restart {
        node: u32,
        at: Tick,
    },
    /// Crashes whichever node leads sub-layer 0 of `layer` at `at`
    /// (the flat group for classical runs).
    CrashLeader {
        at: Tick,
        #[serde(default = "leaf")]
        layer: Layer,
        #[serde(default)]
        restart_after: Option<Tick>,
    },
    DropRate {
        probability: f64,
        #[serde(default)]
        at: Tick,
    },
    Partition {
        nodes: Vec<u32>,
        from: Tick,
        to: Tick,
    },
    TamperSignature {
        node: u32,
    },
    Relocate {
        node: u32,
        at: Tick,
        bearing_deg: f64,
        distance_m: f64,
    },
    FreezeGeo {
        node: u32,
        at: Tick,
    },
}

fn leaf() -> Layer {
    Layer::Leaf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub count: usize,
    pub interval: Tick,
    /// Fixed submission start; by default the first transaction goes out
    /// once the scenario's leader is established.
    pub start: Option<Tick>,
    pub payload_bytes: usize,
    /// A client resubmits a transaction still uncommitted after this many
    /// ticks. Zero disables retries.
    pub retry_after: Tick,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { count: 1, interval: 10, start: None, payload_bytes: 32, retry_after: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once every submitted transaction has committed (or once the
    /// leader is established when the workload is empty).
    #[default]
    AllCommitted,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub nodes: NodeSweep,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub caps: LayerCaps,
    #[serde(default)]
    pub candidates: CandidateSizes,
    /// Classical baseline: how many of the `n` nodes run election timers.
    #[serde(default)]
    pub classical_candidates: Option<usize>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    /// Initial arc weights are drawn from `[1, 1 + jitter]`.
    #[serde(default)]
    pub reputation_jitter: f64,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub workload: Workload,
    /// A list or an inclusive `{"from", "to"}` range.
    #[serde(default = "default_seeds", deserialize_with = "seed_list")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub event: GeoPoint,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "default_horizon")]
    pub horizon: Tick,
    #[serde(default)]
    pub stop: StopRule,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_r_max() -> f64 {
    DEFAULT_R_MAX
}

fn seed_list<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Range {
        from: u64,
        to: u64,
    }
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Seeds {
        List(Vec<u64>),
        Range(Range),
    }
    Ok(match Seeds::deserialize(d)? {
        Seeds::List(v) => v,
        Seeds::Range(r) => (r.from..=r.to).collect(),
    })
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn default_horizon() -> Tick {
    20_000
}

impl ScenarioConfig {
    /// A validated default scenario with `n` nodes.
    pub fn with_nodes(n: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "nodes": n })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.nodes.counts()
    }

    /// Candidate-group size for `layer`.
    pub fn group_size(&self, layer: Layer) -> usize {
        self.candidates.get(layer).unwrap_or_else(|| self.caps.get(layer))
    }

    pub fn event_record(&self) -> GeoRecord {
        GeoRecord { longitude: self.event.longitude, latitude: self.event.latitude, timestamp: 0 }
    }

    pub fn score_weights(&self) -> ScoreWeights {
        ScoreWeights { alpha: self.weights.alpha, beta: self.weights.beta }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Validator::default();
        self.check_nodes(&mut v);
        let n_min = self.node_counts().into_iter().min().unwrap_or(1);

        let caps = [self.caps.leaf, self.caps.middle, self.caps.top];
        for (layer, cap) in Layer::ALL.iter().zip(caps) {
            v.check(cap >= 1, format!("caps.{layer}"), "must be at least 1");
            if let Some(m) = self.candidates.get(*layer) {
                v.check(
                    (1..=cap).contains(&m),
                    format!("candidates.{layer}"),
                    format!("must be in 1..={cap} (the layer cap)"),
                );
            }
        }
        v.check(
            self.caps.leaf <= self.caps.middle && self.caps.middle <= self.caps.top,
            "caps",
            "must not decrease from leaf to top",
        );
        if let Some(cr) = self.classical_candidates {
            v.check((1..=n_min).contains(&cr), "classical_candidates", format!("must be in 1..={n_min}"));
        }
        if let Topology::Hierarchy { leaf_regions, middle_groups } = self.topology {
            v.check((1..=n_min).contains(&leaf_regions), "topology.leaf_regions", format!("must be in 1..={n_min}"));
            v.check(
                (1..=leaf_regions.max(1)).contains(&middle_groups),
                "topology.middle_groups",
                "must be in 1..=leaf_regions",
            );
        }

        for (name, x) in [("weights.alpha", self.weights.alpha), ("weights.beta", self.weights.beta)] {
            v.check(x.is_finite() && x >= 0.0, name, "must be finite and non-negative");
        }
        v.check(self.r_max.is_finite() && self.r_max > 0.0, "r_max", "must be positive");
        v.check(
            self.reputation_jitter.is_finite()
                && self.reputation_jitter >= 0.0
                && 1.0 + self.reputation_jitter <= self.r_max,
            "reputation_jitter",
            "must be non-negative with 1 + jitter <= r_max",
        );

        self.check_protocol(&mut v, n_min);
        if let Err(e) = self.latency.validate() {
            v.push("latency", e.to_string());
        }
        self.check_faults(&mut v, n_min);

        v.check(self.workload.interval >= 1, "workload.interval", "must be at least 1");
        v.check(!self.seeds.is_empty(), "seeds", "must not be empty");
        if let Err(e) = GeoRecord::new(self.event.longitude, self.event.latitude, 0) {
            v.push("event", e.to_string());
        }
        v.check(
            self.placement.radius_m.is_finite() && self.placement.radius_m > 0.0,
            "placement.radius_m",
            "must be positive",
        );
        v.check(
            self.placement.region_spacing_m.is_finite() && self.placement.region_spacing_m >= 0.0,
            "placement.region_spacing_m",
            "must be non-negative",
        );
        v.check(self.horizon >= 1, "horizon", "must be at least 1");
        v.finish()
    }

    fn check_nodes(&self, v: &mut Validator) {
        match &self.nodes {
            NodeSweep::List(l) if l.is_empty() => v.push("nodes", "list must not be empty"),
            NodeSweep::Range(r) if r.step == 0 => v.push("nodes.step", "must be at least 1"),
            NodeSweep::Range(r) if r.from > r.to => v.push("nodes", "from must not exceed to"),
            _ => {}
        }
        for n in self.node_counts() {
            if !(1..=MAX_NODES).contains(&n) {
                v.push("nodes", format!("{n} is outside 1..={MAX_NODES}"));
            }
        }
    }

    fn check_protocol(&self, v: &mut Validator, n_min: usize) {
        let p = &self.protocol;
        v.check(
            p.election_min >= 1 && p.election_min < p.election_max,
            "protocol.election_min",
            "must satisfy 1 <= election_min < election_max",
        );
        v.check(
            p.heartbeat >= 1 && p.heartbeat < p.election_min,
            "protocol.heartbeat",
            "must satisfy 1 <= heartbeat < election_min",
        );
        for (name, x) in [
            ("protocol.setup_wait", p.setup_wait),
            ("protocol.confirm_wait", p.confirm_wait),
            ("protocol.batch_retry", p.batch_retry),
            ("protocol.batch_size", p.batch_size),
        ] {
            v.check(x >= 1, name, "must be at least 1");
        }
        v.check(p.geo_window >= 2, "protocol.geo_window", "must be at least 2");
        v.check(p.max_entries_per_append >= 1, "protocol.max_entries_per_append", "must be at least 1");
        for (name, x) in [
            ("protocol.displacement_limit_m", p.displacement_limit_m),
            ("protocol.nearby_radius_m", p.nearby_radius_m),
            ("protocol.reputation_delta", p.reputation_delta),
        ] {
            v.check(x.is_finite() && x >= 0.0, name, "must be finite and non-negative");
        }
        if let ThresholdRule::Fixed { t } = p.threshold {
            v.check((1..=n_min).contains(&t), "protocol.threshold.t", format!("must be in 1..={n_min}"));
        }
    }

    fn check_faults(&self, v: &mut Validator, n_min: usize) {
        let node_ok = |id: u32| (id as usize) < n_min;
        for (i, f) in self.faults.iter().enumerate() {
            let field = |s: &str| format!("faults[{i}].{s}");
            match f {
                FaultSpec::Crash { node, .. }
                | FaultSpec::Restart { node, .. }
                | FaultSpec::TamperSignature { node }
                | FaultSpec::FreezeGeo { node, .. } => {
                    v.check(node_ok(*node), field("node"), format!("must be below {n_min}"));
                }
                FaultSpec::Relocate { node, bearing_deg, distance_m, .. } => {
                    v.check(node_ok(*node), field("node"), format!("must be below {n_min}"));
                    v.check(bearing_deg.is_finite(), field("bearing_deg"), "must be finite");
                    v.check(distance_m.is_finite() && *distance_m >= 0.0, field("distance_m"), "must be non-negative");
                }
                FaultSpec::DropRate { probability, .. } => {
                    v.check((0.0..=1.0).contains(probability), field("probability"), "must be in [0, 1]");
                }
                FaultSpec::Partition { nodes, from, to } => {
                    v.check(!nodes.is_empty(), field("nodes"), "must not be empty");
                    v.check(nodes.iter().all(|&n| node_ok(n)), field("nodes"), format!("ids must be below {n_min}"));
                    v.check(from < to, field("from"), "must be before to");
                }
                FaultSpec::CrashLeader { .. } => {}
            }
        }
    }
}

#[derive(Default)]
struct Validator {
    errors: Vec<FieldError>,
}

impl Validator {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.errors.push(FieldError { field: field.into(), message: message.into() });
    }

    fn check(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.push(field, message);
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(self.errors))
        }
    }
}

/// Node ids `0..n`.
pub fn node_ids(n: usize) -> impl Iterator<Item = NodeId> {
    (0..n as u32).map(NodeId)
}
