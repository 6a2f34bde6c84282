//! Pairwise reputation graph and per-node scoring.
//!
//! Arc `(i, j)` carries the reputation `ω(i, j)` that node `i` assigns to `j`.
//! A node's outgoing weights are normalized to sum to one, and a node's
//! reputation score `τ` is the sum of the normalized weights it receives.
//! Combined with the event-distance score `σ`, this yields the candidate
//! group formation score `α·τ + β·σ`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;

pub const DEFAULT_R_MAX: f64 = 100.0;

/// Weight carried by a newly created arc.
pub const NEW_ARC_WEIGHT: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ReputationError {
    #[error("self-arc on {0}")]
    SelfArc(NodeId),
    #[error("weight {weight} outside [0, {r_max}]")]
    WeightOutOfRange { weight: f64, r_max: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no arc {0} -> {1}")]
    MissingArc(NodeId, NodeId),
    #[error("{0} has zero total outgoing weight")]
    ZeroOutgoing(NodeId),
    #[error("non-positive distance {distance} for {node}")]
    NonPositiveDistance { node: NodeId, distance: f64 },
    #[error("invalid r_max {0}")]
    InvalidCap(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundOutcome {
    Honest,
    ForkCausing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationGraph {
    nodes: BTreeSet<NodeId>,
    weights: BTreeMap<(NodeId, NodeId), f64>,
    r_max: f64,
}

impl ReputationGraph {
    pub fn new(r_max: f64) -> Result<Self, ReputationError> {
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(ReputationError::InvalidCap(r_max));
        }
        Ok(ReputationGraph { nodes: BTreeSet::new(), weights: BTreeMap::new(), r_max })
    }

    pub fn with_nodes(r_max: f64, nodes: impl IntoIterator<Item = NodeId>) -> Result<Self, ReputationError> {
        let mut g = Self::new(r_max)?;
        g.nodes.extend(nodes);
        Ok(g)
    }

    /// Every ordered pair joined by an arc of [`NEW_ARC_WEIGHT`].
    pub fn complete(r_max: f64, nodes: impl IntoIterator<Item = NodeId>) -> Result<Self, ReputationError> {
        let mut g = Self::with_nodes(r_max, nodes)?;
        let ids: Vec<NodeId> = g.nodes.iter().copied().collect();
        for &a in &ids {
            for &b in &ids {
                if a != b {
                    g.weights.insert((a, b), NEW_ARC_WEIGHT.min(r_max));
                }
            }
        }
        Ok(g)
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    pub fn add_node(&mut self, node: NodeId) {
        self.nodes.insert(node);
    }

    pub fn weight(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.weights.get(&(from, to)).copied()
    }

    pub fn arcs(&self) -> impl Iterator<Item = ((NodeId, NodeId), f64)> + '_ {
        self.weights.iter().map(|(&k, &w)| (k, w))
    }

    /// Sets `ω(from, to)`, registering both endpoints.
    pub fn assign(&mut self, from: NodeId, to: NodeId, weight: f64) -> Result<(), ReputationError> {
        if from == to {
            return Err(ReputationError::SelfArc(from));
        }
        if !(0.0..=self.r_max).contains(&weight) {
            return Err(ReputationError::WeightOutOfRange { weight, r_max: self.r_max });
        }
        self.nodes.insert(from);
        self.nodes.insert(to);
        self.weights.insert((from, to), weight);
        Ok(())
    }

    fn out_arcs(&self, from: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.weights.range((from, NodeId(0))..=(from, NodeId(u32::MAX))).map(|(&(_, to), &w)| (to, w))
    }

    fn out_total(&self, from: NodeId) -> f64 {
        self.out_arcs(from).map(|(_, w)| w).sum()
    }

    /// `ρ(from, to) = ω(from, to) / Σ_k ω(from, k)`.
    pub fn normalized(&self, from: NodeId, to: NodeId) -> Result<f64, ReputationError> {
        let w = self.weight(from, to).ok_or(ReputationError::MissingArc(from, to))?;
        let total = self.out_total(from);
        if total <= 0.0 {
            return Err(ReputationError::ZeroOutgoing(from));
        }
        Ok(w / total)
    }

    /// `τ_node = Σ_j ρ(j, node)`. Senders whose outgoing weight is all zero
    /// distribute nothing.
    pub fn reputation_score(&self, node: NodeId) -> Result<f64, ReputationError> {
        if !self.nodes.contains(&node) {
            return Err(ReputationError::UnknownNode(node));
        }
        Ok(self.all_scores()[&node])
    }

    /// `τ` for every node in one pass.
    pub fn all_scores(&self) -> BTreeMap<NodeId, f64> {
        let mut totals: BTreeMap<NodeId, f64> = BTreeMap::new();
        for (&(from, _), &w) in &self.weights {
            *totals.entry(from).or_default() += w;
        }
        let mut tau: BTreeMap<NodeId, f64> = self.nodes.iter().map(|&n| (n, 0.0)).collect();
        for (&(from, to), &w) in &self.weights {
            let total = totals[&from];
            if total > 0.0 {
                *tau.get_mut(&to).expect("arc endpoints are registered") += w / total;
            }
        }
        tau
    }

    /// Applies one round's reputation feedback: arcs between participants
    /// toward honest nodes gain `delta` (capped at `r_max`), arcs toward
    /// fork-causing nodes are halved. Only existing arcs change.
    pub fn update_after_round(&mut self, outcomes: &BTreeMap<NodeId, RoundOutcome>, delta: f64) {
        for &from in outcomes.keys() {
            for (&to, &outcome) in outcomes {
                let Some(w) = self.weights.get_mut(&(from, to)) else { continue };
                *w = match outcome {
                    RoundOutcome::Honest => (*w + delta).min(self.r_max),
                    RoundOutcome::ForkCausing => (*w / 2.0).max(0.0),
                };
            }
        }
    }
}

/// `σ_node = (Σ_i d_i) / (|V| · d_node)`, `|V|` being the number of entries.
pub fn distance_score(distances: &BTreeMap<NodeId, f64>, node: NodeId) -> Result<f64, ReputationError> {
    let d = *distances.get(&node).ok_or(ReputationError::UnknownNode(node))?;
    let total = checked_total(distances)?;
    Ok(total / (distances.len() as f64 * d))
}

/// `σ` for every entry of the map.
pub fn distance_scores(distances: &BTreeMap<NodeId, f64>) -> Result<BTreeMap<NodeId, f64>, ReputationError> {
    let total = checked_total(distances)?;
    let n = distances.len() as f64;
    Ok(distances.iter().map(|(&id, &d)| (id, total / (n * d))).collect())
}

fn checked_total(distances: &BTreeMap<NodeId, f64>) -> Result<f64, ReputationError> {
    let mut total = 0.0;
    for (&node, &distance) in distances {
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(ReputationError::NonPositiveDistance { node, distance });
        }
        total += distance;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: NodeId,
    pub reputation: f64,
    pub distance_score: f64,
    pub cgf: f64,
}

impl NodeScore {
    pub fn new(node: NodeId, reputation: f64, distance_score: f64, w: ScoreWeights) -> Self {
        NodeScore { node, reputation, distance_score, cgf: w.alpha * reputation + w.beta * distance_score }
    }

    /// A score whose CGF value is given directly.
    pub fn from_cgf(node: NodeId, cgf: f64) -> Self {
        NodeScore { node, reputation: cgf, distance_score: 0.0, cgf }
    }
}

/// Scores every node present in both the graph and the distance map.
pub fn score_nodes(
    graph: &ReputationGraph,
    distances: &BTreeMap<NodeId, f64>,
    weights: ScoreWeights,
) -> Result<Vec<NodeScore>, ReputationError> {
    let tau = graph.all_scores();
    let sigma = distance_scores(distances)?;
    sigma
        .iter()
        .map(|(&node, &s)| {
            let t = *tau.get(&node).ok_or(ReputationError::UnknownNode(node))?;
            Ok(NodeScore::new(node, t, s, weights))
        })
        .collect()
}
