use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulation time. All protocol timing is expressed in integer ticks.
pub type Tick = u64;

/// Raft term number.
pub type Term = u64;

/// Node identifier. Ordering on ids is the tie-break used everywhere a
/// deterministic choice between equal scores is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

/// Position of a blockchain in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Leaf,
    Middle,
    Top,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Leaf, Layer::Middle, Layer::Top];

    pub fn is_upper(self) -> bool {
        !matches!(self, Layer::Leaf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Leaf => "leaf",
            Layer::Middle => "middle",
            Layer::Top => "top",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sub-layer network: a layer plus the index of the sub-network within it.
/// Every consensus instance (term, votes, log) is scoped to a `SubLayer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubLayer {
    pub layer: Layer,
    pub index: u32,
}

impl SubLayer {
    pub const fn new(layer: Layer, index: u32) -> Self {
        SubLayer { layer, index }
    }

    pub const fn leaf(index: u32) -> Self {
        SubLayer::new(Layer::Leaf, index)
    }
}

impl fmt::Display for SubLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.layer, self.index)
    }
}
