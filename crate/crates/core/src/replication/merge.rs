//! Sub-layer merge: concatenate the sub-layer node lists, then arrange the
//! result as an array-backed binary max-heap on CGF score (ties by smaller
//! node id), so the root is the highest-scoring node of the merged network.

use std::cmp::Ordering;

use thiserror::Error;

use crate::ids::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("upper leader not elected")]
    NoUpperLeader,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredNode {
    pub node: NodeId,
    pub cgf: f64,
}

/// `a` outranks `b`: higher score, then smaller id.
fn outranks(a: &ScoredNode, b: &ScoredNode) -> bool {
    match a.cgf.total_cmp(&b.cgf) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.node < b.node,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedNetwork {
    heap: Vec<ScoredNode>,
}

impl MergedNetwork {
    /// Heap array; index 0 is the root, children of `i` are `2i+1`, `2i+2`.
    pub fn as_slice(&self) -> &[ScoredNode] {
        &self.heap
    }

    pub fn root(&self) -> Option<&ScoredNode> {
        self.heap.first()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.heap.iter().map(|s| s.node)
    }

    pub fn is_heap(&self) -> bool {
        (1..self.heap.len()).all(|i| !outranks(&self.heap[i], &self.heap[(i - 1) / 2]))
    }
}

/// Concatenation step: `sn1` followed by `sn2`.
pub fn concatenate(sn1: &[ScoredNode], sn2: &[ScoredNode]) -> Vec<ScoredNode> {
    let mut merged = Vec::with_capacity(sn1.len() + sn2.len());
    merged.extend_from_slice(sn1);
    merged.extend_from_slice(sn2);
    merged
}

fn sift_down(heap: &mut [ScoredNode], mut i: usize) {
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut top = i;
        if l < heap.len() && outranks(&heap[l], &heap[top]) {
            top = l;
        }
        if r < heap.len() && outranks(&heap[r], &heap[top]) {
            top = r;
        }
        if top == i {
            return;
        }
        heap.swap(i, top);
        i = top;
    }
}

/// Bottom-up heap construction over the merged array.
pub fn build_upper_layer_network(mut merged: Vec<ScoredNode>) -> MergedNetwork {
    for i in (0..merged.len() / 2).rev() {
        sift_down(&mut merged, i);
    }
    MergedNetwork { heap: merged }
}

/// Merges two sub-layer networks. Refused unless the upper leader that
/// authorizes the merge has been elected.
pub fn merge_sublayers(
    sn1: &[ScoredNode],
    sn2: &[ScoredNode],
    upper_leader: Option<NodeId>,
) -> Result<MergedNetwork, MergeError> {
    upper_leader.ok_or(MergeError::NoUpperLeader)?;
    Ok(build_upper_layer_network(concatenate(sn1, sn2)))
}

/// Merges any number of sub-layer networks in order.
pub fn merge_all(parts: &[Vec<ScoredNode>], upper_leader: Option<NodeId>) -> Result<MergedNetwork, MergeError> {
    upper_leader.ok_or(MergeError::NoUpperLeader)?;
    let merged = parts.iter().fold(Vec::new(), |acc, p| concatenate(&acc, p));
    Ok(build_upper_layer_network(merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sn(v: &[(u32, f64)]) -> Vec<ScoredNode> {
        v.iter().map(|&(n, cgf)| ScoredNode { node: NodeId(n), cgf }).collect()
    }

    #[test]
    fn concatenation_order() {
        let a = sn(&[(0, 1.0), (1, 5.0), (2, 3.0)]);
        let b = sn(&[(3, 4.0), (4, 2.0)]);
        let ids: Vec<u32> = concatenate(&a, &b).iter().map(|s| s.node.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let m = merge_sublayers(&a, &b, Some(NodeId(1))).unwrap();
        assert_eq!(m.root().unwrap().node, NodeId(1));
        assert!(m.is_heap());
    }

    #[test]
    fn refused_without_leader() {
        assert_eq!(merge_sublayers(&[], &[], None), Err(MergeError::NoUpperLeader));
    }

    #[test]
    fn ties_favor_smaller_id() {
        let m = build_upper_layer_network(sn(&[(7, 2.0), (3, 2.0), (5, 1.0)]));
        assert_eq!(m.root().unwrap().node, NodeId(3));
    }

    proptest! {
        #[test]
        fn heap_property_and_membership(
            a in prop::collection::vec(0u8..20, 0..30),
            b in prop::collection::vec(0u8..20, 0..30),
        ) {
            let sa: Vec<_> = a.iter().enumerate().map(|(i, &s)| ScoredNode { node: NodeId(i as u32), cgf: f64::from(s) }).collect();
            let sb: Vec<_> = b.iter().enumerate().map(|(i, &s)| ScoredNode { node: NodeId(1000 + i as u32), cgf: f64::from(s) }).collect();
            let m = merge_sublayers(&sa, &sb, Some(NodeId(0))).unwrap();
            prop_assert!(m.is_heap());
            let mut got: Vec<_> = m.nodes().collect();
            let mut want: Vec<_> = sa.iter().chain(&sb).map(|s| s.node).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            if let Some(root) = m.root() {
                let max = sa.iter().chain(&sb).map(|s| s.cgf).fold(f64::MIN, f64::max);
                prop_assert_eq!(root.cgf, max);
            }
        }
    }
}
