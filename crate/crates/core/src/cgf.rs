//! Candidate group formation: pick exactly `m` nodes maximizing total CGF.
//!
//! The objective is linear with a single cardinality constraint, so taking
//! the first `m` in score order (descending, ties by ascending id) is exact.
//! Partial selection makes that `O(n + m log m)`. [`brute_force_cgf`]
//! enumerates every subset and is kept as an independent oracle for small
//! instances.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;
use crate::reputation::NodeScore;

/// Largest instance [`brute_force_cgf`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum CgfError {
    #[error("group size {m} outside 1..={n}")]
    GroupSize { m: usize, n: usize },
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("instance of {0} nodes exceeds brute-force limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    /// Descending CGF, ties by ascending id.
    pub members: Vec<NodeId>,
    pub m: usize,
    pub objective_value: f64,
}

impl CandidateGroup {
    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Total order used for selection: higher CGF first, then smaller id.
pub fn rank_order(a: &NodeScore, b: &NodeScore) -> Ordering {
    b.cgf.total_cmp(&a.cgf).then(a.node.cmp(&b.node))
}

fn validate(scores: &[NodeScore], m: usize) -> Result<(), CgfError> {
    if m == 0 || m > scores.len() {
        return Err(CgfError::GroupSize { m, n: scores.len() });
    }
    let mut ids: Vec<NodeId> = scores.iter().map(|s| s.node).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CgfError::DuplicateNode(w[0]));
    }
    Ok(())
}

/// Sums in rank order so that equal member multisets give bit-identical
/// objectives.
fn objective(ranked: &[NodeScore]) -> f64 {
    ranked.iter().map(|s| s.cgf).sum()
}

pub fn solve_cgf(scores: &[NodeScore], m: usize) -> Result<CandidateGroup, CgfError> {
    validate(scores, m)?;
    let mut ranked = scores.to_vec();
    // rank_order is total, so the first m after selection are exactly the top m.
    if m < ranked.len() {
        ranked.select_nth_unstable_by(m - 1, rank_order);
        ranked.truncate(m);
    }
    ranked.sort_unstable_by(rank_order);
    Ok(CandidateGroup { members: ranked.iter().map(|s| s.node).collect(), m, objective_value: objective(&ranked) })
}

/// Exhaustive search over all `C(n, m)` subsets. Among equal objectives the
/// lexicographically smallest ascending id list wins.
pub fn brute_force_cgf(scores: &[NodeScore], m: usize) -> Result<CandidateGroup, CgfError> {
    if scores.len() > BRUTE_FORCE_LIMIT {
        return Err(CgfError::TooLarge(scores.len()));
    }
    validate(scores, m)?;
    let n = scores.len();
    let mut best: Option<(f64, Vec<NodeId>, Vec<NodeScore>)> = None;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let mut subset: Vec<NodeScore> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| scores[i]).collect();
        subset.sort_by(rank_order);
        let value = objective(&subset);
        let mut ids: Vec<NodeId> = subset.iter().map(|s| s.node).collect();
        ids.sort();
        let better = match &best {
            None => true,
            Some((bv, bids, _)) => value > *bv || (value == *bv && ids < *bids),
        };
        if better {
            best = Some((value, ids, subset));
        }
    }
    let (objective_value, _, subset) = best.expect("m >= 1 guarantees a subset");
    Ok(CandidateGroup { members: subset.iter().map(|s| s.node).collect(), m, objective_value })
}

/// Median wall time of [`solve_cgf`] over `trials` uniform random instances.
pub fn cgf_runtime_probe(n: usize, m: usize, trials: usize, seed: u64) -> Result<Duration, CgfError> {
    if m == 0 || m > n {
        return Err(CgfError::GroupSize { m, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times: Vec<Duration> = (0..trials.max(1))
        .map(|_| {
            let scores: Vec<NodeScore> =
                (0..n).map(|i| NodeScore::from_cgf(NodeId(i as u32), rng.gen::<f64>())).collect();
            let start = Instant::now();
            let group = solve_cgf(&scores, m).expect("validated sizes");
            let elapsed = start.elapsed();
            std::hint::black_box(group);
            elapsed
        })
        .collect();
    times.sort();
    Ok(times[times.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(values: &[f64]) -> Vec<NodeScore> {
        values.iter().enumerate().map(|(i, &v)| NodeScore::from_cgf(NodeId(i as u32), v)).collect()
    }

    #[test]
    fn picks_top_two() {
        let s = scores(&[5.0, 3.0, 4.0, 1.0]);
        let g = solve_cgf(&s, 2).unwrap();
        assert_eq!(g.members, vec![NodeId(0), NodeId(2)]);
        assert_eq!(g.objective_value, 9.0);
        assert_eq!(brute_force_cgf(&s, 2).unwrap(), g);
    }

    #[test]
    fn full_set_and_ties() {
        let s = scores(&[1.0, 2.0, 3.0]);
        assert_eq!(solve_cgf(&s, 3).unwrap().len(), 3);
        let tied = scores(&[2.0, 7.0, 7.0]);
        assert_eq!(solve_cgf(&tied, 1).unwrap().members, vec![NodeId(1)]);
        let flat = scores(&[1.0; 5]);
        let want = vec![NodeId(0), NodeId(1), NodeId(2)];
        assert_eq!(solve_cgf(&flat, 3).unwrap().members, want);
        assert_eq!(brute_force_cgf(&flat, 3).unwrap().members, want);
    }

    #[test]
    fn singleton_is_argmax() {
        let s = scores(&[0.3, 0.9, 0.1, 0.5]);
        assert_eq!(brute_force_cgf(&s, 1).unwrap().members, vec![NodeId(1)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = scores(&[1.0, 2.0]);
        assert_eq!(solve_cgf(&s, 0), Err(CgfError::GroupSize { m: 0, n: 2 }));
        assert_eq!(solve_cgf(&s, 3), Err(CgfError::GroupSize { m: 3, n: 2 }));
        let dup = vec![NodeScore::from_cgf(NodeId(4), 1.0), NodeScore::from_cgf(NodeId(4), 2.0)];
        assert_eq!(solve_cgf(&dup, 1), Err(CgfError::DuplicateNode(NodeId(4))));
        let big = scores(&[0.0; 21]);
        assert_eq!(brute_force_cgf(&big, 1), Err(CgfError::TooLarge(21)));
    }

    #[test]
    fn minimal_probe() {
        assert!(cgf_runtime_probe(1, 1, 3, 0).is_ok());
        assert!(cgf_runtime_probe(1, 2, 3, 0).is_err());
    }

    fn arb_scores(max: usize) -> impl Strategy<Value = Vec<NodeScore>> {
        prop::collection::vec(prop_oneof![0.0f64..10.0, (0u8..4).prop_map(f64::from)], 1..=max).prop_map(|v| scores(&v))
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in arb_scores(12), pick in 0usize..12) {
            let m = pick % s.len() + 1;
            let fast = solve_cgf(&s, m).unwrap();
            let slow = brute_force_cgf(&s, m).unwrap();
            prop_assert_eq!(&fast.members, &slow.members);
            let sum: f64 = fast.members.iter().map(|id| s[id.0 as usize].cgf).sum();
            prop_assert!((fast.objective_value - sum).abs() < 1e-9);
        }

        #[test]
        fn low_newcomer_does_not_change_selection(s in arb_scores(30), pick in 0usize..30) {
            let m = pick % s.len() + 1;
            let g = solve_cgf(&s, m).unwrap();
            let floor = g.members.iter().map(|id| s[id.0 as usize].cgf).fold(f64::INFINITY, f64::min);
            let mut more = s.clone();
            more.push(NodeScore::from_cgf(NodeId(1000), floor - 1.0));
            prop_assert_eq!(solve_cgf(&more, m).unwrap().members, g.members);
        }

        #[test]
        fn shift_invariant(
            raw in prop::collection::vec(0u8..40, 1..30),
            pick in 0usize..30,
            shift in -100i32..100,
        ) {
            // Quarter-steps and integer shifts keep every sum exact.
            let s = scores(&raw.iter().map(|&q| f64::from(q) / 4.0).collect::<Vec<_>>());
            let m = pick % s.len() + 1;
            let shifted: Vec<_> =
                s.iter().map(|x| NodeScore::from_cgf(x.node, x.cgf + f64::from(shift))).collect();
            prop_assert_eq!(solve_cgf(&s, m).unwrap().members, solve_cgf(&shifted, m).unwrap().members);
        }

        #[test]
        fn objective_monotone_in_m(s in arb_scores(30)) {
            let mut prev = f64::NEG_INFINITY;
            for m in 1..=s.len() {
                let v = solve_cgf(&s, m).unwrap().objective_value;
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }
}
