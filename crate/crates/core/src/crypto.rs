//! One-time BLS signatures over identity+location digests and `(t, n)`
//! threshold verification.
//!
//! Signatures live in G1 and verify keys in G2 of BLS12-381. A message is
//! first reduced to its SHA-256 digest; the digest is hashed to G1 and raised
//! to the signing key. Verification checks `e(σ, g2) == e(H(digest), v)`.

use std::collections::BTreeMap;
use std::fmt;

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{multi_miller_loop, pairing, G1Affine, G1Projective, G2Affine, G2Prepared, Gt, Scalar};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ids::NodeId;

pub const SIGNATURE_BYTES: usize = 48;
pub const VERIFY_KEY_BYTES: usize = 96;

const DST: &[u8] = b"LHRAFT-V01-CS01-with-BLS12381G1_XMD:SHA-256_SSWU_RO_";

#[derive(Debug, Error, PartialEq)]
pub enum CryptoError {
    #[error("pairing self-test failed")]
    SelfTest,
    #[error("empty message")]
    EmptyMessage,
    #[error("threshold t={t} invalid for n={n}")]
    Policy { t: usize, n: usize },
    #[error("policy expects {expected} enrolled nodes, got {actual}")]
    EnrollmentMismatch { expected: usize, actual: usize },
}

/// 256-bit message digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageDigest(pub [u8; 32]);

impl MessageDigest {
    pub fn of(message: &[u8]) -> Self {
        MessageDigest(Sha256::digest(message).into())
    }
}

impl fmt::Debug for MessageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MessageDigest({})", hex::encode(self.0))
    }
}

/// Public parameters: the G2 generator used for verify keys and the
/// hash-to-G1 domain separation tag.
#[derive(Clone)]
pub struct SystemParams {
    g2: G2Affine,
    g2_neg: G2Prepared,
}

impl fmt::Debug for SystemParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemParams").field("curve", &"BLS12-381").finish()
    }
}

impl SystemParams {
    /// Builds parameters after checking bilinearity and non-degeneracy with
    /// scalars drawn from `seed`.
    pub fn setup(seed: u64) -> Result<Self, CryptoError> {
        let g2 = G2Affine::generator();
        let params = SystemParams { g2, g2_neg: G2Prepared::from(-g2) };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a, b) = (nonzero_scalar(&mut rng), nonzero_scalar(&mut rng));
        let g1 = G1Affine::generator();
        let lhs = pairing(&G1Affine::from(g1 * a), &G2Affine::from(g2 * b));
        let rhs = pairing(&g1, &g2) * (a * b);
        if lhs != rhs || pairing(&g1, &g2) == Gt::identity() {
            return Err(CryptoError::SelfTest);
        }
        Ok(params)
    }

    pub fn hash_to_g1(&self, digest: &MessageDigest) -> G1Affine {
        let p = <G1Projective as HashToCurve<ExpandMsgXmd<Sha256>>>::hash_to_curve(digest.0, DST);
        G1Affine::from(p)
    }
}

fn nonzero_scalar(rng: &mut impl RngCore) -> Scalar {
    loop {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        let s = Scalar::from_bytes_wide(&wide);
        if s != Scalar::zero() {
            return s;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SigningKey(Scalar);

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl SigningKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyKey(G2Affine);

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({}..)", &hex::encode(self.to_bytes())[..16])
    }
}

impl VerifyKey {
    pub fn to_bytes(&self) -> [u8; VERIFY_KEY_BYTES] {
        self.0.to_compressed()
    }

    pub fn from_bytes(bytes: &[u8; VERIFY_KEY_BYTES]) -> Option<Self> {
        Option::from(G2Affine::from_compressed(bytes)).map(VerifyKey)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyPair {
    pub node: NodeId,
    pub signing_key: SigningKey,
    pub verify_key: VerifyKey,
}

impl KeyPair {
    /// Deterministic in `(seed, node)`; each node draws from its own stream.
    pub fn generate(params: &SystemParams, node: NodeId, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(node.0));
        let a = nonzero_scalar(&mut rng);
        KeyPair { node, signing_key: SigningKey(a), verify_key: VerifyKey(G2Affine::from(params.g2 * a)) }
    }

    /// Recomputes `g2^a` and compares it with the stored verify key.
    pub fn is_consistent(&self, params: &SystemParams) -> bool {
        G2Affine::from(params.g2 * self.signing_key.0) == self.verify_key.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneTimeSignature {
    pub node: NodeId,
    pub sigma: G1Affine,
    pub message_digest: MessageDigest,
}

impl OneTimeSignature {
    pub fn sigma_bytes(&self) -> [u8; SIGNATURE_BYTES] {
        self.sigma.to_compressed()
    }

    /// Decodes a compressed σ; `None` when the bytes are not a valid point.
    pub fn from_parts(node: NodeId, sigma: &[u8; SIGNATURE_BYTES], digest: MessageDigest) -> Option<Self> {
        Option::from(G1Affine::from_compressed(sigma)).map(|sigma| OneTimeSignature {
            node,
            sigma,
            message_digest: digest,
        })
    }
}

pub fn keygen(params: &SystemParams, node: NodeId, seed: u64) -> KeyPair {
    KeyPair::generate(params, node, seed)
}

/// `σ = H(SHA-256(message))^a`.
pub fn sign(params: &SystemParams, kp: &KeyPair, message: &[u8]) -> Result<OneTimeSignature, CryptoError> {
    if message.is_empty() {
        return Err(CryptoError::EmptyMessage);
    }
    let digest = MessageDigest::of(message);
    let h = params.hash_to_g1(&digest);
    Ok(OneTimeSignature { node: kp.node, sigma: G1Affine::from(h * kp.signing_key.0), message_digest: digest })
}

/// `e(σ, g2) == e(H(digest), v)`, evaluated as a single product of two
/// Miller loops. Identity σ or v never verifies.
pub fn verify_single(params: &SystemParams, sig: &OneTimeSignature, v: &VerifyKey) -> bool {
    if bool::from(sig.sigma.is_identity()) || bool::from(v.0.is_identity()) {
        return false;
    }
    if !bool::from(sig.sigma.is_torsion_free()) {
        return false;
    }
    let h = params.hash_to_g1(&sig.message_digest);
    let v_prepared = G2Prepared::from(v.0);
    multi_miller_loop(&[(&sig.sigma, &params.g2_neg), (&h, &v_prepared)]).final_exponentiation() == Gt::identity()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    t: usize,
    n: usize,
}

impl ThresholdPolicy {
    pub fn new(t: usize, n: usize) -> Result<Self, CryptoError> {
        if t == 0 || t > n {
            return Err(CryptoError::Policy { t, n });
        }
        Ok(ThresholdPolicy { t, n })
    }

    /// `t = ⌈2n/3⌉`.
    pub fn two_thirds(n: usize) -> Result<Self, CryptoError> {
        Self::new((2 * n).div_ceil(3), n)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdOutcome {
    pub accepted: bool,
    /// Number of distinct nodes whose signature verified.
    pub k: usize,
    /// Per-node verification results `r_i`, one entry per distinct signer.
    pub results: BTreeMap<NodeId, bool>,
}

/// Counts valid signatures from enrolled nodes, first signature per node
/// only, and accepts iff `k ≥ t`.
pub fn verify_threshold(
    params: &SystemParams,
    sigs: &[OneTimeSignature],
    keys: &BTreeMap<NodeId, VerifyKey>,
    policy: ThresholdPolicy,
) -> Result<ThresholdOutcome, CryptoError> {
    verify_threshold_with(sigs, keys, policy, |sig, v| verify_single(params, sig, v))
}

/// [`verify_threshold`] with the per-signature check supplied by the caller.
pub fn verify_threshold_with(
    sigs: &[OneTimeSignature],
    keys: &BTreeMap<NodeId, VerifyKey>,
    policy: ThresholdPolicy,
    mut check: impl FnMut(&OneTimeSignature, &VerifyKey) -> bool,
) -> Result<ThresholdOutcome, CryptoError> {
    if keys.len() != policy.n {
        return Err(CryptoError::EnrollmentMismatch { expected: policy.n, actual: keys.len() });
    }
    let mut results = BTreeMap::new();
    for sig in sigs {
        if results.contains_key(&sig.node) {
            continue;
        }
        let ok = keys.get(&sig.node).is_some_and(|v| check(sig, v));
        results.insert(sig.node, ok);
    }
    let k = results.values().filter(|&&ok| ok).count();
    Ok(ThresholdOutcome { accepted: k >= policy.t, k, results })
}

/// Signatures collected for one confirmation round, with the policy they
/// must satisfy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdSignatureBundle {
    pub policy: ThresholdPolicy,
    pub signatures: Vec<OneTimeSignature>,
}

impl ThresholdSignatureBundle {
    pub fn verify(
        &self,
        params: &SystemParams,
        keys: &BTreeMap<NodeId, VerifyKey>,
    ) -> Result<ThresholdOutcome, CryptoError> {
        verify_threshold(params, &self.signatures, keys, self.policy)
    }

    pub fn encoded_len(&self) -> usize {
        self.signatures.len() * (SIGNATURE_BYTES + 32 + 4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::OnceLock;

    fn params() -> &'static SystemParams {
        static P: OnceLock<SystemParams> = OnceLock::new();
        P.get_or_init(|| SystemParams::setup(7).unwrap())
    }

    #[test]
    fn keygen_is_deterministic_and_consistent() {
        let p = params();
        let a = keygen(p, NodeId(3), 11);
        assert_eq!(a, keygen(p, NodeId(3), 11));
        assert!(a.is_consistent(p));
        assert_ne!(a.verify_key, keygen(p, NodeId(4), 11).verify_key);
    }

    #[test]
    fn thousand_keys_are_distinct() {
        let p = params();
        let keys: BTreeSet<[u8; 32]> = (0..1000).map(|i| keygen(p, NodeId(i), 42).signing_key.to_bytes()).collect();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn sign_verify_roundtrip() {
        let p = params();
        let a = keygen(p, NodeId(0), 1);
        let b = keygen(p, NodeId(1), 1);
        for len in [6usize, 64] {
            let msg = vec![0x5a; len];
            let sig = sign(p, &a, &msg).unwrap();
            assert_eq!(sig, sign(p, &a, &msg).unwrap());
            assert!(verify_single(p, &sig, &a.verify_key));
            assert!(!verify_single(p, &sig, &b.verify_key));
        }
        assert_eq!(sign(p, &a, &[]), Err(CryptoError::EmptyMessage));
    }

    #[test]
    fn cross_message_rejected() {
        let p = params();
        let a = keygen(p, NodeId(0), 1);
        let mut sig = sign(p, &a, b"here").unwrap();
        sig.message_digest = MessageDigest::of(b"there");
        assert!(!verify_single(p, &sig, &a.verify_key));
    }

    #[test]
    fn malformed_and_identity_rejected() {
        let p = params();
        let a = keygen(p, NodeId(0), 1);
        let sig = sign(p, &a, b"m").unwrap();
        assert!(OneTimeSignature::from_parts(NodeId(0), &[0xff; 48], sig.message_digest).is_none());
        let decoded = OneTimeSignature::from_parts(NodeId(0), &sig.sigma_bytes(), sig.message_digest).unwrap();
        assert!(verify_single(p, &decoded, &a.verify_key));
        let ident = OneTimeSignature { sigma: G1Affine::identity(), ..sig };
        assert!(!verify_single(p, &ident, &a.verify_key));
        assert!(!verify_single(p, &sig, &VerifyKey(G2Affine::identity())));
    }

    #[test]
    fn policy_bounds() {
        assert!(ThresholdPolicy::new(0, 3).is_err());
        assert!(ThresholdPolicy::new(4, 3).is_err());
        assert_eq!(ThresholdPolicy::two_thirds(3).unwrap().t(), 2);
        assert_eq!(ThresholdPolicy::two_thirds(20).unwrap().t(), 14);
        assert_eq!(ThresholdPolicy::two_thirds(1).unwrap().t(), 1);
    }

    fn enrolled(n: u32) -> (Vec<KeyPair>, BTreeMap<NodeId, VerifyKey>) {
        let p = params();
        let kps: Vec<_> = (0..n).map(|i| keygen(p, NodeId(i), 9)).collect();
        let keys = kps.iter().map(|k| (k.node, k.verify_key)).collect();
        (kps, keys)
    }

    #[test]
    fn threshold_examples() {
        let p = params();
        let (kps, keys) = enrolled(3);
        let good: Vec<_> = kps.iter().map(|k| sign(p, k, b"loc").unwrap()).collect();
        let two_of_three = ThresholdPolicy::new(2, 3).unwrap();
        assert!(verify_threshold(p, &good, &keys, two_of_three).unwrap().accepted);

        let mut mixed = good.clone();
        for s in &mut mixed[1..] {
            s.sigma = G1Affine::from(G1Projective::from(s.sigma) + G1Projective::generator());
        }
        let out = verify_threshold(p, &mixed, &keys, two_of_three).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.k, 1);
        assert_eq!(out.results[&NodeId(0)], true);
        assert_eq!(out.results[&NodeId(2)], false);

        let one_of_three = ThresholdPolicy::new(1, 3).unwrap();
        assert!(verify_threshold(p, &mixed, &keys, one_of_three).unwrap().accepted);
    }

    #[test]
    fn duplicate_signer_counts_once_first_wins() {
        let p = params();
        let (kps, keys) = enrolled(3);
        let s0 = sign(p, &kps[0], b"x").unwrap();
        let dup = vec![s0, s0, s0];
        let policy = ThresholdPolicy::new(2, 3).unwrap();
        assert_eq!(verify_threshold(p, &dup, &keys, policy).unwrap().k, 1);

        let bad = OneTimeSignature { sigma: G1Affine::generator(), ..s0 };
        let out = verify_threshold(p, &[bad, s0], &keys, ThresholdPolicy::new(1, 3).unwrap()).unwrap();
        assert!(!out.accepted);
    }

    #[test]
    fn enrollment_mismatch() {
        let p = params();
        let (_, keys) = enrolled(2);
        let policy = ThresholdPolicy::new(1, 3).unwrap();
        assert_eq!(
            verify_threshold(p, &[], &keys, policy),
            Err(CryptoError::EnrollmentMismatch { expected: 3, actual: 2 })
        );
    }

    #[test]
    fn unenrolled_signer_does_not_count() {
        let p = params();
        let (_, keys) = enrolled(2);
        let outsider = keygen(p, NodeId(50), 9);
        let s = sign(p, &outsider, b"x").unwrap();
        let out = verify_threshold(p, &[s], &keys, ThresholdPolicy::new(1, 2).unwrap()).unwrap();
        assert_eq!(out.k, 0);
    }
}
