use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Layer, Tick};

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("jitter {jitter} exceeds base {base}")]
    Jitter { base: Tick, jitter: Tick },
    #[error("distance factor {0} must be finite and non-negative")]
    DistanceFactor(f64),
}

/// One-way message delay: `base ± jitter` ticks (uniform, integer) plus
/// `distance_factor` ticks per kilometer, never below one tick. Leaf-scoped
/// traffic uses the intra-layer parameters; upper-layer traffic crosses
/// sub-networks and uses the inter-layer ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub intra_base: Tick,
    pub intra_jitter: Tick,
    pub inter_base: Tick,
    pub inter_jitter: Tick,
    pub distance_factor: f64,
    /// Inbound messages a node handles per tick, serially. Zero disables
    /// queueing.
    pub processing_rate: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            intra_base: 5,
            intra_jitter: 2,
            inter_base: 20,
            inter_jitter: 5,
            distance_factor: 0.01,
            processing_rate: 2,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), LatencyError> {
        for (base, jitter) in [(self.intra_base, self.intra_jitter), (self.inter_base, self.inter_jitter)] {
            if jitter > base {
                return Err(LatencyError::Jitter { base, jitter });
            }
        }
        if !(self.distance_factor.is_finite() && self.distance_factor >= 0.0) {
            return Err(LatencyError::DistanceFactor(self.distance_factor));
        }
        Ok(())
    }

    pub fn sample(&self, layer: Layer, km: f64, rng: &mut impl Rng) -> Tick {
        let (base, jitter) = match layer {
            Layer::Leaf => (self.intra_base, self.intra_jitter),
            Layer::Middle | Layer::Top => (self.inter_base, self.inter_jitter),
        };
        let offset = rng.gen_range(0..=2 * jitter);
        let ticks = (base + offset).saturating_sub(jitter);
        let extra = (self.distance_factor * km).round() as Tick;
        (ticks + extra).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_bounds() {
        let m = LatencyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let intra = m.sample(Layer::Leaf, 0.0, &mut rng);
            assert!((3..=7).contains(&intra));
            let inter = m.sample(Layer::Top, 1000.0, &mut rng);
            assert!((25..=35).contains(&inter));
        }
    }

    #[test]
    fn validation() {
        assert!(LatencyModel::default().validate().is_ok());
        let bad = LatencyModel { intra_jitter: 9, ..LatencyModel::default() };
        assert_eq!(bad.validate(), Err(LatencyError::Jitter { base: 5, jitter: 9 }));
    }
}
