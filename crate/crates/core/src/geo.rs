//! Geographic attestations and great-circle distances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, Tick};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Fixed-point scale used when longitude/latitude are serialized.
pub const COORD_SCALE: f64 = 1e7;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("nodes {0} and {1} attest the same location at the same time")]
    DuplicateAttestation(NodeId, NodeId),
}

/// A node's `{longitude, latitude, timestamp}` location attestation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRecord {
    pub longitude: f64,
    pub latitude: f64,
    pub timestamp: Tick,
}

impl GeoRecord {
    pub fn new(longitude: f64, latitude: f64, timestamp: Tick) -> Result<Self, GeoError> {
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(GeoError::Longitude(longitude));
        }
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(GeoError::Latitude(latitude));
        }
        Ok(GeoRecord { longitude, latitude, timestamp })
    }

    /// Same position, new timestamp.
    pub fn refreshed(self, timestamp: Tick) -> Self {
        GeoRecord { timestamp, ..self }
    }

    pub fn same_place(&self, other: &GeoRecord) -> bool {
        self.longitude == other.longitude && self.latitude == other.latitude
    }

    /// Point `distance_m` away on the given compass bearing (degrees).
    pub fn offset(&self, bearing_deg: f64, distance_m: f64) -> GeoRecord {
        let delta = distance_m / EARTH_RADIUS_M;
        let theta = bearing_deg.to_radians();
        let lat1 = self.latitude.to_radians();
        let lon1 = self.longitude.to_radians();
        let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos()).asin();
        let lon2 = lon1 + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * lat2.sin());
        let mut lon = lon2.to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoRecord { longitude: lon, latitude: lat2.to_degrees().clamp(-90.0, 90.0), timestamp: self.timestamp }
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: &GeoRecord, b: &GeoRecord) -> f64 {
    if a.same_place(b) {
        return 0.0;
    }
    let (lat1, lat2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.longitude - a.longitude).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Distances from an event location, clamped below at one meter so the
/// distance score never divides by zero.
pub fn event_distances<'a>(
    event: &GeoRecord,
    nodes: impl IntoIterator<Item = (NodeId, &'a GeoRecord)>,
) -> BTreeMap<NodeId, f64> {
    nodes.into_iter().map(|(id, geo)| (id, haversine_distance(event, geo).max(1.0))).collect()
}

/// Rejects two nodes holding the identical (longitude, latitude, timestamp).
pub fn check_distinct_attestations<'a>(
    records: impl IntoIterator<Item = (NodeId, &'a GeoRecord)>,
) -> Result<(), GeoError> {
    let mut seen: BTreeMap<(u64, u64, Tick), NodeId> = BTreeMap::new();
    for (id, r) in records {
        let key = (r.longitude.to_bits(), r.latitude.to_bits(), r.timestamp);
        if let Some(prev) = seen.insert(key, id) {
            return Err(GeoError::DuplicateAttestation(prev, id));
        }
    }
    Ok(())
}

/// Locally administered MAC address derived from a node id.
pub fn mac_for(node: NodeId) -> [u8; 6] {
    let b = node.0.to_be_bytes();
    [0x02, 0x4c, b[0], b[1], b[2], b[3]]
}

/// Identity message signed by a node: `MAC ‖ lon ‖ lat ‖ timestamp`, with
/// coordinates as little-endian i64 fixed-point (degrees × 1e7) and the
/// timestamp as little-endian u64. Always 30 bytes.
pub fn identity_message(mac: [u8; 6], geo: &GeoRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(30);
    out.extend_from_slice(&mac);
    out.extend_from_slice(&((geo.longitude * COORD_SCALE).round() as i64).to_le_bytes());
    out.extend_from_slice(&((geo.latitude * COORD_SCALE).round() as i64).to_le_bytes());
    out.extend_from_slice(&geo.timestamp.to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn at(lon: f64, lat: f64) -> GeoRecord {
        GeoRecord::new(lon, lat, 0).unwrap()
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(GeoRecord::new(180.5, 0.0, 0), Err(GeoError::Longitude(180.5)));
        assert_eq!(GeoRecord::new(0.0, -91.0, 0), Err(GeoError::Latitude(-91.0)));
        assert!(GeoRecord::new(-180.0, 90.0, 7).is_ok());
    }

    #[test]
    fn identical_points_are_zero_apart() {
        let p = at(12.5, 41.9);
        assert_eq!(haversine_distance(&p, &p), 0.0);
    }

    #[test]
    fn antipodal_on_equator_is_half_circumference() {
        let d = haversine_distance(&at(0.0, 0.0), &at(180.0, 0.0));
        assert!((d - PI * EARTH_RADIUS_M).abs() < 1e-6);
        assert!((d - 20_015_086.796).abs() < 1.0);
    }

    #[test]
    fn offset_roundtrips_through_haversine() {
        let origin = at(-75.75, 39.68);
        for bearing in [0.0, 45.0, 133.0, 270.0] {
            let p = origin.offset(bearing, 750.0);
            assert!((haversine_distance(&origin, &p) - 750.0).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicate_attestation_detected() {
        let a = at(1.0, 2.0);
        let b = at(1.0, 2.0);
        let recs = [(NodeId(1), &a), (NodeId(2), &b)];
        assert_eq!(check_distinct_attestations(recs), Err(GeoError::DuplicateAttestation(NodeId(1), NodeId(2))));
        let c = b.refreshed(5);
        assert!(check_distinct_attestations([(NodeId(1), &a), (NodeId(2), &c)]).is_ok());
    }

    #[test]
    fn event_distance_clamps_to_one_meter() {
        let event = at(3.0, 4.0);
        let here = at(3.0, 4.0);
        let d = event_distances(&event, [(NodeId(0), &here)]);
        assert_eq!(d[&NodeId(0)], 1.0);
    }

    #[test]
    fn identity_message_layout() {
        let geo = GeoRecord::new(-1.5, 2.25, 0x0102).unwrap();
        let msg = identity_message(mac_for(NodeId(0x0a0b)), &geo);
        assert_eq!(msg.len(), 30);
        assert_eq!(&msg[..6], &[0x02, 0x4c, 0, 0, 0x0a, 0x0b]);
        assert_eq!(i64::from_le_bytes(msg[6..14].try_into().unwrap()), -15_000_000);
        assert_eq!(i64::from_le_bytes(msg[14..22].try_into().unwrap()), 22_500_000);
        assert_eq!(u64::from_le_bytes(msg[22..30].try_into().unwrap()), 0x0102);
    }

    proptest::proptest! {
        #[test]
        fn haversine_symmetric(
            lon1 in -180.0f64..=180.0, lat1 in -90.0f64..=90.0,
            lon2 in -180.0f64..=180.0, lat2 in -90.0f64..=90.0,
        ) {
            let (a, b) = (at(lon1, lat1), at(lon2, lat2));
            let (ab, ba) = (haversine_distance(&a, &b), haversine_distance(&b, &a));
            proptest::prop_assert!((ab - ba).abs() < 1e-6);
            proptest::prop_assert!(ab >= 0.0 && ab <= PI * EARTH_RADIUS_M + 1e-6);
        }
    }
}
