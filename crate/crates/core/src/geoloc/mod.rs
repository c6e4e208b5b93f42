//! Challenge-response location verification.
//!
//! Landmark servers at known positions send a fresh nonce to the device and
//! time the signed reply. Each verified round-trip time becomes an upper
//! bound on the device's distance from that landmark, and the estimators in
//! [`estimators`] turn a set of bounds into a region on a lat/lon grid.

pub mod descent;
pub mod estimators;
pub mod grid;
pub mod synth;
pub mod triangle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chipmodel::{Chip, DeviceId};
use crate::crypto::{tag, Encoder, Keypair, PublicKey, Signature};
use crate::netsim::{GeoPoint, NetError, Network, NodeId, SimTime, Simulator, SPEED_OF_LIGHT_KM_S};

pub use descent::{estimate_descent, DescentOptions, DescentResult};
pub use estimators::{covering_grid, covering_grid_bft, estimate_bft, estimate_cbg, estimate_likelihood, EstimateRecord, GeoEstimate, LikelihoodOptions};
pub use grid::{GridSpec, Region};
pub use triangle::{verify_triangle, TriangleOptions, TriangleVerdict};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeolocError {
    #[error("round-trip time {rtt_ms} ms is below twice the fixed overhead {overhead_ms} ms")]
    FloorViolation { rtt_ms: f64, overhead_ms: f64 },
    #[error("measurement from landmark {0} is not verified")]
    Unverified(LandmarkId),
    #[error("no usable measurements")]
    NoMeasurements,
    #[error("need at least {needed} verified measurements, have {have}")]
    TooFewMeasurements { needed: usize, have: usize },
    #[error("{n} landmarks cannot tolerate {f} faults (need n >= 3f + 1)")]
    InsufficientLandmarks { n: usize, f: usize },
    #[error("unknown landmark {0}")]
    UnknownLandmark(LandmarkId),
    #[error("descent diverged after {iterations} iterations (objective {objective})")]
    Diverged { iterations: usize, objective: f64 },
    #[error("compromising a landmark requires the compromise_landmarks capability")]
    CompromiseNotGranted,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkId(pub u32);

impl std::fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// A past (round-trip time, true distance) observation for one landmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySample {
    pub rtt_ms: f64,
    pub distance_km: f64,
}

/// Per-landmark delay-to-distance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Calibration {
    pub fixed_overhead_ms: f64,
    pub propagation_factor: f64,
    pub history: Vec<HistorySample>,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { fixed_overhead_ms: 0.0, propagation_factor: 0.67, history: Vec::new() }
    }
}

impl Calibration {
    pub fn speed_km_per_ms(&self) -> f64 {
        SPEED_OF_LIGHT_KM_S * self.propagation_factor / 1000.0
    }
}

/// How a landmark reports the times it measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmarkBehavior {
    Honest,
    /// Reports `rtt * factor + offset_ms` (clock or calibration tampering).
    Skewed { factor: f64, offset_ms: f64 },
    /// Reports a uniformly random time in `[0, max_ms]`.
    Arbitrary { max_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: LandmarkId,
    pub node: NodeId,
    pub position: GeoPoint,
    pub calibration: Calibration,
    behavior: LandmarkBehavior,
    /// DDoS'd landmarks never complete a round.
    pub unavailable: bool,
}

impl Landmark {
    pub fn new(id: LandmarkId, node: NodeId, position: GeoPoint, calibration: Calibration) -> Self {
        Landmark { id, node, position, calibration, behavior: LandmarkBehavior::Honest, unavailable: false }
    }

    pub fn honest(&self) -> bool {
        self.behavior == LandmarkBehavior::Honest
    }

    pub fn behavior(&self) -> LandmarkBehavior {
        self.behavior
    }

    /// Replaces the landmark's behaviour. Anything other than honest needs
    /// the compromise capability.
    pub fn compromise(&mut self, behavior: LandmarkBehavior, granted: bool) -> Result<(), GeolocError> {
        if behavior != LandmarkBehavior::Honest && !granted {
            return Err(GeolocError::CompromiseNotGranted);
        }
        self.behavior = behavior;
        Ok(())
    }
}

/// One landmark's view of a challenge round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub landmark_id: LandmarkId,
    /// `None` when the round timed out.
    pub rtt_ms: Option<f64>,
    #[serde(with = "crate::crypto::hex32")]
    pub nonce: [u8; 32],
    pub response_signature: Option<Signature>,
    pub verified: bool,
}

impl Measurement {
    /// Present and signature-checked.
    pub fn usable(&self) -> bool {
        self.verified && self.rtt_ms.is_some()
    }
}

/// The bytes a device signs to answer a challenge.
pub fn response_message(nonce: &[u8; 32], device_id: DeviceId) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u8(tag::GEO_RESPONSE).raw(nonce).u128(device_id.0);
    e.finish()
}

/// Anything that can answer a geolocation challenge from some network node.
pub trait ChallengeResponder {
    fn node(&self) -> NodeId;
    fn claimed_device(&self) -> DeviceId;
    fn respond(&mut self, nonce: &[u8; 32]) -> Option<Signature>;
}

/// A genuine chip answering from its own location.
pub struct ChipResponder<'a> {
    pub chip: &'a Chip,
    pub node: NodeId,
}

impl ChallengeResponder for ChipResponder<'_> {
    fn node(&self) -> NodeId {
        self.node
    }

    fn claimed_device(&self) -> DeviceId {
        self.chip.device_id()
    }

    fn respond(&mut self, nonce: &[u8; 32]) -> Option<Signature> {
        self.chip.sign(&response_message(nonce, self.chip.device_id())).ok()
    }
}

/// A device answering with some keypair while claiming `device_id`. With an
/// extracted key this is the relay attack; with a fresh key it is a forgery.
pub struct KeyResponder {
    pub keypair: Keypair,
    pub device_id: DeviceId,
    pub node: NodeId,
}

impl ChallengeResponder for KeyResponder {
    fn node(&self) -> NodeId {
        self.node
    }

    fn claimed_device(&self) -> DeviceId {
        self.device_id
    }

    fn respond(&mut self, nonce: &[u8; 32]) -> Option<Signature> {
        Some(self.keypair.sign(&response_message(nonce, self.device_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub timeout_ms: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig { timeout_ms: 1000.0 }
    }
}

/// Runs one challenge per landmark, in order, and returns the measurements.
///
/// `registered_key` is the key the verifier holds for the claimed device.
pub fn challenge_round(
    landmarks: &[Landmark],
    responder: &mut dyn ChallengeResponder,
    registered_key: &PublicKey,
    net: &Network,
    sim: &mut Simulator,
    config: &RoundConfig,
) -> Result<Vec<Measurement>, GeolocError> {
    use rand::Rng;

    let device_id = responder.claimed_device();
    let mut out = Vec::with_capacity(landmarks.len());
    for lm in landmarks {
        let mut nonce = [0u8; 32];
        sim.rng().fill(&mut nonce);
        if lm.unavailable {
            out.push(Measurement {
                landmark_id: lm.id,
                rtt_ms: None,
                nonce,
                response_signature: None,
                verified: false,
            });
            continue;
        }
        let sent_at = sim.now();
        sim.send(net, lm.node, responder.node(), nonce.to_vec())?;
        let challenge = drain_until_arrival(sim, responder.node());
        let signature = challenge.and_then(|_| responder.respond(&nonce));
        let mut rtt = None;
        if let Some(sig) = signature {
            sim.send(net, responder.node(), lm.node, sig.0.to_vec())?;
            if drain_until_arrival(sim, lm.node).is_some() {
                let measured = sim.now().ms() - sent_at.ms();
                let reported = match lm.behavior {
                    LandmarkBehavior::Honest => measured,
                    LandmarkBehavior::Skewed { factor, offset_ms } => (measured * factor + offset_ms).max(0.0),
                    LandmarkBehavior::Arbitrary { max_ms } => sim.rng().random_range(0.0..=max_ms.max(0.0)),
                };
                if reported <= config.timeout_ms {
                    rtt = Some(reported);
                }
            }
        }
        let verified = match (&signature, rtt) {
            (Some(sig), Some(_)) => registered_key.verify(&response_message(&nonce, device_id), sig).is_ok(),
            _ => false,
        };
        out.push(Measurement { landmark_id: lm.id, rtt_ms: rtt, nonce, response_signature: signature, verified });
    }
    Ok(out)
}

fn drain_until_arrival(sim: &mut Simulator, at: NodeId) -> Option<SimTime> {
    while let Some(e) = sim.next_event(SimTime(f64::MAX)) {
        if e.destination == at {
            return Some(e.time);
        }
    }
    None
}

/// Upper bound on distance implied by a round-trip time, assuming no path
/// is shorter than the geodesic.
pub fn delay_to_distance(rtt_ms: f64, calibration: &Calibration) -> Result<f64, GeolocError> {
    let one_way = rtt_ms / 2.0 - calibration.fixed_overhead_ms;
    if one_way < 0.0 {
        return Err(GeolocError::FloorViolation {
            rtt_ms,
            overhead_ms: calibration.fixed_overhead_ms,
        });
    }
    Ok(one_way * calibration.speed_km_per_ms())
}

/// A distance constraint derived from one usable measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBound {
    pub landmark_id: LandmarkId,
    pub center: GeoPoint,
    pub bound_km: f64,
    /// The round trip was faster than physics allows; `bound_km` is zero.
    pub floor_violation: bool,
}

/// Converts usable measurements into bounds. Unverified or missing
/// measurements are dropped here and never reach an estimator.
pub fn bounds_from(measurements: &[Measurement], landmarks: &[Landmark]) -> Result<Vec<DistanceBound>, GeolocError> {
    let mut out = Vec::new();
    for m in measurements.iter().filter(|m| m.usable()) {
        let lm = landmarks
            .iter()
            .find(|l| l.id == m.landmark_id)
            .ok_or(GeolocError::UnknownLandmark(m.landmark_id))?;
        let rtt = m.rtt_ms.expect("usable measurement has rtt");
        let (bound_km, floor_violation) = match delay_to_distance(rtt, &lm.calibration) {
            Ok(b) => (b, false),
            Err(_) => (0.0, true),
        };
        out.push(DistanceBound { landmark_id: lm.id, center: lm.position, bound_km, floor_violation });
    }
    Ok(out)
}

/// Exported measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub landmark_id: LandmarkId,
    pub rtt_ms: Option<f64>,
    pub verified: bool,
    pub bound_km: Option<f64>,
}

pub fn measurement_records(measurements: &[Measurement], landmarks: &[Landmark]) -> Vec<MeasurementRecord> {
    measurements
        .iter()
        .map(|m| {
            let cal = landmarks.iter().find(|l| l.id == m.landmark_id).map(|l| &l.calibration);
            let bound_km = match (m.rtt_ms, cal) {
                (Some(rtt), Some(c)) if m.verified => delay_to_distance(rtt, c).ok(),
                _ => None,
            };
            MeasurementRecord { landmark_id: m.landmark_id, rtt_ms: m.rtt_ms, verified: m.verified, bound_km }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipmodel::ChipConfig;
    use crate::netsim::{geodesic_distance, LatencyModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(overhead: f64) -> (Network, Vec<Landmark>, Chip) {
        let model = LatencyModel { fixed_overhead_ms: overhead, ..Default::default() };
        let mut net = Network::new(model).unwrap();
        let cal = Calibration { fixed_overhead_ms: overhead, ..Default::default() };
        let positions = [(50.0, 5.0), (45.0, 15.0), (40.0, 0.0)];
        let mut lms = Vec::new();
        for (i, (la, lo)) in positions.iter().enumerate() {
            let p = GeoPoint::new(*la, *lo).unwrap();
            net.add_node(NodeId(i as u32), p);
            lms.push(Landmark::new(LandmarkId(i as u32), NodeId(i as u32), p, cal.clone()));
        }
        net.add_node(NodeId(100), GeoPoint::new(45.0, 6.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chip = Chip::provision(&mut rng, vec![], ChipConfig { require_license: false, ..Default::default() });
        (net, lms, chip)
    }

    #[test]
    fn colocated_zero_jitter_gives_twice_overhead() {
        let (mut net, lms, chip) = world(0.75);
        net.set_position(NodeId(100), lms[0].position).unwrap();
        let mut sim = Simulator::new(1);
        let mut resp = ChipResponder { chip: &chip, node: NodeId(100) };
        let ms = challenge_round(&lms[..1], &mut resp, &chip.public_key(), &net, &mut sim, &RoundConfig::default()).unwrap();
        assert!((ms[0].rtt_ms.unwrap() - 1.5).abs() < 1e-12);
        assert!(ms[0].verified);
    }

    #[test]
    fn honest_round_verifies_every_landmark() {
        let (net, lms, chip) = world(0.2);
        let mut sim = Simulator::new(2);
        let mut resp = ChipResponder { chip: &chip, node: NodeId(100) };
        let ms = challenge_round(&lms, &mut resp, &chip.public_key(), &net, &mut sim, &RoundConfig::default()).unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms.iter().all(|m| m.verified));
        for (m, lm) in ms.iter().zip(&lms) {
            let b = delay_to_distance(m.rtt_ms.unwrap(), &lm.calibration).unwrap();
            let truth = geodesic_distance(lm.position, net.position(NodeId(100)).unwrap());
            assert!((b - truth).abs() < 1e-6, "{b} vs {truth}");
        }
    }

    #[test]
    fn response_under_wrong_key_is_unverified() {
        let (net, lms, chip) = world(0.2);
        let mut sim = Simulator::new(3);
        let mut forger = KeyResponder {
            keypair: Keypair::from_seed([4; 32]),
            device_id: chip.device_id(),
            node: NodeId(100),
        };
        let ms = challenge_round(&lms, &mut forger, &chip.public_key(), &net, &mut sim, &RoundConfig::default()).unwrap();
        assert!(ms.iter().all(|m| !m.verified));
        assert!(bounds_from(&ms, &lms).unwrap().is_empty());
    }

    #[test]
    fn timeout_marks_missing() {
        let (net, mut lms, chip) = world(0.2);
        lms[1].unavailable = true;
        let mut sim = Simulator::new(4);
        let mut resp = ChipResponder { chip: &chip, node: NodeId(100) };
        let cfg = RoundConfig { timeout_ms: 1000.0 };
        let ms = challenge_round(&lms, &mut resp, &chip.public_key(), &net, &mut sim, &cfg).unwrap();
        assert!(ms[1].rtt_ms.is_none() && !ms[1].verified);
        let short = RoundConfig { timeout_ms: 0.1 };
        let ms = challenge_round(&lms[..1], &mut resp, &chip.public_key(), &net, &mut sim, &short).unwrap();
        assert!(ms[0].rtt_ms.is_none());
    }

    #[test]
    fn floor_rtt_inverts_to_exact_distance() {
        let cal = Calibration::default();
        let one_way = LatencyModel::default().deterministic_delay_ms(1000.0);
        let b = delay_to_distance(2.0 * one_way, &cal).unwrap();
        assert!((b - 1000.0).abs() < 1e-9, "{b}");
    }

    #[test]
    fn zero_rtt_with_overhead_is_impossible() {
        let cal = Calibration { fixed_overhead_ms: 0.5, ..Default::default() };
        assert!(matches!(delay_to_distance(0.0, &cal), Err(GeolocError::FloorViolation { .. })));
    }

    #[test]
    fn added_delay_only_grows_bound() {
        let cal = Calibration { fixed_overhead_ms: 0.3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..1000 {
            let rtt = rng.random_range(0.6..100.0);
            let extra = rng.random_range(0.0..50.0);
            assert!(delay_to_distance(rtt + extra, &cal).unwrap() >= delay_to_distance(rtt, &cal).unwrap());
        }
    }

    #[test]
    fn compromise_needs_capability() {
        let (_, mut lms, _) = world(0.0);
        assert_eq!(
            lms[0].compromise(LandmarkBehavior::Arbitrary { max_ms: 10.0 }, false),
            Err(GeolocError::CompromiseNotGranted)
        );
        lms[0].compromise(LandmarkBehavior::Arbitrary { max_ms: 10.0 }, true).unwrap();
        assert!(!lms[0].honest());
    }
}
