//! Synthetic geolocation trials with known ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    challenge_round, Calibration, ChipResponder, GeolocError, HistorySample, Landmark, LandmarkId, Measurement,
    RoundConfig,
};
use crate::chipmodel::{Chip, ChipConfig};
use crate::netsim::{GeoPoint, Jitter, LatencyModel, LinkTamper, Network, NodeId, Simulator};

/// Node id of the device under test in generated networks.
pub const DEVICE_NODE: NodeId = NodeId(1000);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub landmarks: usize,
    pub min_distance_km: f64,
    pub max_distance_km: f64,
    pub jitter: Jitter,
    pub fixed_overhead_ms: f64,
    /// Past samples per landmark for the likelihood estimator.
    pub history: usize,
    /// Puts the truth exactly on a grid point of this resolution.
    pub snap_truth_to: Option<f64>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            landmarks: 4,
            min_distance_km: 300.0,
            max_distance_km: 3000.0,
            jitter: Jitter { median_ms: 0.2, sigma: 0.5 },
            fixed_overhead_ms: 0.1,
            history: 0,
            snap_truth_to: None,
        }
    }
}

/// A generated world: landmarks spread around a hidden true position.
#[derive(Debug, Clone)]
pub struct Trial {
    pub truth: GeoPoint,
    pub landmarks: Vec<Landmark>,
    pub net: Network,
    pub chip: Chip,
}

/// Places `cfg.landmarks` landmarks at evenly spread bearings (with random
/// offsets) and random distances around a random truth.
pub fn generate<R: Rng + ?Sized>(rng: &mut R, cfg: &TrialConfig) -> Trial {
    let mut lat = rng.random_range(-55.0..65.0);
    let mut lon = rng.random_range(-180.0..180.0);
    if let Some(res) = cfg.snap_truth_to {
        lat = (lat / res).round() * res;
        lon = (lon / res).round() * res;
    }
    let truth = GeoPoint::clamped(lat, lon);
    let model = LatencyModel { jitter: cfg.jitter, fixed_overhead_ms: cfg.fixed_overhead_ms, ..Default::default() };
    let mut net = Network::new(model).expect("generated model is valid");
    net.add_node(DEVICE_NODE, truth);
    let n = cfg.landmarks.max(1);
    let sector = 360.0 / n as f64;
    let base = rng.random_range(0.0..360.0);
    let mut landmarks = Vec::with_capacity(n);
    for i in 0..n {
        let bearing = base + sector * i as f64 + rng.random_range(-0.25..0.25) * sector;
        let dist = rng.random_range(cfg.min_distance_km..=cfg.max_distance_km);
        let pos = truth.destination(bearing, dist);
        let history = (0..cfg.history)
            .map(|_| {
                let d = rng.random_range(100.0..4000.0);
                let one_way = model.sample_one_way_delay(d, &mut *rng);
                let back = model.sample_one_way_delay(d, &mut *rng);
                HistorySample { rtt_ms: one_way + back, distance_km: d }
            })
            .collect();
        let calibration = Calibration { fixed_overhead_ms: cfg.fixed_overhead_ms, history, ..Default::default() };
        let node = NodeId(i as u32);
        net.add_node(node, pos);
        landmarks.push(Landmark::new(LandmarkId(i as u32), node, pos, calibration));
    }
    let chip = Chip::provision(&mut *rng, vec![], ChipConfig { require_license: false, ..Default::default() });
    Trial { truth, landmarks, net, chip }
}

impl Trial {
    /// Runs one challenge round from every landmark.
    pub fn run(&self, seed: u64) -> Result<(Vec<Measurement>, Simulator), GeolocError> {
        let mut sim = Simulator::new(seed);
        let mut responder = ChipResponder { chip: &self.chip, node: DEVICE_NODE };
        let cfg = RoundConfig { timeout_ms: 10_000.0 };
        let ms = challenge_round(&self.landmarks, &mut responder, &self.chip.public_key(), &self.net, &mut sim, &cfg)?;
        Ok((ms, sim))
    }

    /// Lets the device shorten both directions of its link to `landmark`.
    pub fn grant_speedup(&mut self, landmark: usize, factor: f64) -> Result<(), GeolocError> {
        let node = self.landmarks[landmark].node;
        let t = LinkTamper::speedup(factor);
        self.net.set_tamper(node, DEVICE_NODE, t, true)?;
        self.net.set_tamper(DEVICE_NODE, node, t, true)?;
        Ok(())
    }

    /// Adds `extra_ms` to both directions of the device's link to `landmark`.
    pub fn add_slowdown(&mut self, landmark: usize, extra_ms: f64) -> Result<(), GeolocError> {
        let node = self.landmarks[landmark].node;
        let t = LinkTamper::slowdown(extra_ms);
        self.net.set_tamper(node, DEVICE_NODE, t, false)?;
        self.net.set_tamper(DEVICE_NODE, node, t, false)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::geodesic_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn landmarks_sit_at_requested_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrialConfig { landmarks: 7, ..Default::default() };
        let t = generate(&mut rng, &cfg);
        assert_eq!(t.landmarks.len(), 7);
        for lm in &t.landmarks {
            let d = geodesic_distance(lm.position, t.truth);
            assert!((299.0..=3001.0).contains(&d), "{d}");
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(&mut ChaCha8Rng::seed_from_u64(9), &TrialConfig::default());
        let b = generate(&mut ChaCha8Rng::seed_from_u64(9), &TrialConfig::default());
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.run(3).unwrap().0, b.run(3).unwrap().0);
    }
}
