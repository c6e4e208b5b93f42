//! Deterministic discrete-event network simulation.
//!
//! Nodes sit at fixed [`GeoPoint`]s. A message sent from one node to another is
//! delivered after a one-way delay drawn from the link's [`LatencyModel`]:
//! a propagation term proportional to great-circle distance, a fixed
//! processing overhead and a lognormal jitter term. The simulator is single
//! threaded; two runs with the same seed produce byte-identical logs.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for all geometry, in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Speed of light in vacuum, km/s.
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("causality violation: event at {event_ms} ms scheduled before current time {now_ms} ms")]
    Causality { event_ms: f64, now_ms: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid coordinate: latitude {lat}, longitude {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid latency model: {0}")]
    InvalidLatency(&'static str),
    #[error("link tamper {0} requires the speedup capability")]
    SpeedupNotGranted(String),
}

/// A position on the spherical Earth, in degrees.
///
/// Latitude is in `[-90, 90]`, longitude is normalized into `(-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeoPoint", into = "RawGeoPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeoPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawGeoPoint> for GeoPoint {
    type Error = NetError;

    fn try_from(raw: RawGeoPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawGeoPoint {
    fn from(p: GeoPoint) -> Self {
        RawGeoPoint { lat: p.lat, lon: p.lon }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}°, {:.4}°)", self.lat, self.lon)
    }
}

/// Normalizes a longitude into `(-180, 180]`.
pub fn normalize_lon(lon: f64) -> f64 {
    let mut l = lon.rem_euclid(360.0);
    if l > 180.0 {
        l -= 360.0;
    }
    if l == -180.0 {
        l = 180.0;
    }
    l
}

impl GeoPoint {
    /// Builds a point, rejecting out-of-range latitudes and non-finite input.
    pub fn new(lat: f64, lon: f64) -> Result<Self, NetError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(NetError::InvalidCoordinate { lat, lon });
        }
        Ok(GeoPoint { lat, lon: normalize_lon(lon) })
    }

    /// Like [`GeoPoint::new`] but clamps latitude instead of failing.
    pub fn clamped(lat: f64, lon: f64) -> Self {
        GeoPoint { lat: lat.clamp(-90.0, 90.0), lon: normalize_lon(lon) }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Unit vector in Earth-centred coordinates.
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (phi, lam) = (self.lat.to_radians(), self.lon.to_radians());
        [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
    }

    pub fn from_unit_vector(v: [f64; 3]) -> Self {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let z = (v[2] / norm).clamp(-1.0, 1.0);
        GeoPoint::clamped(z.asin().to_degrees(), v[1].atan2(v[0]).to_degrees())
    }

    /// Point reached by travelling `distance_km` from `self` along the initial
    /// `bearing_deg` (clockwise from north).
    pub fn destination(&self, bearing_deg: f64, distance_km: f64) -> Self {
        let delta = distance_km / EARTH_RADIUS_KM;
        let theta = bearing_deg.to_radians();
        let (phi1, lam1) = (self.lat.to_radians(), self.lon.to_radians());
        let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos())
            .clamp(-1.0, 1.0)
            .asin();
        let lam2 = lam1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
        GeoPoint::clamped(phi2.to_degrees(), lam2.to_degrees())
    }
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`] (haversine).
pub fn geodesic_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    if a == b {
        return 0.0;
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlam = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Lognormal jitter, parameterized by its median (ms) and the standard
/// deviation `sigma` of the underlying normal. A zero median disables jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub median_ms: f64,
    pub sigma: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { median_ms: 0.0, sigma: 0.0 };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.median_ms <= 0.0 {
            return 0.0;
        }
        if self.sigma <= 0.0 {
            return self.median_ms;
        }
        // Parameters are validated by LatencyModel::validate.
        LogNormal::new(self.median_ms.ln(), self.sigma)
            .map(|d| d.sample(rng))
            .unwrap_or(self.median_ms)
    }
}

/// How long a message takes to cross a link of a given length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    /// Fraction of vacuum light speed achieved by the medium.
    pub propagation_factor: f64,
    /// Multiplicative path stretch of the routed path over the geodesic.
    pub routing_indirection: f64,
    pub jitter: Jitter,
    pub fixed_overhead_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            propagation_factor: 0.67,
            routing_indirection: 1.0,
            jitter: Jitter::NONE,
            fixed_overhead_ms: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.propagation_factor > 0.0 && self.propagation_factor <= 1.0) {
            return Err(NetError::InvalidLatency("propagation_factor must be in (0, 1]"));
        }
        if !(self.routing_indirection >= 1.0) || !self.routing_indirection.is_finite() {
            return Err(NetError::InvalidLatency("routing_indirection must be >= 1"));
        }
        if !(self.fixed_overhead_ms >= 0.0) || !self.fixed_overhead_ms.is_finite() {
            return Err(NetError::InvalidLatency("fixed_overhead_ms must be >= 0"));
        }
        if !(self.jitter.median_ms >= 0.0) || !(self.jitter.sigma >= 0.0) {
            return Err(NetError::InvalidLatency("jitter parameters must be >= 0"));
        }
        if !self.jitter.median_ms.is_finite() || !self.jitter.sigma.is_finite() {
            return Err(NetError::InvalidLatency("jitter parameters must be finite"));
        }
        Ok(())
    }

    /// Signal speed in the medium, km per millisecond.
    pub fn medium_speed_km_per_ms(&self) -> f64 {
        SPEED_OF_LIGHT_KM_S * self.propagation_factor / 1000.0
    }

    /// The lowest one-way transit time physics allows over `distance_km`.
    pub fn physical_floor_ms(&self, distance_km: f64) -> f64 {
        distance_km / self.medium_speed_km_per_ms()
    }

    /// One-way delay without jitter.
    pub fn deterministic_delay_ms(&self, distance_km: f64) -> f64 {
        distance_km * self.routing_indirection / self.medium_speed_km_per_ms()
            + self.fixed_overhead_ms
    }

    pub fn sample_one_way_delay<R: Rng + ?Sized>(&self, distance_km: f64, rng: &mut R) -> f64 {
        self.deterministic_delay_ms(distance_km) + self.jitter.sample(rng)
    }
}

/// Free-function form of [`LatencyModel::sample_one_way_delay`].
pub fn sample_one_way_delay<R: Rng + ?Sized>(
    model: &LatencyModel,
    distance_km: f64,
    rng: &mut R,
) -> f64 {
    model.sample_one_way_delay(distance_km, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Simulated time in milliseconds. Totally ordered (NaN is never produced).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SimTime(pub f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn ms(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// A timestamped message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: SimTime,
    pub source: NodeId,
    pub destination: NodeId,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub delivery_id: u64,
    /// Time the message left its source.
    pub sent_at: SimTime,
    /// Physical lower bound on the transit time of this message.
    pub floor_ms: f64,
    /// Set when an adversary hook shortened the transit below what the
    /// latency model would have produced.
    pub speedup_marked: bool,
}

impl Event {
    pub fn transit_ms(&self) -> f64 {
        self.time.0 - self.sent_at.0
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct QueueKey {
    time: SimTime,
    delivery_id: u64,
}

/// Adversarial manipulation of one directed link.
///
/// `factor` scales the sampled delay; `extra_ms` is added afterwards. A
/// factor below one is a speedup and can only be installed with
/// [`Network::set_tamper`]'s `speedup_granted` flag; such deliveries are
/// marked on the event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTamper {
    pub factor: f64,
    pub extra_ms: f64,
}

impl LinkTamper {
    pub fn slowdown(extra_ms: f64) -> Self {
        LinkTamper { factor: 1.0, extra_ms: extra_ms.max(0.0) }
    }

    pub fn speedup(factor: f64) -> Self {
        LinkTamper { factor, extra_ms: 0.0 }
    }

    fn is_speedup(&self) -> bool {
        self.factor < 1.0 || self.extra_ms < 0.0
    }
}

/// Static topology: node positions, per-link latency models, tamper hooks.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: BTreeMap<NodeId, GeoPoint>,
    default_model: LatencyModel,
    link_models: BTreeMap<(NodeId, NodeId), LatencyModel>,
    tampers: BTreeMap<(NodeId, NodeId), LinkTamper>,
}

impl Network {
    pub fn new(default_model: LatencyModel) -> Result<Self, NetError> {
        default_model.validate()?;
        Ok(Network {
            nodes: BTreeMap::new(),
            default_model,
            link_models: BTreeMap::new(),
            tampers: BTreeMap::new(),
        })
    }

    pub fn add_node(&mut self, id: NodeId, position: GeoPoint) {
        self.nodes.insert(id, position);
    }

    pub fn position(&self, id: NodeId) -> Result<GeoPoint, NetError> {
        self.nodes.get(&id).copied().ok_or(NetError::UnknownNode(id))
    }

    pub fn set_position(&mut self, id: NodeId, position: GeoPoint) -> Result<(), NetError> {
        let slot = self.nodes.get_mut(&id).ok_or(NetError::UnknownNode(id))?;
        *slot = position;
        Ok(())
    }

    /// Sets the model for both directions of a link.
    pub fn set_link_model(&mut self, a: NodeId, b: NodeId, model: LatencyModel) -> Result<(), NetError> {
        model.validate()?;
        self.link_models.insert((a, b), model);
        self.link_models.insert((b, a), model);
        Ok(())
    }

    pub fn link_model(&self, src: NodeId, dst: NodeId) -> &LatencyModel {
        self.link_models.get(&(src, dst)).unwrap_or(&self.default_model)
    }

    /// Installs a tamper hook on the directed link `src -> dst`.
    pub fn set_tamper(
        &mut self,
        src: NodeId,
        dst: NodeId,
        tamper: LinkTamper,
        speedup_granted: bool,
    ) -> Result<(), NetError> {
        if tamper.is_speedup() && !speedup_granted {
            return Err(NetError::SpeedupNotGranted(format!("{src}->{dst}")));
        }
        self.tampers.insert((src, dst), tamper);
        Ok(())
    }

    pub fn clear_tampers(&mut self) {
        self.tampers.clear();
    }

    pub fn distance_km(&self, a: NodeId, b: NodeId) -> Result<f64, NetError> {
        Ok(geodesic_distance(self.position(a)?, self.position(b)?))
    }
}

/// Single-threaded discrete-event loop.
#[derive(Debug)]
pub struct Simulator {
    now: SimTime,
    next_delivery_id: u64,
    queue: BinaryHeap<Reverse<(QueueKey, usize)>>,
    pending: Vec<Option<Event>>,
    log: Vec<Event>,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(seed: u64) -> Self {
        Simulator {
            now: SimTime::ZERO,
            next_delivery_id: 0,
            queue: BinaryHeap::new(),
            pending: Vec::new(),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Queues an event. Its `delivery_id` is overwritten with the next
    /// sequence number, which is returned.
    pub fn schedule(&mut self, mut event: Event) -> Result<u64, NetError> {
        if event.time < self.now || !event.time.0.is_finite() {
            return Err(NetError::Causality { event_ms: event.time.0, now_ms: self.now.0 });
        }
        let id = self.next_delivery_id;
        self.next_delivery_id += 1;
        event.delivery_id = id;
        let slot = self.pending.len();
        self.queue.push(Reverse((QueueKey { time: event.time, delivery_id: id }, slot)));
        self.pending.push(Some(event));
        Ok(id)
    }

    /// Sends `payload` from `src` to `dst` now, sampling the link delay.
    pub fn send(
        &mut self,
        net: &Network,
        src: NodeId,
        dst: NodeId,
        payload: Vec<u8>,
    ) -> Result<u64, NetError> {
        let distance = net.distance_km(src, dst)?;
        let model = *net.link_model(src, dst);
        let nominal = model.sample_one_way_delay(distance, &mut self.rng);
        let floor = model.physical_floor_ms(distance);
        let (delay, marked) = match net.tampers.get(&(src, dst)) {
            Some(t) => {
                let d = (nominal * t.factor + t.extra_ms).max(0.0);
                (d, d < nominal)
            }
            None => (nominal, false),
        };
        let event = Event {
            time: SimTime(self.now.0 + delay),
            source: src,
            destination: dst,
            payload,
            delivery_id: 0,
            sent_at: self.now,
            floor_ms: floor,
            speedup_marked: marked,
        };
        self.schedule(event)
    }

    /// Pops the next event due at or before `until`, advancing the clock.
    pub fn next_event(&mut self, until: SimTime) -> Option<Event> {
        let Reverse((key, _)) = self.queue.peek()?;
        if key.time > until {
            return None;
        }
        let Reverse((key, slot)) = self.queue.pop()?;
        self.now = key.time;
        let event = self.pending[slot].take()?;
        self.log.push(event.clone());
        Some(event)
    }

    /// Processes every event due at or before `until` and returns them in
    /// processing order. The clock ends at `until` (or stays, if later).
    pub fn run_until(&mut self, until: SimTime) -> Vec<Event> {
        let mut out = Vec::new();
        while let Some(e) = self.next_event(until) {
            out.push(e);
        }
        if until > self.now {
            self.now = until;
        }
        out
    }

    pub fn advance_to(&mut self, t: SimTime) -> Result<(), NetError> {
        if t < self.now {
            return Err(NetError::Causality { event_ms: t.0, now_ms: self.now.0 });
        }
        self.now = t;
        Ok(())
    }

    pub fn pending_count(&self) -> usize {
        self.queue.len()
    }

    /// Every event processed so far.
    pub fn log(&self) -> &[Event] {
        &self.log
    }

    /// The processed log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn geopoint_validation_and_normalization() {
        assert!(GeoPoint::new(90.1, 0.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert_eq!(p(0.0, -180.0).lon(), 180.0);
        assert_eq!(p(0.0, 190.0).lon(), -170.0);
        assert_eq!(p(0.0, 540.0).lon(), 180.0);
    }

    #[test]
    fn identity_distance_is_zero() {
        assert_eq!(geodesic_distance(p(0.0, 0.0), p(0.0, 0.0)), 0.0);
    }

    #[test]
    fn quarter_great_circle() {
        let d = geodesic_distance(p(0.0, 0.0), p(0.0, 90.0));
        assert!((d - std::f64::consts::FRAC_PI_2 * EARTH_RADIUS_KM).abs() < 1e-9);
        assert!((d - 10007.54).abs() < 0.01);
    }

    #[test]
    fn paris_to_new_york_matches_frozen_oracle() {
        // Frozen from a 40-digit Vincenty-sphere evaluation: 5837.2409 km.
        let d = geodesic_distance(p(48.8566, 2.3522), p(40.7128, -74.0060));
        assert!((d - 5837.24).abs() < 0.01, "{d}");
    }

    #[test]
    fn zero_distance_zero_jitter_zero_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(LatencyModel::default().sample_one_way_delay(0.0, &mut rng), 0.0);
    }

    #[test]
    fn thousand_km_fiber_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = LatencyModel::default().sample_one_way_delay(1000.0, &mut rng);
        let expected = 1000.0 / (299_792.458 * 0.67) * 1000.0;
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 4.978).abs() < 0.001);
    }

    #[test]
    fn delays_never_below_floor() {
        let model = LatencyModel {
            routing_indirection: 1.3,
            jitter: Jitter { median_ms: 2.0, sigma: 1.0 },
            fixed_overhead_ms: 0.5,
            ..LatencyModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let floor = model.physical_floor_ms(2500.0);
        for _ in 0..10_000 {
            assert!(model.sample_one_way_delay(2500.0, &mut rng) >= floor);
        }
    }

    #[test]
    fn invalid_models_rejected() {
        let bad = [
            LatencyModel { propagation_factor: 0.0, ..Default::default() },
            LatencyModel { propagation_factor: 1.2, ..Default::default() },
            LatencyModel { routing_indirection: 0.9, ..Default::default() },
            LatencyModel { fixed_overhead_ms: -1.0, ..Default::default() },
        ];
        for m in bad {
            assert!(m.validate().is_err(), "{m:?}");
        }
    }

    fn blank(t: f64, src: u32, dst: u32) -> Event {
        Event {
            time: SimTime(t),
            source: NodeId(src),
            destination: NodeId(dst),
            payload: vec![],
            delivery_id: 0,
            sent_at: SimTime(t),
            floor_ms: 0.0,
            speedup_marked: false,
        }
    }

    #[test]
    fn empty_schedule_runs_to_empty_log() {
        let mut sim = Simulator::new(0);
        assert!(sim.run_until(SimTime(100.0)).is_empty());
        assert_eq!(sim.now(), SimTime(100.0));
    }

    #[test]
    fn equal_time_ties_break_by_delivery_id() {
        let mut sim = Simulator::new(0);
        sim.schedule(blank(5.0, 1, 2)).unwrap();
        sim.schedule(blank(5.0, 3, 4)).unwrap();
        sim.schedule(blank(1.0, 9, 9)).unwrap();
        let log = sim.run_until(SimTime(10.0));
        let ids: Vec<u64> = log.iter().map(|e| e.delivery_id).collect();
        assert_eq!(ids, vec![2, 0, 1]);
    }

    #[test]
    fn scheduling_into_the_past_is_rejected() {
        let mut sim = Simulator::new(0);
        sim.run_until(SimTime(50.0));
        assert!(matches!(sim.schedule(blank(10.0, 0, 1)), Err(NetError::Causality { .. })));
    }

    fn random_run(seed: u64) -> String {
        let mut net = Network::new(LatencyModel {
            jitter: Jitter { median_ms: 1.0, sigma: 0.8 },
            fixed_overhead_ms: 0.2,
            ..Default::default()
        })
        .unwrap();
        let mut topo = ChaCha8Rng::seed_from_u64(99);
        for i in 0..20 {
            net.add_node(NodeId(i), GeoPoint::clamped(topo.random_range(-60.0..60.0), topo.random_range(-180.0..180.0)));
        }
        let mut sim = Simulator::new(seed);
        for _ in 0..1000 {
            let a = NodeId(sim.rng().random_range(0..20));
            let b = NodeId(sim.rng().random_range(0..20));
            let len = sim.rng().random_range(0..8);
            let payload: Vec<u8> = (0..len).map(|_| sim.rng().random()).collect();
            sim.send(&net, a, b, payload).unwrap();
            let step = sim.rng().random_range(0.0..3.0);
            let t = SimTime(sim.now().0 + step);
            sim.run_until(t);
        }
        sim.run_until(SimTime(1e9));
        sim.log_jsonl()
    }

    #[test]
    fn replay_with_same_seed_is_byte_identical() {
        let a = random_run(42);
        let b = random_run(42);
        assert_eq!(a.lines().count(), 1000);
        assert_eq!(a, b);
        assert_ne!(a, random_run(43));
    }

    #[test]
    fn speedup_tamper_requires_grant_and_marks_event() {
        let mut net = Network::new(LatencyModel::default()).unwrap();
        net.add_node(NodeId(0), p(0.0, 0.0));
        net.add_node(NodeId(1), p(0.0, 10.0));
        assert!(net.set_tamper(NodeId(0), NodeId(1), LinkTamper::speedup(0.5), false).is_err());
        net.set_tamper(NodeId(0), NodeId(1), LinkTamper::speedup(0.5), true).unwrap();
        let mut sim = Simulator::new(1);
        sim.send(&net, NodeId(0), NodeId(1), vec![]).unwrap();
        sim.send(&net, NodeId(1), NodeId(0), vec![]).unwrap();
        let log = sim.run_until(SimTime(1e6));
        let fast = log.iter().find(|e| e.source == NodeId(0)).unwrap();
        let slow = log.iter().find(|e| e.source == NodeId(1)).unwrap();
        assert!(fast.speedup_marked && fast.transit_ms() < fast.floor_ms);
        assert!(!slow.speedup_marked && slow.transit_ms() >= slow.floor_ms);
    }

    proptest! {
        #[test]
        fn distance_is_a_bounded_symmetric_metric(
            la in -90.0f64..=90.0, loa in -180.0f64..180.0,
            lb in -90.0f64..=90.0, lob in -180.0f64..180.0,
        ) {
            let (a, b) = (p(la, loa), p(lb, lob));
            let ab = geodesic_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, geodesic_distance(b, a));
            prop_assert!(ab <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
        }

        #[test]
        fn clock_never_moves_backwards(times in proptest::collection::vec(0.0f64..1000.0, 1..50)) {
            let mut sim = Simulator::new(3);
            for t in &times {
                sim.schedule(blank(*t, 0, 1)).unwrap();
            }
            let log = sim.run_until(SimTime(2000.0));
            for w in log.windows(2) {
                prop_assert!((w[0].time, w[0].delivery_id) < (w[1].time, w[1].delivery_id));
            }
        }
    }
}
