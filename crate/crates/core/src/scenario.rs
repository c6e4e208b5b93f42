//! Declarative scenarios: config schema, runner and report files.
//!
//! A scenario is a JSON document with optional sections per mechanism and
//! a list of success predicates. Running it produces one JSONL report per
//! mechanism section, the attack matrix, `metrics.json` and `summary.txt`.
//! The record grammar is documented in `docs/grammar.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adversary::{
    matrix_jsonl, matrix_text, run_matrix_for, AdversaryProfile, Capability, MatrixRow, Mechanism, Tier, TierMapping,
};
use crate::attest::classify::{classify, frontier_trace, generate_trace, ClassifierConfig, WorkloadLabel};
use crate::attest::{account_trace, emit_snapshot, verify_chain, Registry, VerifyConfig};
use crate::chipmodel::{
    Chip, ChipConfig, MeterResource, PersistencePolicy, TamperEvent, TamperKind, Throttle,
};
use crate::cluster::{Cluster, ClusterConfig, CouplingDetector, PodMember, Regime, Regulator};
use crate::geoloc::estimators::{bft_from_bounds, cbg_from_bounds};
use crate::geoloc::synth::{generate, Trial, TrialConfig, DEVICE_NODE};
use crate::geoloc::{
    bounds_from, covering_grid, covering_grid_bft, estimate_descent, estimate_likelihood, Calibration, DescentOptions,
    GeoEstimate, Landmark, LandmarkBehavior, LandmarkId, LikelihoodOptions,
};
use crate::licensing::{install, Issuer, License};
use crate::netsim::{geodesic_distance, GeoPoint, LatencyModel, Network, NodeId};

/// Scenarios shipped with the crate, as `(name, json)`.
pub const BUNDLED: &[(&str, &str)] = &[
    ("licensing_basic", include_str!("../scenarios/licensing_basic.json")),
    ("counter_persistence", include_str!("../scenarios/counter_persistence.json")),
    ("cluster_pod", include_str!("../scenarios/cluster_pod.json")),
    ("cluster_cap", include_str!("../scenarios/cluster_cap.json")),
    ("bridge_latency_sweep", include_str!("../scenarios/bridge_latency_sweep.json")),
    ("geoloc_cbg", include_str!("../scenarios/geoloc_cbg.json")),
    ("geoloc_speedup", include_str!("../scenarios/geoloc_speedup.json")),
    ("geoloc_bft", include_str!("../scenarios/geoloc_bft.json")),
    ("geoloc_fixed_network", include_str!("../scenarios/geoloc_fixed_network.json")),
    ("attest_accounting", include_str!("../scenarios/attest_accounting.json")),
    ("workload_classification", include_str!("../scenarios/workload_classification.json")),
    ("attack_matrix", include_str!("../scenarios/attack_matrix.json")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unknown key `{path}`")]
    UnknownKey { path: String },
    #[error("invalid value at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("unknown scenario `{name}`; bundled scenarios: {}", valid.join(", "))]
    UnknownScenario { name: String, valid: Vec<String> },
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("reports differ between two runs with the same seed: {file}")]
    Nondeterministic { file: String },
}

impl ScenarioError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Simulation(_) | ScenarioError::Nondeterministic { .. } | ScenarioError::Io { .. } => 3,
            _ => 2,
        }
    }
}

fn sim<E: std::fmt::Display>(e: E) -> ScenarioError {
    ScenarioError::Simulation(e.to_string())
}

fn invalid(path: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.to_string(), message: message.into() }
}

// Schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fleet: FleetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub licensing: Option<LicensingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<CounterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geoloc: Option<GeolocSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attest: Option<AttestSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary: Option<AdversarySection>,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

/// Chips used by the licensing section, and the template for every chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub chips: usize,
    pub chip: ChipConfig,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig { chips: 4, chip: ChipConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Device,
    Landmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub role: NodeRole,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: u32,
    pub b: u32,
    pub latency: LatencyModel,
}

/// Fixed topology for the geolocation section: one device and its landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub default_latency: LatencyModel,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LicensingSection {
    pub licenses_per_chip: usize,
    pub quota_float_ops: u64,
    /// Share of each quota consumed before the next license arrives.
    pub consume_fraction: f64,
    /// Power-cycle each chip after every this many licenses; 0 never.
    pub power_cycle_every: usize,
    /// Forged, replayed and cross-device install attempts.
    pub fuzzed: usize,
}

impl Default for LicensingSection {
    fn default() -> Self {
        LicensingSection {
            licenses_per_chip: 10,
            quota_float_ops: 1_000_000,
            consume_fraction: 0.5,
            power_cycle_every: 3,
            fuzzed: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCase {
    pub name: String,
    pub policy: PersistencePolicy,
    /// The policy must never recover less usage than was consumed.
    #[serde(default)]
    pub lossless: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterSection {
    pub schedules: usize,
    pub max_cuts: usize,
    pub max_steps_between_cuts: usize,
    pub step_ms: [u64; 2],
    pub max_consume: u64,
    pub policies: Vec<PolicyCase>,
}

impl Default for CounterSection {
    fn default() -> Self {
        CounterSection {
            schedules: 100,
            max_cuts: 5,
            max_steps_between_cuts: 10,
            step_ms: [1_000, 30_000],
            max_consume: 15_000,
            policies: vec![
                PolicyCase { name: "capacitor".into(), policy: PersistencePolicy::CapacitorFlush, lossless: true },
                PolicyCase {
                    name: "periodic".into(),
                    policy: PersistencePolicy::PeriodicFlush { interval_ms: 60_000, capacitor_backup: false },
                    lossless: false,
                },
                PolicyCase {
                    name: "boot_roundup".into(),
                    policy: PersistencePolicy::BootRoundup { increment: 1_000_000, flush_interval_ms: 60_000 },
                    lossless: true,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapStep {
    pub at_ms: u64,
    pub cap: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_period_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    pub bytes_per_step: u64,
    pub steps: usize,
    pub latency_multipliers: Vec<f64>,
}

impl Default for BridgeSection {
    fn default() -> Self {
        BridgeSection { bytes_per_step: 1 << 28, steps: 10, latency_multipliers: vec![5.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub regime: Regime,
    pub pods: usize,
    pub chips_per_pod: usize,
    pub config: ClusterConfig,
    /// Random handshake and teardown events.
    pub churn_events: usize,
    pub churn_step_ms: u64,
    pub cap_schedule: Vec<CapStep>,
    /// Direct handshakes attempted across pod boundaries.
    pub cross_pod_attempts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeSection>,
    pub coupling: CouplingDetector,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            regime: Regime::Pod,
            pods: 2,
            chips_per_pod: 4,
            config: ClusterConfig::default(),
            churn_events: 0,
            churn_step_ms: 500,
            cap_schedule: Vec::new(),
            cross_pod_attempts: 0,
            bridge: None,
            coupling: CouplingDetector::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorChoice {
    Cbg,
    Bft { f: usize },
    Likelihood {
        #[serde(default)]
        options: LikelihoodOptions,
    },
    Descent {
        #[serde(default)]
        options: DescentOptions,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupSpec {
    #[serde(default)]
    pub landmark: usize,
    pub latency_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompromiseSpec {
    pub count: usize,
    pub behavior: LandmarkBehavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeolocSection {
    pub trials: usize,
    pub landmarks_min: usize,
    pub landmarks_max: usize,
    /// Generator settings; `landmarks` is overridden per trial.
    pub trial: TrialConfig,
    pub resolution_deg: f64,
    pub estimator: EstimatorChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<SpeedupSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compromised: Option<CompromiseSpec>,
    /// Extra delay added to every device link, ms.
    pub slowdown_ms: f64,
    /// Landmarks knocked offline.
    pub unavailable: usize,
}

impl Default for GeolocSection {
    fn default() -> Self {
        GeolocSection {
            trials: 50,
            landmarks_min: 3,
            landmarks_max: 9,
            trial: TrialConfig::default(),
            resolution_deg: 0.25,
            estimator: EstimatorChoice::Cbg,
            speedup: None,
            compromised: None,
            slowdown_ms: 0.0,
            unavailable: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttestSection {
    pub devices: usize,
    pub steps: usize,
    pub period: usize,
    pub peak_ops_per_step: u64,
    pub snapshot_every: usize,
    pub verify: VerifyConfig,
    /// Scripted covert meter rollbacks, each on its own chip.
    pub covert_rollbacks: usize,
    /// Labeled traces fed to the workload classifier.
    pub labeled_traces: usize,
    pub trace_steps: usize,
    pub classifier: ClassifierConfig,
}

impl Default for AttestSection {
    fn default() -> Self {
        AttestSection {
            devices: 128,
            steps: 64,
            period: 4,
            peak_ops_per_step: 250_000,
            snapshot_every: 16,
            verify: VerifyConfig::default(),
            covert_rollbacks: 0,
            labeled_traces: 0,
            trace_steps: 64,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySection {
    pub tier: Tier,
    /// Explicit grants; every capability the tier allows when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<Capability>>,
    #[serde(default)]
    pub mapping: TierMapping,
    /// Mechanisms whose attacks are run; those with a section when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanisms: Option<Vec<Mechanism>>,
}

/// A pass/fail check over the metrics of one section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    HonestLicensesAccepted,
    ForgedLicensesRejected,
    QuotaEnforced,
    CountersMonotone,
    CountersLossless,
    CapRespected,
    PodIsolation,
    BridgeLatencyMatches,
    CouplingDetected,
    TruthContained { min_rate: f64 },
    AlarmRate { min_rate: f64 },
    RefusalRate { min_rate: f64 },
    AccountingExact,
    RollbacksDetected,
    ThresholdCorrect,
    ClassificationAccuracy { min: f64 },
    MatrixAsExpected,
    MatrixComplete,
}

impl Predicate {
    pub fn name(&self) -> &'static str {
        match self {
            Predicate::HonestLicensesAccepted => "honest_licenses_accepted",
            Predicate::ForgedLicensesRejected => "forged_licenses_rejected",
            Predicate::QuotaEnforced => "quota_enforced",
            Predicate::CountersMonotone => "counters_monotone",
            Predicate::CountersLossless => "counters_lossless",
            Predicate::CapRespected => "cap_respected",
            Predicate::PodIsolation => "pod_isolation",
            Predicate::BridgeLatencyMatches => "bridge_latency_matches",
            Predicate::CouplingDetected => "coupling_detected",
            Predicate::TruthContained { .. } => "truth_contained",
            Predicate::AlarmRate { .. } => "alarm_rate",
            Predicate::RefusalRate { .. } => "refusal_rate",
            Predicate::AccountingExact => "accounting_exact",
            Predicate::RollbacksDetected => "rollbacks_detected",
            Predicate::ThresholdCorrect => "threshold_correct",
            Predicate::ClassificationAccuracy { .. } => "classification_accuracy",
            Predicate::MatrixAsExpected => "matrix_as_expected",
            Predicate::MatrixComplete => "matrix_complete",
        }
    }

    /// Config section the predicate reads.
    pub fn section(&self) -> &'static str {
        match self {
            Predicate::HonestLicensesAccepted | Predicate::ForgedLicensesRejected | Predicate::QuotaEnforced => {
                "licensing"
            }
            Predicate::CountersMonotone | Predicate::CountersLossless => "counters",
            Predicate::CapRespected
            | Predicate::PodIsolation
            | Predicate::BridgeLatencyMatches
            | Predicate::CouplingDetected => "cluster",
            Predicate::TruthContained { .. } | Predicate::AlarmRate { .. } | Predicate::RefusalRate { .. } => "geoloc",
            Predicate::AccountingExact
            | Predicate::RollbacksDetected
            | Predicate::ThresholdCorrect
            | Predicate::ClassificationAccuracy { .. } => "attest",
            Predicate::MatrixAsExpected | Predicate::MatrixComplete => "adversary",
        }
    }
}

// Loading

/// A parsed config and the unknown keys that were dropped from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: ScenarioConfig,
    pub warnings: Vec<String>,
}

fn unknown_field_name(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn join_path(path: &str, key: &str) -> String {
    if path.is_empty() || path == "." {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Walks `value` along the error path and removes `field` from the object
/// that holds it. Returns false when no such key exists.
fn remove_unknown(value: &mut Value, path: &serde_path_to_error::Path, field: &str) -> bool {
    use serde_path_to_error::Segment;
    let segs: Vec<&Segment> = path.iter().collect();
    let parent_len = match segs.last() {
        Some(Segment::Map { key }) if key == field => segs.len() - 1,
        _ => segs.len(),
    };
    let mut cur = value;
    for seg in &segs[..parent_len] {
        let next = match seg {
            Segment::Map { key } => cur.get_mut(key.as_str()),
            Segment::Seq { index } => cur.get_mut(*index),
            Segment::Enum { variant } => {
                if cur.get(variant.as_str()).is_some() {
                    cur.get_mut(variant.as_str())
                } else {
                    continue;
                }
            }
            Segment::Unknown => None,
        };
        match next {
            Some(v) => cur = v,
            None => return false,
        }
    }
    cur.as_object_mut().is_some_and(|o| o.remove(field).is_some())
}

/// Collects paths present in `input` but absent from `canonical`.
fn extra_keys(input: &Value, canonical: &Value, path: &str, out: &mut Vec<String>) {
    match (input, canonical) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let p = join_path(path, k);
                match b.get(k) {
                    Some(c) => extra_keys(v, c, &p, out),
                    None if v.is_null() => {}
                    None => out.push(p),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (v, c)) in a.iter().zip(b).enumerate() {
                extra_keys(v, c, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses and validates a scenario. Unknown keys are errors under `strict`
/// and warnings otherwise.
pub fn parse_config(text: &str, strict: bool) -> Result<Loaded, ScenarioError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
    let mut warnings = Vec::new();
    loop {
        let attempt: Result<ScenarioConfig, _> = serde_path_to_error::deserialize(&value);
        match attempt {
            Ok(config) => {
                // Catches keys that serde drops silently, such as extra
                // fields next to the tag of a unit variant.
                let canonical = serde_json::to_value(&config).expect("config serializes");
                let mut extra = Vec::new();
                extra_keys(&value, &canonical, "", &mut extra);
                if let Some(path) = extra.first().filter(|_| strict) {
                    return Err(ScenarioError::UnknownKey { path: path.clone() });
                }
                warnings.extend(extra.iter().map(|p| format!("ignoring unknown key `{p}`")));
                validate(&config)?;
                return Ok(Loaded { config, warnings });
            }
            Err(e) => {
                let path = e.path().to_string();
                let message = e.inner().to_string();
                let Some(field) = unknown_field_name(&message) else {
                    return Err(ScenarioError::Schema { path, message });
                };
                let full = join_path(&path, &field);
                let full = if path.ends_with(&field) { path.clone() } else { full };
                if strict {
                    return Err(ScenarioError::UnknownKey { path: full });
                }
                let e_path = e.path().clone();
                if !remove_unknown(&mut value, &e_path, &field) {
                    return Err(ScenarioError::Schema { path, message });
                }
                warnings.push(format!("ignoring unknown key `{full}`"));
            }
        }
    }
}

pub fn load_config(path: &Path, strict: bool) -> Result<Loaded, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text, strict)
}

/// Looks up a bundled scenario by name.
pub fn bundled(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::UnknownScenario {
        name: name.to_string(),
        valid: BUNDLED.iter().map(|(n, _)| n.to_string()).collect(),
    })?;
    Ok(parse_config(text, true)?.config)
}

/// The config with every default filled in, as pretty JSON.
pub fn describe(config: &ScenarioConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn validate(c: &ScenarioConfig) -> Result<(), ScenarioError> {
    if let Some(l) = &c.licensing {
        if !(0.0..=1.0).contains(&l.consume_fraction) {
            return Err(invalid("licensing.consume_fraction", "must be in [0, 1]"));
        }
        if c.fleet.chips < 2 && l.fuzzed > 0 {
            return Err(invalid("fleet.chips", "cross-device fuzzing needs at least 2 chips"));
        }
    }
    if let Some(k) = &c.counters {
        if k.step_ms[0] == 0 || k.step_ms[0] > k.step_ms[1] {
            return Err(invalid("counters.step_ms", "need 0 < min <= max"));
        }
        if k.max_cuts == 0 || k.max_steps_between_cuts == 0 || k.max_consume == 0 {
            return Err(invalid("counters", "max_cuts, max_steps_between_cuts and max_consume must be positive"));
        }
    }
    if let Some(cl) = &c.cluster {
        if cl.pods == 0 || cl.chips_per_pod < 2 {
            return Err(invalid("cluster.chips_per_pod", "need at least one pod of two chips"));
        }
        if cl.churn_step_ms == 0 {
            return Err(invalid("cluster.churn_step_ms", "must be positive"));
        }
        if cl.cap_schedule.windows(2).any(|w| w[1].at_ms < w[0].at_ms) {
            return Err(invalid("cluster.cap_schedule", "steps must be in time order"));
        }
        if let Some(b) = &cl.bridge {
            if cl.pods < 2 {
                return Err(invalid("cluster.pods", "bridging needs two pods"));
            }
            if b.latency_multipliers.iter().any(|m| !(*m >= 1.0 && m.is_finite())) {
                return Err(invalid("cluster.bridge.latency_multipliers", "each must be finite and >= 1"));
            }
        }
    }
    if let Some(g) = &c.geoloc {
        if g.landmarks_min == 0 || g.landmarks_min > g.landmarks_max {
            return Err(invalid("geoloc.landmarks_min", "need 1 <= landmarks_min <= landmarks_max"));
        }
        if !(g.resolution_deg > 0.0 && g.resolution_deg <= 5.0) {
            return Err(invalid("geoloc.resolution_deg", "must be in (0, 5]"));
        }
        if let Some(s) = g.speedup {
            if !(s.latency_factor > 0.0 && s.latency_factor < 1.0) {
                return Err(invalid("geoloc.speedup.latency_factor", "must be in (0, 1)"));
            }
        }
        if g.slowdown_ms < 0.0 {
            return Err(invalid("geoloc.slowdown_ms", "must be nonnegative"));
        }
    }
    if let Some(n) = &c.network {
        if c.geoloc.is_none() {
            return Err(invalid("network", "a fixed network is only used by the geoloc section"));
        }
        let devices = n.nodes.iter().filter(|x| x.role == NodeRole::Device).count();
        if devices != 1 {
            return Err(invalid("network.nodes", format!("need exactly one device node, found {devices}")));
        }
        for (i, l) in n.links.iter().enumerate() {
            if !n.nodes.iter().any(|x| x.id == l.a) || !n.nodes.iter().any(|x| x.id == l.b) {
                return Err(invalid(&format!("network.links[{i}]"), "endpoint is not a declared node"));
            }
            l.latency.validate().map_err(|e| invalid(&format!("network.links[{i}].latency"), e.to_string()))?;
        }
        n.default_latency.validate().map_err(|e| invalid("network.default_latency", e.to_string()))?;
    }
    if let Some(a) = &c.attest {
        if a.devices == 0 || a.steps == 0 || a.period == 0 {
            return Err(invalid("attest", "devices, steps and period must be positive"));
        }
    }
    if let Some(a) = &c.adversary {
        profile_of(a).validate(&a.mapping).map_err(|e| invalid("adversary", e.to_string()))?;
    }
    for (i, p) in c.predicates.iter().enumerate() {
        if *p == Predicate::CapRespected && c.cluster.as_ref().is_some_and(|cl| cl.regime != Regime::Cap) {
            return Err(invalid(&format!("predicates[{i}]"), "cap_respected needs cluster.regime = cap"));
        }
        let needs_bridge = matches!(p, Predicate::BridgeLatencyMatches | Predicate::CouplingDetected);
        if needs_bridge && c.cluster.as_ref().is_some_and(|cl| cl.bridge.is_none()) {
            return Err(invalid(&format!("predicates[{i}]"), format!("{} needs cluster.bridge", p.name())));
        }
        let present = match p.section() {
            "licensing" => c.licensing.is_some(),
            "counters" => c.counters.is_some(),
            "cluster" => c.cluster.is_some(),
            "geoloc" => c.geoloc.is_some(),
            "attest" => c.attest.is_some(),
            _ => true,
        };
        if !present {
            return Err(invalid(
                &format!("predicates[{i}]"),
                format!("{} needs a `{}` section", p.name(), p.section()),
            ));
        }
    }
    Ok(())
}

fn profile_of(a: &AdversarySection) -> AdversaryProfile {
    match &a.capabilities {
        Some(caps) => AdversaryProfile { tier: a.tier, capabilities: caps.clone() },
        None => AdversaryProfile::for_tier(a.tier, &a.mapping),
    }
}

// Running

fn section_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn jsonl(records: &[Value]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LicensingMetrics {
    pub chips: usize,
    pub honest_total: usize,
    pub honest_accepted: usize,
    pub fuzzed_total: usize,
    pub fuzzed_accepted: usize,
    pub power_cycles: usize,
    pub quota_enforced_chips: usize,
}

fn run_licensing(
    sec: &LicensingSection,
    fleet: &FleetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LicensingMetrics, Vec<Value>), ScenarioError> {
    let mut issuer = Issuer::new(rng);
    let cfg = ChipConfig { require_license: true, ..fleet.chip.clone() };
    let mut chips: Vec<Chip> =
        (0..fleet.chips).map(|_| Chip::provision(&mut *rng, vec![issuer.public_key()], cfg.clone())).collect();
    let quotas = BTreeMap::from([(MeterResource::FloatOps, sec.quota_float_ops)]);
    let per_license = (sec.quota_float_ops as f64 * sec.consume_fraction) as u64;
    let mut m = LicensingMetrics { chips: chips.len(), ..Default::default() };
    let mut records = Vec::new();
    let mut installed: Vec<Vec<License>> = vec![Vec::new(); chips.len()];
    let mut t = 0;
    for round in 0..sec.licenses_per_chip {
        for (i, chip) in chips.iter_mut().enumerate() {
            t += 1_000;
            chip.advance_to(t).map_err(sim)?;
            let lic = issuer.issue(chip.device_id(), quotas.clone(), None);
            let now = chip.rtc_read();
            let r = install(chip, &lic, now);
            m.honest_total += 1;
            m.honest_accepted += usize::from(r.is_ok());
            let consumed = r.is_ok() && chip.consume(MeterResource::FloatOps, per_license).is_ok();
            records.push(json!({
                "kind": "honest",
                "device": chip.device_id(),
                "license_id": lic.license_id,
                "accepted": r.is_ok(),
                "reason": r.err(),
                "consumed": if consumed { per_license } else { 0 },
            }));
            installed[i].push(lic);
            if sec.power_cycle_every > 0 && (round + 1) % sec.power_cycle_every == 0 {
                chip.power_loss(t + 1).map_err(sim)?;
                chip.power_on(t + 2).map_err(sim)?;
                m.power_cycles += 1;
            }
        }
    }
    for chip in chips.iter_mut().filter(|c| c.active_license().is_some()) {
        let left = sec.quota_float_ops - chip.usage_since_install(MeterResource::FloatOps);
        let exhausted = chip.consume(MeterResource::FloatOps, left).is_ok();
        let refused = chip.consume(MeterResource::FloatOps, 1).is_err();
        let enforced = exhausted && refused && chip.throttle() != Throttle::Full;
        m.quota_enforced_chips += usize::from(enforced);
        records.push(json!({
            "kind": "quota",
            "device": chip.device_id(),
            "throttle": chip.throttle(),
            "enforced": enforced,
        }));
    }
    let rogue = Issuer::new(rng);
    for k in 0..sec.fuzzed {
        let i = rng.random_range(0..chips.len());
        let dev = chips[i].device_id();
        let mut variant = ["bit_flip", "wrong_key", "replayed", "cross_device"][k % 4];
        if variant == "replayed" && installed[i].is_empty() {
            variant = "bit_flip";
        }
        let candidate = match variant {
            "bit_flip" => {
                let fresh = issuer.sign_license(issuer.next_license_id(dev), dev, quotas.clone(), None);
                let mut wire = fresh.to_wire();
                let bit = rng.random_range(0..wire.len() * 8);
                wire[bit / 8] ^= 1 << (bit % 8);
                License::from_wire(&wire).ok()
            }
            "wrong_key" => Some(rogue.sign_license(issuer.next_license_id(dev), dev, quotas.clone(), None)),
            "replayed" => Some(installed[i][rng.random_range(0..installed[i].len())].clone()),
            _ => {
                let j = (i + rng.random_range(1..chips.len())) % chips.len();
                let other = chips[j].device_id();
                Some(issuer.sign_license(issuer.next_license_id(other), other, quotas.clone(), None))
            }
        };
        let chip = &mut chips[i];
        let now = chip.rtc_read();
        let result = match &candidate {
            Some(lic) => install(chip, lic, now).map_err(|r| json!(r)),
            None => Err(json!("malformed")),
        };
        m.fuzzed_total += 1;
        m.fuzzed_accepted += usize::from(result.is_ok());
        records.push(json!({
            "kind": "fuzz",
            "variant": variant,
            "device": dev,
            "accepted": result.is_ok(),
            "reason": result.err(),
        }));
    }
    Ok((m, records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub name: String,
    pub lossless: bool,
    pub power_cuts: usize,
    pub persisted_decreases: usize,
    pub undercounting_cuts: usize,
    pub worst_undercount: u64,
    pub worst_overcount: u64,
}

fn run_counters(sec: &CounterSection, rng: &mut ChaCha8Rng) -> Result<(Vec<PolicyMetrics>, Vec<Value>), ScenarioError> {
    let mut all = Vec::new();
    let mut records = Vec::new();
    for case in &sec.policies {
        let mut m = PolicyMetrics { name: case.name.clone(), lossless: case.lossless, ..Default::default() };
        for schedule in 0..sec.schedules {
            let cfg = ChipConfig { require_license: false, persistence: case.policy, ..Default::default() };
            let mut chip = Chip::provision(&mut *rng, vec![], cfg);
            let mut t = 0;
            let mut used = 0u64;
            let mut last = chip.persisted_snapshot().meters;
            let mut check = |chip: &Chip, m: &mut PolicyMetrics, at: u64| {
                let now = chip.persisted_snapshot().meters;
                if now.iter().zip(&last).any(|(a, b)| a < b) {
                    m.persisted_decreases += 1;
                    records.push(json!({"kind": "persisted_decrease", "policy": case.name, "schedule": schedule, "time": at}));
                }
                last = now;
            };
            for _ in 0..rng.random_range(1..=sec.max_cuts) {
                for _ in 0..rng.random_range(1..=sec.max_steps_between_cuts) {
                    t += rng.random_range(sec.step_ms[0]..=sec.step_ms[1]);
                    chip.advance_to(t).map_err(sim)?;
                    let amount = rng.random_range(1..=sec.max_consume);
                    chip.consume(MeterResource::FloatOps, amount).map_err(sim)?;
                    used += amount;
                    check(&chip, &mut m, t);
                }
                t += rng.random_range(1..sec.step_ms[0].max(2));
                chip.power_loss(t).map_err(sim)?;
                check(&chip, &mut m, t);
                t += rng.random_range(1..sec.step_ms[0].max(2));
                chip.power_on(t).map_err(sim)?;
                check(&chip, &mut m, t);
                m.power_cuts += 1;
                let recovered = chip.meter(MeterResource::FloatOps);
                if recovered < used {
                    m.undercounting_cuts += 1;
                    m.worst_undercount = m.worst_undercount.max(used - recovered);
                } else {
                    m.worst_overcount = m.worst_overcount.max(recovered - used);
                }
                used = used.max(recovered);
            }
        }
        records.push(json!({"kind": "policy", "policy": case.policy, "metrics": m}));
        all.push(m);
    }
    Ok((all, records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeMetrics {
    pub latency_multiplier: f64,
    pub direct_ms: f64,
    pub bridged_ms: f64,
    pub ratio: f64,
    pub bytes_moved: u64,
    pub coupling_flags: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub devices: usize,
    pub handshakes: usize,
    pub sessions_opened: usize,
    pub rejections: BTreeMap<String, usize>,
    pub teardowns: usize,
    pub cap_updates: usize,
    pub max_check_period_ms: u64,
    pub max_over_cap_ms: u64,
    pub over_cap_beyond_period: usize,
    pub unexplained_over_cap: u64,
    pub cross_pod_attempts: usize,
    pub cross_pod_sessions: usize,
    pub bridge: Vec<BridgeMetrics>,
}

fn build_cluster(
    sec: &ClusterSection,
    config: ClusterConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Cluster, Regulator, Vec<Vec<crate::chipmodel::DeviceId>>), ScenarioError> {
    let regulator = Regulator::new(rng);
    let mut cluster = Cluster::new(sec.regime, regulator.public_key(), config, seed);
    let mut pods = Vec::new();
    for p in 0..sec.pods {
        let mut members = Vec::new();
        let mut ids = Vec::new();
        for _ in 0..sec.chips_per_pod {
            let chip = Chip::provision(&mut *rng, vec![], ChipConfig { require_license: false, ..Default::default() });
            members.push(PodMember { device_id: chip.device_id(), firmware_hash: chip.firmware_hash() });
            ids.push(cluster.add_chip(chip));
        }
        cluster.install_manifest(regulator.sign_manifest(p as u64, 1, members)).map_err(sim)?;
        pods.push(ids);
    }
    Ok((cluster, regulator, pods))
}

fn run_cluster(sec: &ClusterSection, seed: u64, rng: &mut ChaCha8Rng) -> Result<(ClusterMetrics, String), ScenarioError> {
    let (mut cluster, regulator, pods) = build_cluster(sec, sec.config, seed, rng)?;
    let devices: Vec<_> = pods.iter().flatten().copied().collect();
    let mut m = ClusterMetrics { devices: devices.len(), ..Default::default() };
    m.max_check_period_ms = sec.config.check_period_ms;
    let note = |m: &mut ClusterMetrics, r: &Result<u64, crate::cluster::ClusterError>| {
        m.handshakes += 1;
        match r {
            Ok(_) => m.sessions_opened += 1,
            Err(e) => *m.rejections.entry(e.to_string()).or_default() += 1,
        }
    };
    for _ in 0..sec.cross_pod_attempts {
        let pa = rng.random_range(0..pods.len());
        let pb = (pa + rng.random_range(1..pods.len().max(2))) % pods.len();
        if pa == pb {
            break;
        }
        let a = pods[pa][rng.random_range(0..pods[pa].len())];
        let b = pods[pb][rng.random_range(0..pods[pb].len())];
        let r = cluster.handshake(a, b);
        m.cross_pod_attempts += 1;
        m.cross_pod_sessions += usize::from(r.is_ok());
        note(&mut m, &r);
    }
    // Over-cap stretches observed at event times, keyed by device, measured
    // from the cap lowering that caused them.
    let mut over_since: BTreeMap<crate::chipmodel::DeviceId, u64> = BTreeMap::new();
    let mut period: BTreeMap<crate::chipmodel::DeviceId, u64> =
        devices.iter().map(|d| (*d, sec.config.check_period_ms)).collect();
    let mut schedule = sec.cap_schedule.iter().peekable();
    let mut epoch = 0;
    let mut t = cluster.now_ms();
    for _ in 0..sec.churn_events {
        t += rng.random_range(1..=sec.churn_step_ms);
        while let Some(step) = schedule.next_if(|s| s.at_ms <= t) {
            cluster.advance_to(step.at_ms.max(cluster.now_ms())).map_err(sim)?;
            epoch += 1;
            let p = step.check_period_ms.unwrap_or(sec.config.check_period_ms);
            let policy = regulator.sign_cap(step.cap, epoch, p);
            for d in &devices {
                let before = cluster.cap(*d).unwrap_or(u32::MAX);
                cluster.apply_cap_update(*d, &policy).map_err(sim)?;
                period.insert(*d, p);
                if step.cap < before && cluster.open_sessions(*d) > step.cap {
                    over_since.entry(*d).or_insert(cluster.now_ms());
                }
            }
            m.cap_updates += 1;
            m.max_check_period_ms = m.max_check_period_ms.max(p);
        }
        cluster.advance_to(t).map_err(sim)?;
        let open: Vec<u64> = cluster.sessions().map(|s| s.id).collect();
        if !open.is_empty() && rng.random_bool(0.35) {
            cluster.teardown(open[rng.random_range(0..open.len())]).map_err(sim)?;
            m.teardowns += 1;
        } else {
            let pod = &pods[rng.random_range(0..pods.len())];
            let a = pod[rng.random_range(0..pod.len())];
            let b = pod[rng.random_range(0..pod.len())];
            if a != b {
                let r = cluster.handshake(a, b);
                note(&mut m, &r);
            }
        }
        for d in devices.iter().filter(|_| sec.regime == Regime::Cap) {
            let cap = cluster.cap(*d).unwrap_or(u32::MAX);
            if cluster.open_sessions(*d) > cap {
                let since = *over_since.entry(*d).or_insert_with(|| {
                    m.unexplained_over_cap += 1;
                    t
                });
                if t - since > period[d] {
                    m.over_cap_beyond_period += 1;
                }
            } else {
                over_since.remove(d);
            }
        }
    }
    let audit = cluster.cap_audit();
    m.max_over_cap_ms = audit.max_over_cap_ms;
    m.unexplained_over_cap += audit.unexplained;
    let mut log = cluster.log_jsonl();
    if let Some(b) = &sec.bridge {
        for &mult in &b.latency_multipliers {
            let config = ClusterConfig { bridge_latency_multiplier: mult, ..sec.config };
            let (mut c, _, pods) = build_cluster(sec, config, seed, rng)?;
            let s = c.handshake(pods[0][0], pods[0][1]).map_err(sim)?;
            let direct_ms = c.transfer(s, b.bytes_per_step).map_err(sim)?;
            let mut bridged_ms = 0.0;
            let mut moved = 0;
            for step in 0..b.steps {
                c.advance_to(step as u64 * sec.coupling.window_ms).map_err(sim)?;
                bridged_ms = c.bridge_transfer(pods[0][0], pods[1][0], b.bytes_per_step, true).map_err(sim)?;
                moved += b.bytes_per_step;
            }
            let flags = sec.coupling.detect(c.log());
            let bm = BridgeMetrics {
                latency_multiplier: mult,
                direct_ms,
                bridged_ms,
                ratio: bridged_ms / direct_ms,
                bytes_moved: moved,
                coupling_flags: flags.len(),
            };
            log.push_str(&serde_json::to_string(&json!({"event": "bridge_sweep", "result": bm})).expect("serializes"));
            log.push('\n');
            m.bridge.push(bm);
        }
    }
    Ok((m, log))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeolocMetrics {
    pub trials: usize,
    pub contained: usize,
    pub alarms: usize,
    pub refused: usize,
    pub mean_cells: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_point_error_km: Option<f64>,
}

fn fixed_trial(net_cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Trial, ScenarioError> {
    let mut net = Network::new(net_cfg.default_latency).map_err(sim)?;
    let mut ids = BTreeMap::new();
    let mut landmarks = Vec::new();
    let mut truth = None;
    for node in &net_cfg.nodes {
        let id = match node.role {
            NodeRole::Device => {
                truth = Some(node.position);
                DEVICE_NODE
            }
            NodeRole::Landmark => {
                let id = NodeId(landmarks.len() as u32);
                let calibration = Calibration {
                    fixed_overhead_ms: net_cfg.default_latency.fixed_overhead_ms,
                    propagation_factor: net_cfg.default_latency.propagation_factor,
                    history: Vec::new(),
                };
                landmarks.push(Landmark::new(LandmarkId(id.0), id, node.position, calibration));
                id
            }
        };
        ids.insert(node.id, id);
        net.add_node(id, node.position);
    }
    for l in &net_cfg.links {
        net.set_link_model(ids[&l.a], ids[&l.b], l.latency).map_err(sim)?;
    }
    let truth = truth.ok_or_else(|| invalid("network.nodes", "no device node"))?;
    let chip = Chip::provision(rng, vec![], ChipConfig { require_license: false, ..Default::default() });
    Ok(Trial { truth, landmarks, net, chip })
}

fn run_geoloc(
    sec: &GeolocSection,
    network: Option<&NetworkConfig>,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(GeolocMetrics, Vec<Value>), ScenarioError> {
    let mut m = GeolocMetrics { trials: sec.trials, ..Default::default() };
    let mut records = Vec::new();
    let mut cells_total = 0usize;
    let cell_km = sec.resolution_deg * std::f64::consts::PI / 180.0 * crate::netsim::EARTH_RADIUS_KM;
    for k in 0..sec.trials {
        let mut trial = match network {
            Some(n) => fixed_trial(n, rng)?,
            None => {
                let n = rng.random_range(sec.landmarks_min..=sec.landmarks_max);
                generate(rng, &TrialConfig { landmarks: n, ..sec.trial })
            }
        };
        let n = trial.landmarks.len();
        if let Some(s) = sec.speedup {
            trial.grant_speedup(s.landmark % n, s.latency_factor).map_err(sim)?;
        }
        if sec.slowdown_ms > 0.0 {
            for i in 0..n {
                trial.add_slowdown(i, sec.slowdown_ms).map_err(sim)?;
            }
        }
        if let Some(c) = sec.compromised {
            for lm in trial.landmarks.iter_mut().take(c.count) {
                lm.compromise(c.behavior, true).map_err(sim)?;
            }
        }
        for lm in trial.landmarks.iter_mut().rev().take(sec.unavailable) {
            lm.unavailable = true;
        }
        let (ms, _) = trial.run(seed.wrapping_add(k as u64)).map_err(sim)?;
        let bounds = bounds_from(&ms, &trial.landmarks).map_err(sim)?;
        let estimate: Option<GeoEstimate> = match sec.estimator {
            EstimatorChoice::Cbg => covering_grid(&bounds, sec.resolution_deg).map(|g| cbg_from_bounds(&bounds, &g)),
            EstimatorChoice::Bft { f } => covering_grid_bft(&bounds, f, sec.resolution_deg)
                .and_then(|g| bft_from_bounds(&bounds, f, &g).ok()),
            EstimatorChoice::Likelihood { options } => covering_grid(&bounds, sec.resolution_deg)
                .and_then(|g| estimate_likelihood(&ms, &trial.landmarks, &g, &options).ok()),
            EstimatorChoice::Descent { .. } => None,
        };
        let mut rec = json!({
            "trial": k,
            "truth": trial.truth,
            "landmarks": n,
            "usable_measurements": ms.iter().filter(|x| x.usable()).count(),
        });
        let (contained, alarm, refused) = match (sec.estimator, &estimate) {
            (EstimatorChoice::Descent { options }, _) => {
                let sum = trial.landmarks.iter().fold([0.0; 3], |acc, l| {
                    let v = l.position.to_unit_vector();
                    [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
                });
                match estimate_descent(&ms, &trial.landmarks, GeoPoint::from_unit_vector(sum), &options) {
                    Ok(r) => {
                        let err = geodesic_distance(r.point, trial.truth);
                        m.max_point_error_km = Some(m.max_point_error_km.map_or(err, |e: f64| e.max(err)));
                        rec["point_estimate"] = json!(r.point);
                        rec["point_error_km"] = json!(err);
                        (err <= cell_km, false, false)
                    }
                    Err(e) => {
                        rec["error"] = json!(e.to_string());
                        (false, false, true)
                    }
                }
            }
            (_, Some(est)) => {
                cells_total += est.region.count();
                rec["cells"] = json!(est.region.count());
                rec["empty"] = json!(est.empty);
                rec["floor_violation"] = json!(est.floor_violation);
                rec["fallback"] = json!(est.fallback);
                if let Some(p) = est.point_estimate {
                    let err = geodesic_distance(p, trial.truth);
                    m.max_point_error_km = Some(m.max_point_error_km.map_or(err, |e: f64| e.max(err)));
                    rec["point_error_km"] = json!(err);
                }
                (est.region.contains(trial.truth), est.alarm(), false)
            }
            (_, None) => (false, false, true),
        };
        rec["contained"] = json!(contained);
        rec["alarm"] = json!(alarm);
        rec["refused"] = json!(refused);
        m.contained += usize::from(contained);
        m.alarms += usize::from(alarm);
        m.refused += usize::from(refused);
        records.push(rec);
    }
    let estimated = sec.trials - m.refused;
    m.mean_cells = if estimated > 0 { cells_total as f64 / estimated as f64 } else { 0.0 };
    Ok((m, records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttestMetrics {
    pub devices: usize,
    pub oracle_float_ops: u128,
    pub reported_float_ops: u128,
    pub complete: bool,
    pub threshold_units: u128,
    pub exceeds_threshold: bool,
    pub oracle_exceeds_threshold: bool,
    pub rollbacks_scripted: usize,
    pub rollbacks_detected: usize,
    pub classified: usize,
    pub classified_correct: usize,
    pub accuracy: f64,
}

fn run_attest(sec: &AttestSection, rng: &mut ChaCha8Rng) -> Result<(AttestMetrics, Vec<Value>), ScenarioError> {
    let mut records = Vec::new();
    let trace = frontier_trace(rng, sec.devices, sec.steps, sec.period);
    let acc = account_trace(&trace, sec.peak_ops_per_step, sec.snapshot_every, rng).map_err(sim)?;
    let report = verify_chain(&acc.snapshots, &acc.registry, &sec.verify);
    for d in &report.devices {
        records.push(json!({"record": "device", "verification": d}));
    }
    let mut m = AttestMetrics {
        devices: sec.devices,
        oracle_float_ops: acc.oracle_float_ops,
        reported_float_ops: report.total_float_ops,
        complete: report.complete,
        threshold_units: report.threshold_units,
        exceeds_threshold: report.exceeds_threshold,
        oracle_exceeds_threshold: acc.oracle_float_ops > sec.verify.threshold.units(),
        ..Default::default()
    };
    for i in 0..sec.covert_rollbacks {
        let mut chip = Chip::provision(&mut *rng, vec![], ChipConfig { require_license: false, ..Default::default() });
        let registry = Registry::from([(chip.device_id(), chip.public_key())]);
        let first = emit_snapshot(&mut chip, 0).map_err(sim)?;
        let work = rng.random_range(1..=1_000_000u64);
        chip.consume(MeterResource::FloatOps, work).map_err(sim)?;
        let second = emit_snapshot(&mut chip, 1).map_err(sim)?;
        let amount = rng.random_range(1..=work);
        chip.tamper_event(TamperEvent {
            kind: TamperKind::MeterRollback { resource: MeterResource::FloatOps, amount },
            covert: true,
        });
        let third = emit_snapshot(&mut chip, 2).map_err(sim)?;
        let r = verify_chain(&[first, second, third], &registry, &VerifyConfig::default());
        let detected = !r.rollbacks().is_empty();
        m.rollbacks_scripted += 1;
        m.rollbacks_detected += usize::from(detected);
        records.push(json!({"record": "rollback", "script": i, "amount": amount, "detected": detected, "rollbacks": r.rollbacks()}));
    }
    for i in 0..sec.labeled_traces {
        let label = WorkloadLabel::ALL[i % WorkloadLabel::ALL.len()];
        let t = generate_trace(rng, label, sec.trace_steps);
        let c = classify(&t, &sec.classifier);
        let correct = c.label == label.into();
        m.classified += 1;
        m.classified_correct += usize::from(correct);
        records.push(json!({"record": "classification", "truth": label, "predicted": c.label, "features": c.features}));
    }
    m.accuracy = if m.classified > 0 { m.classified_correct as f64 / m.classified as f64 } else { 0.0 };
    Ok((m, records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetrics {
    pub tier: Option<Tier>,
    pub rows: usize,
    pub exercised: usize,
    pub as_expected: usize,
    pub unexpected: Vec<String>,
    pub skipped: Vec<String>,
}

/// Metrics per section; absent sections stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub licensing: Option<LicensingMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counters: Option<Vec<PolicyMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geoloc: Option<GeolocMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attest: Option<AttestMetrics>,
    pub attack_matrix: MatrixMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateResult {
    pub predicate: Predicate,
    pub passed: bool,
    pub detail: String,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn evaluate(p: &Predicate, m: &Metrics) -> (bool, String) {
    let missing = || (false, format!("no `{}` metrics", p.section()));
    match *p {
        Predicate::HonestLicensesAccepted => m.licensing.as_ref().map_or_else(missing, |l| {
            (l.honest_accepted == l.honest_total, format!("{}/{} honest licenses accepted", l.honest_accepted, l.honest_total))
        }),
        Predicate::ForgedLicensesRejected => m.licensing.as_ref().map_or_else(missing, |l| {
            (l.fuzzed_accepted == 0, format!("{}/{} fuzzed licenses accepted", l.fuzzed_accepted, l.fuzzed_total))
        }),
        Predicate::QuotaEnforced => m.licensing.as_ref().map_or_else(missing, |l| {
            (l.quota_enforced_chips == l.chips, format!("{}/{} chips throttled at quota", l.quota_enforced_chips, l.chips))
        }),
        Predicate::CountersMonotone => m.counters.as_ref().map_or_else(missing, |c| {
            let bad: usize = c.iter().map(|p| p.persisted_decreases).sum();
            (bad == 0, format!("{bad} persisted decreases over {} policies", c.len()))
        }),
        Predicate::CountersLossless => m.counters.as_ref().map_or_else(missing, |c| {
            let bad: Vec<&str> =
                c.iter().filter(|p| p.lossless && p.undercounting_cuts > 0).map(|p| p.name.as_str()).collect();
            (bad.is_empty(), format!("lossless policies undercounting: [{}]", bad.join(", ")))
        }),
        Predicate::CapRespected => m.cluster.as_ref().map_or_else(missing, |c| {
            let ok = c.over_cap_beyond_period == 0
                && c.unexplained_over_cap == 0
                && c.max_over_cap_ms <= c.max_check_period_ms;
            (
                ok,
                format!(
                    "max over-cap {} ms (period {} ms), {} late, {} unexplained",
                    c.max_over_cap_ms, c.max_check_period_ms, c.over_cap_beyond_period, c.unexplained_over_cap
                ),
            )
        }),
        Predicate::PodIsolation => m.cluster.as_ref().map_or_else(missing, |c| {
            (c.cross_pod_sessions == 0, format!("{}/{} cross-pod handshakes succeeded", c.cross_pod_sessions, c.cross_pod_attempts))
        }),
        Predicate::BridgeLatencyMatches => m.cluster.as_ref().map_or_else(missing, |c| {
            let ok = !c.bridge.is_empty()
                && c.bridge.iter().all(|b| (b.ratio - b.latency_multiplier).abs() <= 1e-9 * b.latency_multiplier);
            let ratios: Vec<String> = c.bridge.iter().map(|b| format!("{}x->{:.6}", b.latency_multiplier, b.ratio)).collect();
            (ok, format!("bridge/direct ratios [{}]", ratios.join(", ")))
        }),
        Predicate::CouplingDetected => m.cluster.as_ref().map_or_else(missing, |c| {
            let ok = !c.bridge.is_empty() && c.bridge.iter().all(|b| b.coupling_flags > 0);
            (ok, format!("{}/{} bridge runs flagged", c.bridge.iter().filter(|b| b.coupling_flags > 0).count(), c.bridge.len()))
        }),
        Predicate::TruthContained { min_rate } => m.geoloc.as_ref().map_or_else(missing, |g| {
            let r = rate(g.contained, g.trials);
            (r >= min_rate, format!("truth contained in {}/{} trials ({r:.3} >= {min_rate})", g.contained, g.trials))
        }),
        Predicate::AlarmRate { min_rate } => m.geoloc.as_ref().map_or_else(missing, |g| {
            let r = rate(g.alarms, g.trials);
            (r >= min_rate, format!("alarm in {}/{} trials ({r:.3} >= {min_rate})", g.alarms, g.trials))
        }),
        Predicate::RefusalRate { min_rate } => m.geoloc.as_ref().map_or_else(missing, |g| {
            let r = rate(g.refused, g.trials);
            (r >= min_rate, format!("verdict refused in {}/{} trials ({r:.3} >= {min_rate})", g.refused, g.trials))
        }),
        Predicate::AccountingExact => m.attest.as_ref().map_or_else(missing, |a| {
            (
                a.complete && a.reported_float_ops == a.oracle_float_ops,
                format!("reported {} vs oracle {} float ops", a.reported_float_ops, a.oracle_float_ops),
            )
        }),
        Predicate::RollbacksDetected => m.attest.as_ref().map_or_else(missing, |a| {
            (
                a.rollbacks_scripted > 0 && a.rollbacks_detected == a.rollbacks_scripted,
                format!("{}/{} covert rollbacks detected", a.rollbacks_detected, a.rollbacks_scripted),
            )
        }),
        Predicate::ThresholdCorrect => m.attest.as_ref().map_or_else(missing, |a| {
            (
                a.exceeds_threshold == a.oracle_exceeds_threshold,
                format!(
                    "exceeds threshold {} (oracle {}) at {} units",
                    a.exceeds_threshold, a.oracle_exceeds_threshold, a.threshold_units
                ),
            )
        }),
        Predicate::ClassificationAccuracy { min } => m.attest.as_ref().map_or_else(missing, |a| {
            (
                a.classified > 0 && a.accuracy >= min,
                format!("{}/{} traces classified correctly ({:.3} >= {min})", a.classified_correct, a.classified, a.accuracy),
            )
        }),
        Predicate::MatrixAsExpected => {
            let x = &m.attack_matrix;
            (x.unexpected.is_empty(), format!("{}/{} exercised rows as expected", x.as_expected, x.exercised))
        }
        Predicate::MatrixComplete => {
            let x = &m.attack_matrix;
            (x.skipped.is_empty(), format!("{} of {} rows skipped: [{}]", x.skipped.len(), x.rows, x.skipped.join(", ")))
        }
    }
}

/// Report files by name, plus predicate verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub files: BTreeMap<String, String>,
    pub metrics: Metrics,
    pub predicates: Vec<PredicateResult>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.predicates.iter().all(|p| p.passed)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |e: std::io::Error| ScenarioError::Io { path: dir.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir).map_err(io)?;
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body).map_err(io)?;
        }
        Ok(())
    }
}

fn mechanisms_present(c: &ScenarioConfig) -> Vec<Mechanism> {
    let mut out = Vec::new();
    if c.attest.is_some() {
        out.push(Mechanism::Accounting);
    }
    if c.cluster.is_some() {
        out.push(Mechanism::Interconnect);
    }
    if c.geoloc.is_some() {
        out.push(Mechanism::Geolocation);
    }
    if c.licensing.is_some() || c.counters.is_some() {
        out.push(Mechanism::Licensing);
    }
    out
}

fn section_text(out: &mut String, title: &str, value: &Value) {
    let _ = writeln!(out, "[{title}]");
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let _ = writeln!(out, "  {k}: {v}");
            }
        }
        Value::Array(items) => {
            for v in items {
                let _ = writeln!(out, "  {v}");
            }
        }
        other => {
            let _ = writeln!(out, "  {other}");
        }
    }
    out.push('\n');
}

/// Runs `config` once with `seed`.
pub fn run_once(config: &ScenarioConfig, seed: u64) -> Result<RunReport, ScenarioError> {
    validate(config)?;
    let mut files = BTreeMap::new();
    let mut metrics = Metrics::default();
    if let Some(sec) = &config.licensing {
        let (m, recs) = run_licensing(sec, &config.fleet, &mut section_rng(seed, 1))?;
        files.insert("licensing.jsonl".to_string(), jsonl(&recs));
        metrics.licensing = Some(m);
    }
    if let Some(sec) = &config.counters {
        let (m, recs) = run_counters(sec, &mut section_rng(seed, 2))?;
        files.insert("counters.jsonl".to_string(), jsonl(&recs));
        metrics.counters = Some(m);
    }
    if let Some(sec) = &config.cluster {
        let (m, log) = run_cluster(sec, seed, &mut section_rng(seed, 3))?;
        files.insert("cluster.jsonl".to_string(), log);
        metrics.cluster = Some(m);
    }
    if let Some(sec) = &config.geoloc {
        let (m, recs) = run_geoloc(sec, config.network.as_ref(), seed, &mut section_rng(seed, 4))?;
        files.insert("geoloc.jsonl".to_string(), jsonl(&recs));
        metrics.geoloc = Some(m);
    }
    if let Some(sec) = &config.attest {
        let (m, recs) = run_attest(sec, &mut section_rng(seed, 5))?;
        files.insert("attest.jsonl".to_string(), jsonl(&recs));
        metrics.attest = Some(m);
    }
    let (profile, mechanisms) = match &config.adversary {
        Some(a) => {
            let mechs = a.mechanisms.clone().unwrap_or_else(|| mechanisms_present(config));
            (profile_of(a), mechs)
        }
        None => (AdversaryProfile::default(), mechanisms_present(config)),
    };
    let rows: Vec<MatrixRow> = run_matrix_for(&profile, seed, &mechanisms).map_err(sim)?;
    metrics.attack_matrix = MatrixMetrics {
        tier: Some(profile.tier),
        rows: rows.len(),
        exercised: rows.iter().filter(|r| r.exercised()).count(),
        as_expected: rows.iter().filter(|r| r.as_expected == Some(true)).count(),
        unexpected: rows.iter().filter(|r| r.as_expected == Some(false)).map(|r| r.attack.name().to_string()).collect(),
        skipped: rows.iter().filter(|r| !r.exercised()).map(|r| r.attack.name().to_string()).collect(),
    };
    files.insert("attack_matrix.jsonl".to_string(), matrix_jsonl(&rows));

    let predicates: Vec<PredicateResult> = config
        .predicates
        .iter()
        .map(|p| {
            let (passed, detail) = evaluate(p, &metrics);
            PredicateResult { predicate: *p, passed, detail }
        })
        .collect();

    let mut summary = String::new();
    let _ = writeln!(summary, "scenario: {}", config.name);
    let _ = writeln!(summary, "seed: {seed}");
    if !config.description.is_empty() {
        let _ = writeln!(summary, "description: {}", config.description);
    }
    summary.push('\n');
    let mv = serde_json::to_value(&metrics).expect("metrics serialize");
    for key in ["licensing", "counters", "cluster", "geoloc", "attest"] {
        if let Some(v) = mv.get(key) {
            section_text(&mut summary, key, v);
        }
    }
    let _ = writeln!(summary, "[attack_matrix]");
    summary.push_str(&matrix_text(&rows));
    summary.push('\n');
    let _ = writeln!(summary, "[predicates]");
    for p in &predicates {
        let _ = writeln!(summary, "  {} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.predicate.name(), p.detail);
    }
    let passed = predicates.iter().filter(|p| p.passed).count();
    let verdict = if passed == predicates.len() { "PASS" } else { "FAIL" };
    let _ = writeln!(summary, "\nresult: {verdict} ({passed}/{} predicates)", predicates.len());
    files.insert("summary.txt".to_string(), summary);
    files.insert(
        "metrics.json".to_string(),
        serde_json::to_string_pretty(&json!({"scenario": config.name, "seed": seed, "metrics": metrics, "predicates": predicates}))
            .expect("metrics serialize")
            + "\n",
    );
    Ok(RunReport { files, metrics, predicates })
}

/// Runs `config` twice and fails unless both runs produce identical files.
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<RunReport, ScenarioError> {
    let first = run_once(config, seed)?;
    let second = run_once(config, seed)?;
    for (name, body) in &first.files {
        if second.files.get(name) != Some(body) {
            return Err(ScenarioError::Nondeterministic { file: name.clone() });
        }
    }
    if first.files.len() != second.files.len() {
        return Err(ScenarioError::Nondeterministic { file: "<file set>".into() });
    }
    Ok(first)
}
