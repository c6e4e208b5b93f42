//! Adversary tiers, capability grants and scripted attacks.
//!
//! Every attack is a deterministic scenario over the mechanism modules.
//! [`run_attack`] reports whether the adversary's goal held and whether any
//! defense raised a flag. [`run_matrix`] runs all of them and compares the
//! outcome with the expected one.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attest::classify::{classify, fragment, frontier_trace, inject_noise, ClassLabel, ClassifierConfig};
use crate::attest::{account_trace, emit_snapshot, verify_chain, Accounting, MeterSnapshot, Registry, VerifyConfig};
use crate::chipmodel::{
    Chip, ChipConfig, MeterResource, PersistencePolicy, TamperEvent, TamperKind, TamperOutcome, Throttle,
    REFERENCE_FIRMWARE,
};
use crate::cluster::{
    Cluster, ClusterConfig, ClusterError, ClusterEvent, CouplingDetector, HandshakeReject, Impostor, PodMember,
    PolicyReject, Regime, Regulator,
};
use crate::crypto::{digest, Keypair};
use crate::geoloc::estimators::{bft_from_bounds, cbg_from_bounds};
use crate::geoloc::synth::{generate, Trial, TrialConfig, DEVICE_NODE};
use crate::geoloc::{
    bounds_from, challenge_round, covering_grid, covering_grid_bft, DistanceBound, GeoEstimate, KeyResponder,
    LandmarkBehavior, RoundConfig,
};
use crate::licensing::{install, Issuer, License, RejectReason};
use crate::netsim::{GeoPoint, NodeId, Simulator};

/// Adversary resource levels, ordered from least to most capable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Spends little and avoids discovery.
    Minimal,
    /// Spends heavily but still avoids discovery.
    Covert,
    /// Spends heavily and does not care about discovery.
    Open,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Minimal, Tier::Covert, Tier::Open];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Minimal => "minimal",
            Tier::Covert => "covert",
            Tier::Open => "open",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A granted capability, with parameters where the attack needs them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Capability {
    CounterfeitLicense,
    ReplayLicense,
    CrossDeviceLicense,
    PowerCutTiming,
    CovertTamper,
    KeyExtraction,
    PcieBridge,
    GradientSmuggle,
    DelaySlowdown,
    DelaySpeedup { latency_factor: f64 },
    CompromiseLandmarks { count: usize },
    DdosLandmarks,
    FirmwareMod,
}

/// Capability without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityKind {
    CounterfeitLicense,
    ReplayLicense,
    CrossDeviceLicense,
    PowerCutTiming,
    CovertTamper,
    KeyExtraction,
    PcieBridge,
    GradientSmuggle,
    DelaySlowdown,
    DelaySpeedup,
    CompromiseLandmarks,
    DdosLandmarks,
    FirmwareMod,
}

impl CapabilityKind {
    pub const ALL: [CapabilityKind; 13] = [
        CapabilityKind::CounterfeitLicense,
        CapabilityKind::ReplayLicense,
        CapabilityKind::CrossDeviceLicense,
        CapabilityKind::PowerCutTiming,
        CapabilityKind::CovertTamper,
        CapabilityKind::KeyExtraction,
        CapabilityKind::PcieBridge,
        CapabilityKind::GradientSmuggle,
        CapabilityKind::DelaySlowdown,
        CapabilityKind::DelaySpeedup,
        CapabilityKind::CompromiseLandmarks,
        CapabilityKind::DdosLandmarks,
        CapabilityKind::FirmwareMod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CapabilityKind::CounterfeitLicense => "counterfeit_license",
            CapabilityKind::ReplayLicense => "replay_license",
            CapabilityKind::CrossDeviceLicense => "cross_device_license",
            CapabilityKind::PowerCutTiming => "power_cut_timing",
            CapabilityKind::CovertTamper => "covert_tamper",
            CapabilityKind::KeyExtraction => "key_extraction",
            CapabilityKind::PcieBridge => "pcie_bridge",
            CapabilityKind::GradientSmuggle => "gradient_smuggle",
            CapabilityKind::DelaySlowdown => "delay_slowdown",
            CapabilityKind::DelaySpeedup => "delay_speedup",
            CapabilityKind::CompromiseLandmarks => "compromise_landmarks",
            CapabilityKind::DdosLandmarks => "ddos_landmarks",
            CapabilityKind::FirmwareMod => "firmware_mod",
        }
    }

    /// The capability with default parameters.
    pub fn with_defaults(self) -> Capability {
        match self {
            CapabilityKind::CounterfeitLicense => Capability::CounterfeitLicense,
            CapabilityKind::ReplayLicense => Capability::ReplayLicense,
            CapabilityKind::CrossDeviceLicense => Capability::CrossDeviceLicense,
            CapabilityKind::PowerCutTiming => Capability::PowerCutTiming,
            CapabilityKind::CovertTamper => Capability::CovertTamper,
            CapabilityKind::KeyExtraction => Capability::KeyExtraction,
            CapabilityKind::PcieBridge => Capability::PcieBridge,
            CapabilityKind::GradientSmuggle => Capability::GradientSmuggle,
            CapabilityKind::DelaySlowdown => Capability::DelaySlowdown,
            CapabilityKind::DelaySpeedup => Capability::DelaySpeedup { latency_factor: 0.5 },
            CapabilityKind::CompromiseLandmarks => Capability::CompromiseLandmarks { count: 2 },
            CapabilityKind::DdosLandmarks => Capability::DdosLandmarks,
            CapabilityKind::FirmwareMod => Capability::FirmwareMod,
        }
    }
}

impl fmt::Display for CapabilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Capability {
    pub fn kind(&self) -> CapabilityKind {
        match self {
            Capability::CounterfeitLicense => CapabilityKind::CounterfeitLicense,
            Capability::ReplayLicense => CapabilityKind::ReplayLicense,
            Capability::CrossDeviceLicense => CapabilityKind::CrossDeviceLicense,
            Capability::PowerCutTiming => CapabilityKind::PowerCutTiming,
            Capability::CovertTamper => CapabilityKind::CovertTamper,
            Capability::KeyExtraction => CapabilityKind::KeyExtraction,
            Capability::PcieBridge => CapabilityKind::PcieBridge,
            Capability::GradientSmuggle => CapabilityKind::GradientSmuggle,
            Capability::DelaySlowdown => CapabilityKind::DelaySlowdown,
            Capability::DelaySpeedup { .. } => CapabilityKind::DelaySpeedup,
            Capability::CompromiseLandmarks { .. } => CapabilityKind::CompromiseLandmarks,
            Capability::DdosLandmarks => CapabilityKind::DdosLandmarks,
            Capability::FirmwareMod => CapabilityKind::FirmwareMod,
        }
    }
}

/// Lowest tier at which each capability may be granted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TierMapping(pub BTreeMap<CapabilityKind, Tier>);

impl Default for TierMapping {
    fn default() -> Self {
        use CapabilityKind as K;
        let mut m = BTreeMap::new();
        for k in [K::CounterfeitLicense, K::ReplayLicense, K::CrossDeviceLicense, K::PowerCutTiming, K::DelaySlowdown] {
            m.insert(k, Tier::Minimal);
        }
        for k in [K::CovertTamper, K::FirmwareMod, K::PcieBridge, K::GradientSmuggle, K::DelaySpeedup, K::CompromiseLandmarks] {
            m.insert(k, Tier::Covert);
        }
        for k in [K::KeyExtraction, K::DdosLandmarks] {
            m.insert(k, Tier::Open);
        }
        TierMapping(m)
    }
}

impl TierMapping {
    /// Tier needed for `kind`; unmapped capabilities need the open tier.
    pub fn min_tier(&self, kind: CapabilityKind) -> Tier {
        self.0.get(&kind).copied().unwrap_or(Tier::Open)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryProfile {
    pub tier: Tier,
    pub capabilities: Vec<Capability>,
}

impl Default for AdversaryProfile {
    fn default() -> Self {
        AdversaryProfile::for_tier(Tier::Minimal, &TierMapping::default())
    }
}

impl AdversaryProfile {
    /// Every capability the mapping allows at `tier`, with default parameters.
    pub fn for_tier(tier: Tier, mapping: &TierMapping) -> Self {
        let capabilities = CapabilityKind::ALL
            .iter()
            .filter(|k| mapping.min_tier(**k) <= tier)
            .map(|k| k.with_defaults())
            .collect();
        AdversaryProfile { tier, capabilities }
    }

    /// A profile with no capabilities at all.
    pub fn none() -> Self {
        AdversaryProfile { tier: Tier::Minimal, capabilities: Vec::new() }
    }

    pub fn has(&self, kind: CapabilityKind) -> bool {
        self.capabilities.iter().any(|c| c.kind() == kind)
    }

    pub fn speedup_factor(&self) -> Option<f64> {
        self.capabilities.iter().find_map(|c| match c {
            Capability::DelaySpeedup { latency_factor } => Some(*latency_factor),
            _ => None,
        })
    }

    pub fn compromise_count(&self) -> Option<usize> {
        self.capabilities.iter().find_map(|c| match c {
            Capability::CompromiseLandmarks { count } => Some(*count),
            _ => None,
        })
    }

    /// Checks parameters and that the tier allows every capability.
    pub fn validate(&self, mapping: &TierMapping) -> Result<(), AdversaryError> {
        for c in &self.capabilities {
            let needed = mapping.min_tier(c.kind());
            if needed > self.tier {
                return Err(AdversaryError::CapabilityAboveTier { capability: c.kind(), tier: self.tier, needed });
            }
            match *c {
                Capability::DelaySpeedup { latency_factor } if !(latency_factor > 0.0 && latency_factor < 1.0) => {
                    return Err(AdversaryError::InvalidParameter(format!(
                        "delay_speedup.latency_factor must be in (0, 1), got {latency_factor}"
                    )));
                }
                Capability::CompromiseLandmarks { count: 0 } => {
                    return Err(AdversaryError::InvalidParameter("compromise_landmarks.count must be >= 1".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("attack {attack} needs capability {capability}, which the profile does not grant")]
    MissingCapability { attack: Attack, capability: CapabilityKind },
    #[error("capability {capability} needs tier {needed}, profile tier is {tier}")]
    CapabilityAboveTier { capability: CapabilityKind, tier: Tier, needed: Tier },
    #[error("invalid capability parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown attack {0:?}")]
    UnknownAttack(String),
    #[error("scenario failed: {0}")]
    Simulation(String),
}

fn sim<E: fmt::Display>(e: E) -> AdversaryError {
    AdversaryError::Simulation(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Accounting,
    Interconnect,
    Geolocation,
    Licensing,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Accounting, Mechanism::Interconnect, Mechanism::Geolocation, Mechanism::Licensing];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Accounting => "accounting",
            Mechanism::Interconnect => "interconnect",
            Mechanism::Geolocation => "geolocation",
            Mechanism::Licensing => "licensing",
        }
    }
}

/// The outcome a correct implementation produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub succeeded: bool,
    pub detected: bool,
}

macro_rules! attacks {
    ($($variant:ident => $name:literal, $mech:ident, [$($cap:ident),*], ($s:literal, $d:literal), $desc:literal;)*) => {
        /// Scripted attacks, one per matrix row.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum Attack {
            $($variant),*
        }

        impl Attack {
            pub const ALL: &'static [Attack] = &[$(Attack::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Attack::$variant => $name),* }
            }

            pub fn mechanism(self) -> Mechanism {
                match self { $(Attack::$variant => Mechanism::$mech),* }
            }

            /// Capabilities the script uses.
            pub fn required(self) -> &'static [CapabilityKind] {
                match self { $(Attack::$variant => &[$(CapabilityKind::$cap),*]),* }
            }

            pub fn expected(self) -> Expected {
                match self { $(Attack::$variant => Expected { succeeded: $s, detected: $d }),* }
            }

            pub fn description(self) -> &'static str {
                match self { $(Attack::$variant => $desc),* }
            }
        }
    };
}

attacks! {
    MeterRollbackVisible => "meter_rollback_visible", Accounting, [CovertTamper], (false, true),
        "roll a float-op meter back between two snapshots with no work in between";
    MeterRollbackMasked => "meter_rollback_masked", Accounting, [CovertTamper], (true, false),
        "roll a meter back and keep working so the next snapshot still increases";
    SnapshotForgery => "snapshot_forgery", Accounting, [], (false, true),
        "replace a snapshot with a lower one signed under a fresh key";
    ExtractedKeySnapshotForgery => "extracted_key_snapshot_forgery", Accounting, [KeyExtraction], (true, false),
        "sign lowered snapshots with the device key pulled out of the chip";
    NoiseInjection => "noise_injection", Accounting, [], (true, true),
        "add irrelevant compute and traffic so training is not classified as such";
    Fragmentation => "fragmentation", Accounting, [], (true, true),
        "split a training run across sites so no fragment looks like frontier training";
    UnauthorizedPodJoin => "unauthorized_pod_join", Interconnect, [], (false, true),
        "connect a registered chip that is not in the pod manifest";
    PodFirmwareModification => "pod_firmware_modification", Interconnect, [FirmwareMod], (false, true),
        "modify a pod member's firmware and keep using the interconnect";
    ForgedPodManifest => "forged_pod_manifest", Interconnect, [], (false, true),
        "install a self-signed manifest that adds an extra chip";
    CloneMemberIdentity => "clone_member_identity", Interconnect, [KeyExtraction], (true, false),
        "load a member's extracted key onto an unauthorized chip and join the pod";
    UnsignedCapRaise => "unsigned_cap_raise", Interconnect, [], (false, true),
        "broadcast a cap increase signed with a rogue key";
    CapPolicyReplay => "cap_policy_replay", Interconnect, [], (false, true),
        "replay an older, higher cap after the regulator lowered it";
    OvertCapTamper => "overt_cap_tamper", Interconnect, [], (false, true),
        "open the enclosure to reach the cap enforcement logic";
    ForgedHandshake => "forged_handshake", Interconnect, [], (false, true),
        "answer a handshake for a registered identity without its key";
    PcieBridge => "pcie_bridge", Interconnect, [PcieBridge], (true, true),
        "carry per-step training traffic between pods through the host PCIe bus";
    GradientSmuggling => "gradient_smuggling", Interconnect, [GradientSmuggle], (true, true),
        "relay averaged gradients between pods through a few compromised devices";
    LowBandwidthSmuggling => "low_bandwidth_smuggling", Interconnect, [GradientSmuggle], (true, false),
        "relay heavily compressed gradients below the coupling threshold";
    DelaySlowdown => "delay_slowdown", Geolocation, [DelaySlowdown], (false, false),
        "delay every response to blur the location";
    DelaySpeedup => "delay_speedup", Geolocation, [DelaySpeedup], (false, true),
        "shorten the path to one landmark to appear closer to it";
    CompromisedLandmarks => "compromised_landmarks", Geolocation, [CompromiseLandmarks], (false, true),
        "make some landmarks misreport their measured times";
    LandmarkDdos => "landmark_ddos", Geolocation, [DdosLandmarks], (true, true),
        "flood enough landmarks that no location verdict can be reached";
    ForgedGeoResponse => "forged_geo_response", Geolocation, [], (false, true),
        "answer challenges from a chosen location with an unregistered key";
    KeyExtractionRelay => "key_extraction_relay", Geolocation, [KeyExtraction], (true, false),
        "load the chip's extracted key onto a device at an allowed location";
    CounterfeitLicense => "counterfeit_license", Licensing, [CounterfeitLicense], (false, true),
        "install licenses signed with attacker keys or with flipped bits";
    LicenseReplay => "license_replay", Licensing, [ReplayLicense], (false, true),
        "install an already used license again";
    CrossDeviceLicense => "cross_device_license", Licensing, [CrossDeviceLicense], (false, true),
        "install a license issued for another chip";
    ReplayAfterPowerCycle => "replay_after_power_cycle", Licensing, [ReplayLicense, PowerCutTiming], (false, true),
        "cut power and replay an older license after reboot";
    LicenseStockpiling => "license_stockpiling", Licensing, [], (false, true),
        "hoard licenses and install them after they expire";
    LicenseCounterReset => "license_counter_reset", Licensing, [CovertTamper, ReplayLicense], (true, false),
        "covertly reset the stored license id, then replay an old license";
    CovertMeterTamper => "covert_meter_tamper", Licensing, [CovertTamper], (true, false),
        "covertly roll back usage meters to run past the quota";
    OvertMeterTamper => "overt_meter_tamper", Licensing, [], (false, true),
        "roll back usage meters without defeating the tamper sensors";
    ThrottleBypass => "throttle_bypass", Licensing, [CovertTamper], (true, true),
        "disable throttling and keep running after the quota is spent";
    PowerCutCapacitor => "power_cut_capacitor", Licensing, [PowerCutTiming], (false, false),
        "cut power between flushes on a chip with a hold-up capacitor";
    PowerCutUncapacitated => "power_cut_uncapacitated", Licensing, [PowerCutTiming], (true, false),
        "cut power between flushes on a chip with only periodic flushes";
    PowerCutBootRoundup => "power_cut_boot_roundup", Licensing, [PowerCutTiming], (false, false),
        "cut power between flushes on a chip that rounds meters up at boot";
}

impl Attack {
    pub fn from_name(name: &str) -> Result<Attack, AdversaryError> {
        Attack::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| AdversaryError::UnknownAttack(name.to_string()))
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named threat against one mechanism and the scripts that exercise it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threat {
    pub mechanism: Mechanism,
    pub name: &'static str,
    pub attacks: &'static [Attack],
}

/// Threats the four mechanisms must be evaluated against.
pub const THREATS: &[Threat] = &[
    Threat {
        mechanism: Mechanism::Accounting,
        name: "tampering with meters to falsify measurements",
        attacks: &[Attack::MeterRollbackVisible, Attack::MeterRollbackMasked],
    },
    Threat {
        mechanism: Mechanism::Accounting,
        name: "forging or manipulating reported data",
        attacks: &[Attack::SnapshotForgery, Attack::ExtractedKeySnapshotForgery],
    },
    Threat {
        mechanism: Mechanism::Accounting,
        name: "adding noise so workloads evade classification",
        attacks: &[Attack::NoiseInjection],
    },
    Threat {
        mechanism: Mechanism::Accounting,
        name: "fragmenting workloads across sites or providers",
        attacks: &[Attack::Fragmentation],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "connecting unauthorized chips to a fixed pod",
        attacks: &[Attack::UnauthorizedPodJoin, Attack::CloneMemberIdentity],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "compromising the pod root of trust",
        attacks: &[Attack::ForgedPodManifest, Attack::PodFirmwareModification, Attack::ForgedHandshake],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "broadcasting instructions that raise the cap",
        attacks: &[Attack::UnsignedCapRaise, Attack::CapPolicyReplay],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "physically tampering with cap enforcement",
        attacks: &[Attack::OvertCapTamper],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "smuggling averaged gradients through compromised bridge devices",
        attacks: &[Attack::GradientSmuggling],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "bridging chips through the host PCIe connection",
        attacks: &[Attack::PcieBridge],
    },
    Threat {
        mechanism: Mechanism::Interconnect,
        name: "low-bandwidth decentralized training between pods",
        attacks: &[Attack::LowBandwidthSmuggling],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "slowing responses",
        attacks: &[Attack::DelaySlowdown],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "speeding responses over private or satellite links",
        attacks: &[Attack::DelaySpeedup],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "manipulating landmark calibration or clocks",
        attacks: &[Attack::CompromisedLandmarks],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "denial of service against landmarks",
        attacks: &[Attack::LandmarkDdos],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "locating landmarks to aim delay manipulation",
        attacks: &[Attack::DelaySpeedup, Attack::DelaySlowdown],
    },
    Threat {
        mechanism: Mechanism::Geolocation,
        name: "loading the key onto another chip",
        attacks: &[Attack::KeyExtractionRelay, Attack::ForgedGeoResponse],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "counterfeit licenses",
        attacks: &[Attack::CounterfeitLicense],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "reusing a license on the same chip",
        attacks: &[Attack::LicenseReplay, Attack::ReplayAfterPowerCycle, Attack::LicenseCounterReset],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "using one license on several chips",
        attacks: &[Attack::CrossDeviceLicense],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "stockpiling licenses",
        attacks: &[Attack::LicenseStockpiling],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "tampering with meters to run beyond the license",
        attacks: &[Attack::CovertMeterTamper, Attack::OvertMeterTamper],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "circumventing the throttle",
        attacks: &[Attack::ThrottleBypass],
    },
    Threat {
        mechanism: Mechanism::Licensing,
        name: "powering off the chip to tamper with the mechanism",
        attacks: &[
            Attack::PowerCutCapacitor,
            Attack::PowerCutUncapacitated,
            Attack::PowerCutBootRoundup,
            Attack::ReplayAfterPowerCycle,
        ],
    },
];

/// Ordered key/value evidence attached to an outcome.
pub type Evidence = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// The adversary's goal held.
    pub succeeded: bool,
    /// Some defense flagged the attempt.
    pub detected: bool,
    pub evidence: Evidence,
}

struct Ev(Evidence);

impl Ev {
    fn new() -> Self {
        Ev(BTreeMap::new())
    }

    fn put(&mut self, key: &str, value: Value) -> &mut Self {
        self.0.insert(key.to_string(), value);
        self
    }

    fn done(self, succeeded: bool, detected: bool) -> Result<AttackOutcome, AdversaryError> {
        Ok(AttackOutcome { succeeded, detected, evidence: self.0 })
    }
}

/// Runs `attack` under `profile`. Fails if the profile lacks a capability
/// the script uses.
pub fn run_attack(attack: Attack, profile: &AdversaryProfile, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    if let Some(missing) = attack.required().iter().find(|k| !profile.has(**k)) {
        return Err(AdversaryError::MissingCapability { attack, capability: *missing });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match attack {
        Attack::MeterRollbackVisible => meter_rollback(rng, false),
        Attack::MeterRollbackMasked => meter_rollback(rng, true),
        Attack::SnapshotForgery => snapshot_forgery(rng, false),
        Attack::ExtractedKeySnapshotForgery => snapshot_forgery(rng, true),
        Attack::NoiseInjection => noise_injection(rng),
        Attack::Fragmentation => fragmentation(rng),
        Attack::UnauthorizedPodJoin => unauthorized_pod_join(rng, seed),
        Attack::PodFirmwareModification => pod_firmware_modification(rng, seed),
        Attack::ForgedPodManifest => forged_pod_manifest(rng, seed),
        Attack::CloneMemberIdentity => clone_member_identity(rng, seed),
        Attack::UnsignedCapRaise => unsigned_cap_raise(rng, seed),
        Attack::CapPolicyReplay => cap_policy_replay(rng, seed),
        Attack::OvertCapTamper => overt_cap_tamper(rng, seed),
        Attack::ForgedHandshake => forged_handshake(rng, seed),
        Attack::PcieBridge => cross_pod_traffic(rng, seed, 1 << 28, 8),
        Attack::GradientSmuggling => cross_pod_traffic(rng, seed, 1 << 27, 1),
        Attack::LowBandwidthSmuggling => cross_pod_traffic(rng, seed, 1 << 20, 1),
        Attack::DelaySlowdown => delay_slowdown(rng, seed),
        Attack::DelaySpeedup => delay_speedup(rng, seed, profile.speedup_factor().unwrap_or(0.5)),
        Attack::CompromisedLandmarks => compromised_landmarks(rng, seed, profile.compromise_count().unwrap_or(2)),
        Attack::LandmarkDdos => landmark_ddos(rng, seed),
        Attack::ForgedGeoResponse => geo_impersonation(rng, seed, false),
        Attack::KeyExtractionRelay => geo_impersonation(rng, seed, true),
        Attack::CounterfeitLicense => counterfeit_license(rng, 1000),
        Attack::LicenseReplay => license_replay(rng, false),
        Attack::ReplayAfterPowerCycle => license_replay(rng, true),
        Attack::CrossDeviceLicense => cross_device_license(rng),
        Attack::LicenseStockpiling => license_stockpiling(rng),
        Attack::LicenseCounterReset => license_counter_reset(rng),
        Attack::CovertMeterTamper => meter_tamper_vs_quota(rng, true),
        Attack::OvertMeterTamper => meter_tamper_vs_quota(rng, false),
        Attack::ThrottleBypass => throttle_bypass(rng),
        Attack::PowerCutCapacitor => power_cut(rng, PersistencePolicy::CapacitorFlush),
        Attack::PowerCutUncapacitated => {
            power_cut(rng, PersistencePolicy::PeriodicFlush { interval_ms: 60_000, capacitor_backup: false })
        }
        Attack::PowerCutBootRoundup => {
            power_cut(rng, PersistencePolicy::BootRoundup { increment: 1_000_000, flush_interval_ms: 60_000 })
        }
    }
}

fn exempt_chip(rng: &mut ChaCha8Rng) -> Chip {
    Chip::provision(rng, vec![], ChipConfig { require_license: false, ..Default::default() })
}

fn float_quota(n: u64) -> BTreeMap<MeterResource, u64> {
    BTreeMap::from([(MeterResource::FloatOps, n)])
}

fn float_ops(chip: &mut Chip, n: u64) -> Result<(), AdversaryError> {
    chip.consume(MeterResource::FloatOps, n).map(|_| ()).map_err(sim)
}

fn covert(kind: TamperKind) -> TamperEvent {
    TamperEvent { kind, covert: true }
}

fn extract_key(chip: &mut Chip) -> Result<Keypair, AdversaryError> {
    match chip.tamper_event(covert(TamperKind::KeyExtraction)) {
        TamperOutcome::KeyExtracted(kp) => Ok(kp),
        other => Err(sim(format!("key extraction failed: {other:?}"))),
    }
}

fn report_violations(report: &crate::attest::AttestReport) -> usize {
    report.devices.iter().map(|d| d.violations.len()).sum()
}

// Accounting

fn meter_rollback(rng: &mut ChaCha8Rng, masked: bool) -> Result<AttackOutcome, AdversaryError> {
    let mut chip = exempt_chip(rng);
    let registry = Registry::from([(chip.device_id(), chip.public_key())]);
    let mut snaps = vec![emit_snapshot(&mut chip, 0).map_err(sim)?];
    let mut oracle = 0u128;
    let work: u64 = rng.random_range(500_000..1_000_000);
    float_ops(&mut chip, work)?;
    oracle += u128::from(work);
    snaps.push(emit_snapshot(&mut chip, 1).map_err(sim)?);
    let rollback = work / 2;
    chip.tamper_event(covert(TamperKind::MeterRollback { resource: MeterResource::FloatOps, amount: rollback }));
    if masked {
        float_ops(&mut chip, work)?;
        oracle += u128::from(work);
    }
    snaps.push(emit_snapshot(&mut chip, 2).map_err(sim)?);
    let report = verify_chain(&snaps, &registry, &VerifyConfig::default());
    let detected = !report.rollbacks().is_empty() || report_violations(&report) > 0;
    let under = report.total_float_ops < oracle;
    let mut ev = Ev::new();
    ev.put("oracle_float_ops", json!(oracle))
        .put("reported_float_ops", json!(report.total_float_ops))
        .put("rolled_back", json!(rollback))
        .put("rollbacks", json!(report.rollbacks().len()));
    ev.done(under && !detected, detected)
}

fn snapshot_forgery(rng: &mut ChaCha8Rng, extracted: bool) -> Result<AttackOutcome, AdversaryError> {
    let mut chip = exempt_chip(rng);
    let registry = Registry::from([(chip.device_id(), chip.public_key())]);
    let first = emit_snapshot(&mut chip, 0).map_err(sim)?;
    let work: u64 = rng.random_range(1_000_000..2_000_000);
    float_ops(&mut chip, work)?;
    let honest = emit_snapshot(&mut chip, 1).map_err(sim)?;
    let key = if extracted { extract_key(&mut chip)? } else { Keypair::generate(rng) };
    let mut meters = honest.meters.clone();
    let claimed = work / 10;
    meters.insert(MeterResource::FloatOps, claimed);
    let signed = MeterSnapshot::signed_bytes(honest.device_id, honest.sequence_no, honest.rtc_time, &meters);
    let forged = MeterSnapshot { meters, device_signature: key.sign(&signed), ..honest };
    let report = verify_chain(&[first, forged], &registry, &VerifyConfig::default());
    let detected = report_violations(&report) > 0 || !report.complete;
    let mut ev = Ev::new();
    ev.put("oracle_float_ops", json!(work))
        .put("reported_float_ops", json!(report.total_float_ops))
        .put("key_source", json!(if extracted { "extracted" } else { "fresh" }));
    ev.done(report.total_float_ops < u128::from(work) && !detected, detected)
}

/// Peak float ops per device step. 128 devices x 64 steps at ~95%
/// utilization crosses the 10^9-unit threshold, a quarter of them does not.
const TRACE_PEAK_OPS: u64 = 250_000;

fn account_many(parts: &[crate::attest::classify::WorkloadTrace], rng: &mut ChaCha8Rng) -> Result<Accounting, AdversaryError> {
    let mut all = Accounting { snapshots: Vec::new(), registry: Registry::new(), oracle_float_ops: 0 };
    for p in parts {
        let a = account_trace(p, TRACE_PEAK_OPS, 16, rng).map_err(sim)?;
        all.snapshots.extend(a.snapshots);
        all.registry.extend(a.registry);
        all.oracle_float_ops += a.oracle_float_ops;
    }
    Ok(all)
}

fn noise_injection(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    let cfg = ClassifierConfig::default();
    let trace = frontier_trace(rng, 128, 64, 4);
    let before = classify(&trace, &cfg).label;
    let noisy = inject_noise(&trace, 0.2, rng);
    let after = classify(&noisy, &cfg).label;
    let acc = account_many(std::slice::from_ref(&noisy), rng)?;
    let report = verify_chain(&acc.snapshots, &acc.registry, &VerifyConfig::default());
    let exact = report.total_float_ops == acc.oracle_float_ops && report.complete;
    let mut ev = Ev::new();
    ev.put("label_before", json!(before))
        .put("label_after", json!(after))
        .put("accounting_exact", json!(exact))
        .put("total_float_ops", json!(report.total_float_ops))
        .put("exceeds_threshold", json!(report.exceeds_threshold));
    let evaded = before == ClassLabel::FrontierTraining && after != ClassLabel::FrontierTraining;
    ev.done(evaded, exact && report.exceeds_threshold)
}

fn fragmentation(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    let cfg = ClassifierConfig::default();
    let trace = frontier_trace(rng, 128, 64, 4);
    let before = classify(&trace, &cfg).label;
    let parts = fragment(&trace, 4);
    let labels: Vec<ClassLabel> = parts.iter().map(|p| classify(p, &cfg).label).collect();
    let mut per_site_exceeds = Vec::new();
    for p in &parts {
        let a = account_many(std::slice::from_ref(p), rng)?;
        per_site_exceeds.push(verify_chain(&a.snapshots, &a.registry, &VerifyConfig::default()).exceeds_threshold);
    }
    let pooled = account_many(&parts, rng)?;
    let report = verify_chain(&pooled.snapshots, &pooled.registry, &VerifyConfig::default());
    let exact = report.total_float_ops == pooled.oracle_float_ops && report.complete;
    let mut ev = Ev::new();
    ev.put("label_before", json!(before))
        .put("fragment_labels", json!(labels))
        .put("per_site_exceeds_threshold", json!(per_site_exceeds))
        .put("pooled_exceeds_threshold", json!(report.exceeds_threshold))
        .put("accounting_exact", json!(exact))
        .put("total_float_ops", json!(report.total_float_ops));
    let evaded = before == ClassLabel::FrontierTraining && labels.iter().all(|l| *l != ClassLabel::FrontierTraining);
    ev.done(evaded, exact && report.exceeds_threshold)
}

// Interconnect

struct PodWorld {
    cluster: Cluster,
    regulator: Regulator,
    pods: Vec<Vec<crate::chipmodel::DeviceId>>,
}

fn pod_world(rng: &mut ChaCha8Rng, seed: u64, pods: usize, per_pod: usize, regime: Regime) -> Result<PodWorld, AdversaryError> {
    let regulator = Regulator::new(rng);
    let mut cluster = Cluster::new(regime, regulator.public_key(), ClusterConfig::default(), seed);
    let mut ids = Vec::new();
    for p in 0..pods {
        let mut members = Vec::new();
        let mut pod = Vec::new();
        for _ in 0..per_pod {
            let chip = exempt_chip(rng);
            members.push(PodMember { device_id: chip.device_id(), firmware_hash: chip.firmware_hash() });
            pod.push(cluster.add_chip(chip));
        }
        if regime == Regime::Pod {
            cluster.install_manifest(regulator.sign_manifest(p as u64, 1, members)).map_err(sim)?;
        }
        ids.push(pod);
    }
    Ok(PodWorld { cluster, regulator, pods: ids })
}

fn rejection(r: Result<u64, ClusterError>) -> Option<HandshakeReject> {
    match r {
        Err(ClusterError::Rejected(x)) => Some(x),
        _ => None,
    }
}

fn unauthorized_pod_join(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 4, Regime::Pod)?;
    let outsider = w.cluster.add_chip(exempt_chip(rng));
    let r = w.cluster.handshake(outsider, w.pods[0][0]);
    let reason = rejection(r.clone());
    let mut ev = Ev::new();
    ev.put("rejected", json!(reason));
    ev.done(r.is_ok(), reason.is_some())
}

fn pod_firmware_modification(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 4, Regime::Pod)?;
    let (a, b) = (w.pods[0][0], w.pods[0][1]);
    let chip = w.cluster.chip_mut(a).ok_or_else(|| sim("missing chip"))?;
    chip.tamper_event(covert(TamperKind::FirmwareModification { image: b"patched firmware without cap checks".to_vec() }));
    let r = w.cluster.handshake(a, b);
    let reason = rejection(r.clone());
    let disabled = w.cluster.log().iter().any(|e| matches!(e, ClusterEvent::SelfDisabled { device, .. } if *device == a));
    let mut ev = Ev::new();
    ev.put("rejected", json!(reason)).put("self_disabled", json!(disabled));
    ev.done(r.is_ok(), reason == Some(HandshakeReject::FirmwareMismatch) && disabled)
}

fn forged_pod_manifest(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 4, Regime::Pod)?;
    let outsider_chip = exempt_chip(rng);
    let outsider = outsider_chip.device_id();
    let hash = outsider_chip.firmware_hash();
    w.cluster.add_chip(outsider_chip);
    let rogue = Regulator::new(rng);
    let mut members: Vec<PodMember> = w.cluster.manifest(0).map(|m| m.members.clone()).unwrap_or_default();
    members.push(PodMember { device_id: outsider, firmware_hash: hash });
    let install = w.cluster.install_manifest(rogue.sign_manifest(0, 2, members));
    let policy = match &install {
        Err(ClusterError::Policy(p)) => Some(*p),
        _ => None,
    };
    let joined = w.cluster.handshake(outsider, w.pods[0][0]).is_ok();
    let mut ev = Ev::new();
    ev.put("manifest_rejected", json!(policy)).put("outsider_joined", json!(joined));
    ev.done(joined, policy == Some(PolicyReject::BadSignature))
}

fn clone_member_identity(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 4, Regime::Pod)?;
    let (victim, peer) = (w.pods[0][0], w.pods[0][1]);
    let chip = w.cluster.chip_mut(victim).ok_or_else(|| sim("missing chip"))?;
    let keypair = extract_key(chip)?;
    let clone = Impostor { claimed: victim, keypair, firmware_hash: digest(REFERENCE_FIRMWARE) };
    let r = w.cluster.handshake_from(&clone, peer);
    let reason = rejection(r.clone());
    let mut ev = Ev::new();
    ev.put("clone_session", json!(r.as_ref().ok())).put("rejected", json!(reason));
    ev.done(r.is_ok(), reason.is_some())
}

fn fill_sessions(w: &mut PodWorld, hub: crate::chipmodel::DeviceId) -> usize {
    let peers: Vec<_> = w.pods[0].iter().copied().filter(|d| *d != hub).collect();
    peers.into_iter().filter(|p| w.cluster.handshake(hub, *p).is_ok()).count()
}

fn unsigned_cap_raise(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 12, Regime::Cap)?;
    let hub = w.pods[0][0];
    w.cluster.apply_cap_update(hub, &w.regulator.sign_cap(4, 1, 60_000)).map_err(sim)?;
    let rogue = Regulator::new(rng);
    let raise = w.cluster.apply_cap_update(hub, &rogue.sign_cap(64, 2, 60_000));
    let opened = fill_sessions(&mut w, hub);
    let mut ev = Ev::new();
    ev.put("policy_rejected", json!(matches!(raise, Err(ClusterError::Policy(PolicyReject::BadSignature)))))
        .put("cap", json!(w.cluster.cap(hub)))
        .put("sessions_opened", json!(opened));
    ev.done(opened > 4, raise.is_err())
}

fn cap_policy_replay(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 12, Regime::Cap)?;
    let hub = w.pods[0][0];
    let old = w.regulator.sign_cap(16, 1, 60_000);
    w.cluster.apply_cap_update(hub, &old).map_err(sim)?;
    w.cluster.apply_cap_update(hub, &w.regulator.sign_cap(4, 2, 60_000)).map_err(sim)?;
    let replay = w.cluster.apply_cap_update(hub, &old);
    let opened = fill_sessions(&mut w, hub);
    let mut ev = Ev::new();
    ev.put("policy_rejected", json!(matches!(replay, Err(ClusterError::Policy(PolicyReject::StaleEpoch)))))
        .put("cap", json!(w.cluster.cap(hub)))
        .put("sessions_opened", json!(opened));
    ev.done(opened > 4, replay.is_err())
}

fn overt_cap_tamper(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 12, Regime::Cap)?;
    let hub = w.pods[0][0];
    let chip = w.cluster.chip_mut(hub).ok_or_else(|| sim("missing chip"))?;
    let outcome = chip.tamper_event(TamperEvent { kind: TamperKind::EnclosureBreach, covert: false });
    let zeroized = matches!(outcome, TamperOutcome::Zeroized);
    let opened = fill_sessions(&mut w, hub);
    let mut ev = Ev::new();
    ev.put("zeroized", json!(zeroized)).put("sessions_opened", json!(opened));
    ev.done(opened > 8, zeroized)
}

fn forged_handshake(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 1, 4, Regime::Pod)?;
    let (victim, peer) = (w.pods[0][0], w.pods[0][1]);
    let impostor = Impostor { claimed: victim, keypair: Keypair::generate(rng), firmware_hash: digest(REFERENCE_FIRMWARE) };
    let r = w.cluster.handshake_from(&impostor, peer);
    let reason = rejection(r.clone());
    let mut ev = Ev::new();
    ev.put("rejected", json!(reason));
    ev.done(r.is_ok(), reason == Some(HandshakeReject::BadAuth))
}

/// Two pods train internally; `bridges` devices per pod exchange
/// `bytes_per_step` across the pod boundary every step through the host.
fn cross_pod_traffic(rng: &mut ChaCha8Rng, seed: u64, bytes_per_step: u64, bridges: usize) -> Result<AttackOutcome, AdversaryError> {
    let mut w = pod_world(rng, seed, 2, 8, Regime::Pod)?;
    let direct = rejection(w.cluster.handshake(w.pods[0][0], w.pods[1][0]));
    let mut sessions = Vec::new();
    for pod in &w.pods {
        for pair in pod.chunks(2) {
            sessions.push(w.cluster.handshake(pair[0], pair[1]).map_err(sim)?);
        }
    }
    let detector = CouplingDetector::default();
    let steps = 10;
    let mut moved = 0u64;
    let mut direct_ms = 0.0;
    let mut bridged_ms = 0.0;
    for step in 0..steps {
        w.cluster.advance_to(step * detector.window_ms).map_err(sim)?;
        for s in &sessions {
            direct_ms = w.cluster.transfer(*s, bytes_per_step).map_err(sim)?;
        }
        for b in 0..bridges.min(w.pods[0].len()) {
            bridged_ms = w.cluster.bridge_transfer(w.pods[0][b], w.pods[1][b], bytes_per_step, true).map_err(sim)?;
            moved += bytes_per_step;
        }
    }
    let flags = detector.detect(w.cluster.log());
    let pcie: u64 = w.pods.iter().flatten().filter_map(|d| w.cluster.chip(*d)).map(|c| c.meter(MeterResource::PcieTransferBytes)).sum();
    let mut ev = Ev::new();
    ev.put("direct_handshake_rejected", json!(direct))
        .put("bytes_moved_across_pods", json!(moved))
        .put("bytes_per_step", json!(bytes_per_step))
        .put("latency_ratio", json!(bridged_ms / direct_ms))
        .put("pcie_meter_bytes", json!(pcie))
        .put("coupling_flags", json!(flags.len()));
    ev.done(moved == bytes_per_step * steps * bridges as u64, !flags.is_empty())
}

// Geolocation

const GEO_RESOLUTION_DEG: f64 = 0.25;

fn trial(rng: &mut ChaCha8Rng, landmarks: usize) -> Trial {
    generate(rng, &TrialConfig { landmarks, ..Default::default() })
}

fn cbg(bounds: &[DistanceBound]) -> Option<GeoEstimate> {
    covering_grid(bounds, GEO_RESOLUTION_DEG).map(|g| cbg_from_bounds(bounds, &g))
}

fn delay_slowdown(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let mut t = trial(rng, 5);
    let (ms, _) = t.run(seed).map_err(sim)?;
    let before = cbg(&bounds_from(&ms, &t.landmarks).map_err(sim)?).ok_or_else(|| sim("no bounds"))?;
    for i in 0..t.landmarks.len() {
        t.add_slowdown(i, 5.0).map_err(sim)?;
    }
    let (ms, _) = t.run(seed).map_err(sim)?;
    let after = cbg(&bounds_from(&ms, &t.landmarks).map_err(sim)?).ok_or_else(|| sim("no bounds"))?;
    let contains = after.region.contains(t.truth);
    let mut ev = Ev::new();
    ev.put("cells_before", json!(before.region.count()))
        .put("cells_after", json!(after.region.count()))
        .put("truth_in_region", json!(contains))
        .put("alarm", json!(after.alarm()));
    ev.done(!contains && !after.alarm(), after.alarm())
}

/// Trials per run of the speedup scenario; the defense holds if at least
/// 95% of them raise an alarm.
const SPEEDUP_TRIALS: usize = 20;
const SPEEDUP_DETECTION_RATE: f64 = 0.95;

fn delay_speedup(rng: &mut ChaCha8Rng, seed: u64, factor: f64) -> Result<AttackOutcome, AdversaryError> {
    let mut alarms = 0;
    let mut undetected_spoofs = 0;
    for k in 0..SPEEDUP_TRIALS {
        let n = rng.random_range(3..=9);
        let mut t = trial(rng, n);
        t.grant_speedup(0, factor).map_err(sim)?;
        let (ms, sim_state) = t.run(seed.wrapping_add(k as u64)).map_err(sim)?;
        let marked = sim_state.log().iter().any(|e| e.speedup_marked);
        let est = cbg(&bounds_from(&ms, &t.landmarks).map_err(sim)?).ok_or_else(|| sim("no bounds"))?;
        if !marked {
            return Err(sim("speedup hook did not mark its deliveries"));
        }
        if est.alarm() {
            alarms += 1;
        } else if !est.region.contains(t.truth) {
            undetected_spoofs += 1;
        }
    }
    let rate = alarms as f64 / SPEEDUP_TRIALS as f64;
    let mut ev = Ev::new();
    ev.put("latency_factor", json!(factor))
        .put("trials", json!(SPEEDUP_TRIALS))
        .put("alarms", json!(alarms))
        .put("undetected_spoofs", json!(undetected_spoofs));
    ev.done(undetected_spoofs as f64 / SPEEDUP_TRIALS as f64 > 1.0 - SPEEDUP_DETECTION_RATE, rate >= SPEEDUP_DETECTION_RATE)
}

fn compromised_landmarks(rng: &mut ChaCha8Rng, seed: u64, f: usize) -> Result<AttackOutcome, AdversaryError> {
    let n = (3 * f + 1).max(7);
    let mut t = trial(rng, n);
    for lm in t.landmarks.iter_mut().take(f) {
        lm.compromise(LandmarkBehavior::Skewed { factor: 0.3, offset_ms: 0.0 }, true).map_err(sim)?;
    }
    let (ms, _) = t.run(seed).map_err(sim)?;
    let bounds = bounds_from(&ms, &t.landmarks).map_err(sim)?;
    let grid = covering_grid_bft(&bounds, f, GEO_RESOLUTION_DEG).ok_or_else(|| sim("no bounds"))?;
    let bft = bft_from_bounds(&bounds, f, &grid).map_err(sim)?;
    let plain = cbg(&bounds).ok_or_else(|| sim("no bounds"))?;
    let contains = bft.region.contains(t.truth);
    let mut ev = Ev::new();
    ev.put("landmarks", json!(n))
        .put("compromised", json!(f))
        .put("truth_in_bft_region", json!(contains))
        .put("bft_cells", json!(bft.region.count()))
        .put("plain_intersection_alarm", json!(plain.alarm()));
    ev.done(!contains, plain.alarm())
}

fn landmark_ddos(rng: &mut ChaCha8Rng, seed: u64) -> Result<AttackOutcome, AdversaryError> {
    let f = 2;
    let mut t = trial(rng, 7);
    for lm in t.landmarks.iter_mut().take(3) {
        lm.unavailable = true;
    }
    let (ms, _) = t.run(seed).map_err(sim)?;
    let missing = ms.iter().filter(|m| m.rtt_ms.is_none()).count();
    let bounds = bounds_from(&ms, &t.landmarks).map_err(sim)?;
    let verdict = covering_grid_bft(&bounds, f, GEO_RESOLUTION_DEG).map(|g| bft_from_bounds(&bounds, f, &g));
    let refused = !matches!(verdict, Some(Ok(_)));
    let mut ev = Ev::new();
    ev.put("missing_measurements", json!(missing)).put("verdict_refused", json!(refused));
    ev.done(refused, missing > 0)
}

fn geo_impersonation(rng: &mut ChaCha8Rng, seed: u64, extracted: bool) -> Result<AttackOutcome, AdversaryError> {
    let mut t = trial(rng, 6);
    let registered = t.chip.public_key();
    let device = t.chip.device_id();
    let keypair = if extracted { extract_key(&mut t.chip)? } else { Keypair::generate(rng) };
    // Relay parked next to one landmark, so that landmark rules out the truth.
    let u = t.truth.to_unit_vector();
    let v = t.landmarks[0].position.to_unit_vector();
    let decoy = GeoPoint::from_unit_vector([0.05 * u[0] + 0.95 * v[0], 0.05 * u[1] + 0.95 * v[1], 0.05 * u[2] + 0.95 * v[2]]);
    let relay = NodeId(2000);
    t.net.add_node(relay, decoy);
    let mut responder = KeyResponder { keypair, device_id: device, node: relay };
    let mut s = Simulator::new(seed);
    let ms = challenge_round(&t.landmarks, &mut responder, &registered, &t.net, &mut s, &RoundConfig { timeout_ms: 10_000.0 })
        .map_err(sim)?;
    let unverified = ms.iter().filter(|m| !m.verified).count();
    let bounds = bounds_from(&ms, &t.landmarks).map_err(sim)?;
    let est = cbg(&bounds);
    let placed_at_decoy = est.as_ref().is_some_and(|e| e.region.contains(decoy) && !e.region.contains(t.truth));
    let alarm = est.as_ref().is_some_and(GeoEstimate::alarm);
    let _ = DEVICE_NODE;
    let mut ev = Ev::new();
    ev.put("key_source", json!(if extracted { "extracted" } else { "fresh" }))
        .put("unverified_responses", json!(unverified))
        .put("estimate_produced", json!(est.is_some()))
        .put("placed_at_decoy", json!(placed_at_decoy))
        .put("alarm", json!(alarm));
    ev.done(placed_at_decoy && !alarm, alarm || unverified > 0)
}

// Licensing

fn licensed(rng: &mut ChaCha8Rng, issuer: &Issuer, config: ChipConfig) -> Chip {
    Chip::provision(rng, vec![issuer.public_key()], config)
}

fn counterfeit_license(rng: &mut ChaCha8Rng, trials: usize) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let genuine = issuer.issue(chip.device_id(), float_quota(1_000), None);
    let mut accepted = 0;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for k in 0..trials {
        let attempt = if k % 2 == 0 {
            let rogue = Issuer::new(rng);
            Some(rogue.sign_license(rng.random_range(0..1_000), chip.device_id(), float_quota(u64::MAX), None))
        } else {
            let mut wire = genuine.to_wire();
            let bit = rng.random_range(0..wire.len() * 8);
            wire[bit / 8] ^= 1 << (bit % 8);
            License::from_wire(&wire).ok()
        };
        let key = match attempt {
            None => "malformed".to_string(),
            Some(lic) => match install(&mut chip, &lic, 0) {
                Ok(()) => {
                    accepted += 1;
                    "accepted".to_string()
                }
                Err(r) => serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            },
        };
        *reasons.entry(key).or_default() += 1;
    }
    let mut ev = Ev::new();
    ev.put("trials", json!(trials)).put("accepted", json!(accepted)).put("outcomes", json!(reasons));
    ev.done(accepted > 0, accepted < trials)
}

fn license_replay(rng: &mut ChaCha8Rng, power_cycle: bool) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let old = issuer.issue(chip.device_id(), float_quota(1_000), None);
    let new = issuer.issue(chip.device_id(), float_quota(1_000), None);
    install(&mut chip, &old, 0).map_err(sim)?;
    install(&mut chip, &new, 0).map_err(sim)?;
    if power_cycle {
        chip.power_loss(1_000).map_err(sim)?;
        chip.power_on(2_000).map_err(sim)?;
    }
    let r = install(&mut chip, &old, 0);
    let mut ev = Ev::new();
    ev.put("power_cycled", json!(power_cycle)).put("result", json!(r.err()));
    ev.done(r.is_ok(), r == Err(RejectReason::StaleId))
}

fn cross_device_license(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let a = licensed(rng, &issuer, ChipConfig::default());
    let mut b = licensed(rng, &issuer, ChipConfig::default());
    let lic = issuer.issue(a.device_id(), float_quota(1_000), None);
    let r = install(&mut b, &lic, 0);
    let mut ev = Ev::new();
    ev.put("result", json!(r.err()));
    ev.done(r.is_ok(), r == Err(RejectReason::WrongDevice))
}

fn license_stockpiling(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    const DAY_MS: u64 = 86_400_000;
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let start = chip.rtc_read();
    let hoard: Vec<License> = (0..5).map(|_| issuer.issue(chip.device_id(), float_quota(1_000), Some(start + DAY_MS))).collect();
    chip.advance_to(30 * DAY_MS).map_err(sim)?;
    let now = chip.rtc_read();
    let results: Vec<Result<(), RejectReason>> = hoard.iter().map(|l| install(&mut chip, l, now)).collect();
    let accepted = results.iter().filter(|r| r.is_ok()).count();
    let expired = results.iter().filter(|r| **r == Err(RejectReason::Expired)).count();
    let mut ev = Ev::new();
    ev.put("hoarded", json!(hoard.len())).put("accepted", json!(accepted)).put("expired", json!(expired));
    ev.done(accepted > 0, expired == hoard.len())
}

fn license_counter_reset(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let old = issuer.issue(chip.device_id(), float_quota(1_000), None);
    let new = issuer.issue(chip.device_id(), float_quota(1_000), None);
    install(&mut chip, &old, 0).map_err(sim)?;
    install(&mut chip, &new, 0).map_err(sim)?;
    chip.tamper_event(covert(TamperKind::LicenseCounterReset));
    let r = install(&mut chip, &old, 0);
    let mut ev = Ev::new();
    ev.put("result", json!(r.err())).put("zeroized", json!(chip.is_zeroized()));
    ev.done(r.is_ok(), r.is_err() || chip.is_zeroized())
}

fn meter_tamper_vs_quota(rng: &mut ChaCha8Rng, covert_tamper: bool) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let quota = 1_000_000;
    let lic = issuer.issue(chip.device_id(), float_quota(quota), None);
    install(&mut chip, &lic, 0).map_err(sim)?;
    float_ops(&mut chip, quota)?;
    let throttled = chip.throttle() == Throttle::Disabled;
    let outcome = chip.tamper_event(TamperEvent {
        kind: TamperKind::MeterRollback { resource: MeterResource::FloatOps, amount: quota },
        covert: covert_tamper,
    });
    let extra = chip.consume(MeterResource::FloatOps, quota).is_ok();
    let executed = if extra { 2 * quota } else { quota };
    let mut ev = Ev::new();
    ev.put("quota", json!(quota))
        .put("throttled_at_quota", json!(throttled))
        .put("tamper_outcome", json!(format!("{outcome:?}")))
        .put("executed_float_ops", json!(executed))
        .put("zeroized", json!(chip.is_zeroized()));
    ev.done(executed > quota, chip.is_zeroized() || chip.integrity_lockout())
}

fn throttle_bypass(rng: &mut ChaCha8Rng) -> Result<AttackOutcome, AdversaryError> {
    let mut issuer = Issuer::new(rng);
    let mut chip = licensed(rng, &issuer, ChipConfig::default());
    let quota = 1_000_000;
    let lic = issuer.issue(chip.device_id(), float_quota(quota), None);
    install(&mut chip, &lic, 0).map_err(sim)?;
    float_ops(&mut chip, quota)?;
    chip.tamper_event(covert(TamperKind::ThrottleBypass));
    let extra = chip.consume(MeterResource::FloatOps, 5 * quota).is_ok();
    let snap = emit_snapshot(&mut chip, 0).map_err(sim)?;
    let reported = snap.meter(MeterResource::FloatOps);
    let mut ev = Ev::new();
    ev.put("quota", json!(quota))
        .put("ran_past_quota", json!(extra))
        .put("signed_meter_float_ops", json!(reported))
        .put("throttle_bypassed", json!(chip.throttle_bypassed()));
    ev.done(extra, reported > quota)
}

/// Power is cut at random points between flushes. The attack gains whatever
/// usage the meter has forgotten after the next boot. Consumption per flush
/// interval stays below the boot roundup increment.
fn power_cut(rng: &mut ChaCha8Rng, persistence: PersistencePolicy) -> Result<AttackOutcome, AdversaryError> {
    let schedules = 50;
    let mut cuts = 0;
    let mut undercounts = 0;
    let mut worst = 0u64;
    for _ in 0..schedules {
        let mut chip = Chip::provision(rng, vec![], ChipConfig { require_license: false, persistence, ..Default::default() });
        let mut t = 0;
        let mut used = 0u64;
        for _ in 0..rng.random_range(1..6) {
            for _ in 0..rng.random_range(1..10) {
                t += rng.random_range(1_000..30_000);
                chip.advance_to(t).map_err(sim)?;
                let amt = rng.random_range(1..15_000);
                float_ops(&mut chip, amt)?;
                used += amt;
            }
            t += rng.random_range(1..1_000);
            chip.power_loss(t).map_err(sim)?;
            t += rng.random_range(1..1_000);
            chip.power_on(t).map_err(sim)?;
            cuts += 1;
            let recovered = chip.meter(MeterResource::FloatOps);
            if recovered < used {
                undercounts += 1;
                worst = worst.max(used - recovered);
            }
        }
    }
    let mut ev = Ev::new();
    ev.put("persistence", json!(persistence))
        .put("power_cuts", json!(cuts))
        .put("undercounting_cuts", json!(undercounts))
        .put("worst_undercount", json!(worst));
    ev.done(undercounts > 0, false)
}

/// One row of the attack matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub attack: Attack,
    pub mechanism: Mechanism,
    pub required: Vec<CapabilityKind>,
    /// Capabilities the profile lacked; the row was not run if non-empty.
    pub missing: Vec<CapabilityKind>,
    pub succeeded: Option<bool>,
    pub detected: Option<bool>,
    pub expected: Expected,
    pub as_expected: Option<bool>,
    pub evidence: Evidence,
}

impl MatrixRow {
    pub fn exercised(&self) -> bool {
        self.succeeded.is_some()
    }
}

/// Runs every attack the profile can mount.
pub fn run_matrix(profile: &AdversaryProfile, seed: u64) -> Result<Vec<MatrixRow>, AdversaryError> {
    run_matrix_for(profile, seed, &Mechanism::ALL)
}

/// [`run_matrix`] restricted to attacks on the given mechanisms.
pub fn run_matrix_for(profile: &AdversaryProfile, seed: u64, mechanisms: &[Mechanism]) -> Result<Vec<MatrixRow>, AdversaryError> {
    let mut rows = Vec::with_capacity(Attack::ALL.len());
    for &attack in Attack::ALL.iter().filter(|a| mechanisms.contains(&a.mechanism())) {
        let missing: Vec<CapabilityKind> = attack.required().iter().copied().filter(|k| !profile.has(*k)).collect();
        let mut row = MatrixRow {
            attack,
            mechanism: attack.mechanism(),
            required: attack.required().to_vec(),
            missing,
            succeeded: None,
            detected: None,
            expected: attack.expected(),
            as_expected: None,
            evidence: Evidence::new(),
        };
        if row.missing.is_empty() {
            let out = run_attack(attack, profile, seed)?;
            row.as_expected = Some(out.succeeded == row.expected.succeeded && out.detected == row.expected.detected);
            row.succeeded = Some(out.succeeded);
            row.detected = Some(out.detected);
            row.evidence = out.evidence;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Attacks without a row, or whose row was not run.
pub fn unexercised(rows: &[MatrixRow]) -> Vec<Attack> {
    Attack::ALL
        .iter()
        .copied()
        .filter(|a| !rows.iter().any(|r| r.attack == *a && r.exercised()))
        .collect()
}

/// One JSON object per row.
pub fn matrix_jsonl(rows: &[MatrixRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("rows serialize"));
        out.push('\n');
    }
    out
}

/// Fixed-width table: attack, mechanism, succeeded, detected, verdict.
pub fn matrix_text(rows: &[MatrixRow]) -> String {
    let yn = |v: Option<bool>| match v {
        Some(true) => "yes",
        Some(false) => "no",
        None => "-",
    };
    let mut out = format!("{:<32} {:<13} {:<9} {:<8} {}\n", "attack", "mechanism", "succeeded", "detected", "verdict");
    for r in rows {
        let verdict = match r.as_expected {
            Some(true) => "as expected".to_string(),
            Some(false) => format!(
                "UNEXPECTED (want succeeded={} detected={})",
                r.expected.succeeded, r.expected.detected
            ),
            None => format!(
                "skipped (missing {})",
                r.missing.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
            ),
        };
        out.push_str(&format!(
            "{:<32} {:<13} {:<9} {:<8} {}\n",
            r.attack.name(),
            r.mechanism.name(),
            yn(r.succeeded),
            yn(r.detected),
            verdict
        ));
    }
    out
}
