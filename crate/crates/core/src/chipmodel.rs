//! Virtual AI accelerator.
//!
//! A [`Chip`] bundles the security-relevant state of one device: its
//! identity and signing oracle, secure meters backed by persistent counters,
//! a real-time clock, one-time-programmable fuse counters, the installed
//! license and throttle state, and tamper/zeroization behaviour.
//!
//! Meters count lifetime usage and only ever increase. License quotas are
//! checked against the usage accumulated since the license was installed,
//! which is the lifetime value minus a baseline captured at install time.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, Keypair, PublicKey, Signature, SIGNATURE_SCHEME};
use crate::licensing::{self, License};

/// Simulated wall time in milliseconds.
pub type EpochMs = u64;

/// 128-bit device identifier burned in at manufacture.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DeviceId(pub u128);

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({:032x})", self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl From<DeviceId> for String {
    fn from(d: DeviceId) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DeviceId {
    type Error = std::num::ParseIntError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        u128::from_str_radix(&s, 16).map(DeviceId)
    }
}

/// The seven metered quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeterResource {
    FloatOps,
    IntOps,
    MemoryTransferBytes,
    InterconnectTransferBytes,
    PcieTransferBytes,
    Joules,
    ClockCycles,
}

impl MeterResource {
    pub const ALL: [MeterResource; 7] = [
        MeterResource::FloatOps,
        MeterResource::IntOps,
        MeterResource::MemoryTransferBytes,
        MeterResource::InterconnectTransferBytes,
        MeterResource::PcieTransferBytes,
        MeterResource::Joules,
        MeterResource::ClockCycles,
    ];

    /// Position in [`MeterResource::ALL`], also the wire encoding.
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(o: u8) -> Option<Self> {
        Self::ALL.get(o as usize).copied()
    }
}

/// How the volatile meter values reach non-volatile storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PersistencePolicy {
    /// A hold-up capacitor copies SRAM to flash when power drops.
    CapacitorFlush,
    /// Flash is written every `interval_ms`; with `capacitor_backup` the
    /// capacitor path also runs on power loss.
    PeriodicFlush { interval_ms: u64, capacitor_backup: bool },
    /// Flash is written every `flush_interval_ms` and every boot adds
    /// `increment` to the recovered value.
    BootRoundup { increment: u64, flush_interval_ms: u64 },
}

impl Default for PersistencePolicy {
    fn default() -> Self {
        PersistencePolicy::PeriodicFlush { interval_ms: 3_600_000, capacitor_backup: true }
    }
}

impl PersistencePolicy {
    fn flush_interval(&self) -> Option<u64> {
        match *self {
            PersistencePolicy::CapacitorFlush => None,
            PersistencePolicy::PeriodicFlush { interval_ms, .. } => Some(interval_ms),
            PersistencePolicy::BootRoundup { flush_interval_ms, .. } => Some(flush_interval_ms),
        }
    }

    fn capacitor(&self) -> bool {
        matches!(
            self,
            PersistencePolicy::CapacitorFlush
                | PersistencePolicy::PeriodicFlush { capacitor_backup: true, .. }
        )
    }
}

/// Secure meters: a volatile working copy plus the flash-backed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterBank {
    volatile: [u64; 7],
    persisted: [u64; 7],
    policy: PersistencePolicy,
    last_flush_ms: EpochMs,
    flushes: u64,
}

impl MeterBank {
    pub fn new(policy: PersistencePolicy) -> Self {
        MeterBank { volatile: [0; 7], persisted: [0; 7], policy, last_flush_ms: 0, flushes: 0 }
    }

    pub fn policy(&self) -> PersistencePolicy {
        self.policy
    }

    pub fn volatile(&self, r: MeterResource) -> u64 {
        self.volatile[r as usize]
    }

    pub fn persisted(&self, r: MeterResource) -> u64 {
        self.persisted[r as usize]
    }

    pub fn volatile_all(&self) -> [u64; 7] {
        self.volatile
    }

    pub fn persisted_all(&self) -> [u64; 7] {
        self.persisted
    }

    pub fn flush_count(&self) -> u64 {
        self.flushes
    }

    fn add(&mut self, r: MeterResource, amount: u64) {
        let v = &mut self.volatile[r as usize];
        *v = v.saturating_add(amount);
    }

    fn flush(&mut self, now: EpochMs) {
        for i in 0..7 {
            self.persisted[i] = self.persisted[i].max(self.volatile[i]);
        }
        self.last_flush_ms = now;
        self.flushes += 1;
    }

    /// Runs any periodic flush that fell due by `now`. Values between calls
    /// are constant, so a single flush captures every due boundary.
    fn tick(&mut self, now: EpochMs) {
        if let Some(interval) = self.policy.flush_interval() {
            if interval > 0 && now >= self.last_flush_ms.saturating_add(interval) {
                let boundaries = (now - self.last_flush_ms) / interval;
                self.flush(self.last_flush_ms + boundaries * interval);
            }
        }
    }

    fn on_power_loss(&mut self, now: EpochMs) {
        self.tick(now);
        if self.policy.capacitor() {
            self.flush(now);
        }
    }

    fn on_power_on(&mut self, now: EpochMs) {
        self.volatile = self.persisted;
        if let PersistencePolicy::BootRoundup { increment, .. } = self.policy {
            for v in &mut self.volatile {
                *v = v.saturating_add(increment);
            }
            self.flush(now);
        }
        self.last_flush_ms = now;
    }
}

/// Real-time clock driven by simulated time, with a fixed drift rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtcClock {
    pub base_epoch_ms: EpochMs,
    pub drift_ppm: f64,
    last_read: EpochMs,
}

impl RtcClock {
    pub fn new(base_epoch_ms: EpochMs, drift_ppm: f64) -> Self {
        RtcClock { base_epoch_ms, drift_ppm, last_read: base_epoch_ms }
    }

    /// Clock reading at simulated time `sim_ms`. Never decreases.
    pub fn read(&mut self, sim_ms: EpochMs) -> EpochMs {
        let elapsed = sim_ms as f64 * (1.0 + self.drift_ppm * 1e-6);
        let value = self.base_epoch_ms.saturating_add(elapsed.max(0.0).floor() as u64);
        self.last_read = self.last_read.max(value);
        self.last_read
    }
}

/// Fuse-based counter: each increment burns one fuse, permanently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnaryCounter {
    burned: u32,
    capacity: u32,
}

impl UnaryCounter {
    pub fn new(capacity: u32) -> Self {
        UnaryCounter { burned: 0, capacity }
    }

    pub fn count(&self) -> u32 {
        self.burned
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    fn increment(&mut self) -> Result<u32, ChipError> {
        if self.burned >= self.capacity {
            return Err(ChipError::FusesExhausted { capacity: self.capacity });
        }
        self.burned += 1;
        Ok(self.burned)
    }
}

/// Current execution allowance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "fraction", rename_all = "snake_case")]
pub enum Throttle {
    Full,
    Reduced(f64),
    Disabled,
}

/// What the chip does when it must throttle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "fraction", rename_all = "snake_case")]
pub enum ThrottlePolicy {
    #[default]
    Disable,
    Reduce(f64),
}

impl ThrottlePolicy {
    /// The `reduced` rate used when none is configured.
    pub const DEFAULT_REDUCED_FRACTION: f64 = 0.1;

    pub fn throttle(self) -> Throttle {
        match self {
            ThrottlePolicy::Disable => Throttle::Disabled,
            ThrottlePolicy::Reduce(f) => Throttle::Reduced(f),
        }
    }
}

/// Response to a detected tamper event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperResponse {
    #[default]
    Zeroize,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChipConfig {
    pub persistence: PersistencePolicy,
    pub rtc_base_epoch_ms: EpochMs,
    pub rtc_drift_ppm: f64,
    /// When false the chip runs without a license (attestation-only fleets).
    pub require_license: bool,
    pub on_violation: ThrottlePolicy,
    pub tamper_response: TamperResponse,
    pub fuse_capacity: u32,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig {
            persistence: PersistencePolicy::default(),
            rtc_base_epoch_ms: 1_700_000_000_000,
            rtc_drift_ppm: 0.0,
            require_license: true,
            on_violation: ThrottlePolicy::Disable,
            tamper_response: TamperResponse::Zeroize,
            fuse_capacity: 64,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChipError {
    #[error("device is zeroized")]
    Zeroized,
    #[error("device is powered off")]
    PoweredOff,
    #[error("throttled: execution disabled")]
    Throttled,
    #[error("consuming {requested} {resource:?} would exceed the license quota ({used}/{quota})")]
    QuotaExceeded { resource: MeterResource, requested: u64, used: u64, quota: u64 },
    #[error("fuse counter exhausted at capacity {capacity}")]
    FusesExhausted { capacity: u32 },
    #[error("clock moved backwards: {now} < {current}")]
    TimeReversal { now: EpochMs, current: EpochMs },
}

/// Unmodifiable identity material.
#[derive(Clone)]
pub struct DeviceIdentity {
    device_id: DeviceId,
    keypair: Option<Keypair>,
    public_key: PublicKey,
    issuer_keys: Vec<PublicKey>,
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("device_id", &self.device_id)
            .field("public_key", &self.public_key)
            .field("issuer_keys", &self.issuer_keys)
            .field("has_private_key", &self.keypair.is_some())
            .finish()
    }
}

impl DeviceIdentity {
    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.public_key
    }

    pub fn issuer_keys(&self) -> &[PublicKey] {
        &self.issuer_keys
    }
}

/// Registry record exported at provisioning time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisioningRecord {
    pub device_id: DeviceId,
    pub scheme: String,
    pub public_key: PublicKey,
    pub issuer_keys: Vec<PublicKey>,
    pub firmware_hash: String,
}

/// Kinds of physical or logical tampering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TamperKind {
    EnclosureBreach,
    MeterRollback { resource: MeterResource, amount: u64 },
    LicenseCounterReset,
    ThrottleBypass,
    FirmwareModification { image: Vec<u8> },
    KeyExtraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperEvent {
    pub kind: TamperKind,
    /// Undetected by the chip's sensors.
    pub covert: bool,
}

#[derive(Debug)]
pub enum TamperOutcome {
    Zeroized,
    Ignored,
    Applied,
    /// A covert key extraction yields the device's keypair.
    KeyExtracted(Keypair),
}

/// Values held in non-volatile storage at the moment power was lost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedSnapshot {
    pub meters: [u64; 7],
    pub last_license_id: Option<u64>,
    pub fuses: BTreeMap<String, u32>,
}

/// Result of a successful `consume`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsumeOutcome {
    /// Fraction of nominal rate the work ran at.
    pub rate_fraction: f64,
}

/// One virtual accelerator.
#[derive(Debug, Clone)]
pub struct Chip {
    identity: DeviceIdentity,
    meters: MeterBank,
    rtc: RtcClock,
    last_license_id: Option<u64>,
    pub(crate) active_license: Option<License>,
    pub(crate) license_baseline: [u64; 7],
    pub(crate) throttle: Throttle,
    zeroized: bool,
    powered: bool,
    firmware_hash: [u8; 32],
    integrity_lockout: bool,
    throttle_bypassed: bool,
    fuses: BTreeMap<String, UnaryCounter>,
    now_ms: EpochMs,
    config: ChipConfig,
}

/// Firmware image every honest chip ships with.
pub const REFERENCE_FIRMWARE: &[u8] = b"hemsim reference accelerator firmware v1";

impl Chip {
    /// Provisions a chip; the keypair is generated from `rng` as if on-device.
    pub fn provision<R: Rng + ?Sized>(
        rng: &mut R,
        issuer_keys: Vec<PublicKey>,
        config: ChipConfig,
    ) -> Self {
        let device_id = DeviceId(rng.random());
        Self::provision_with_id(device_id, rng, issuer_keys, config)
    }

    pub fn provision_with_id<R: Rng + ?Sized>(
        device_id: DeviceId,
        rng: &mut R,
        issuer_keys: Vec<PublicKey>,
        config: ChipConfig,
    ) -> Self {
        let mut key_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let keypair = Keypair::generate(&mut key_rng);
        let public_key = keypair.public();
        let mut chip = Chip {
            identity: DeviceIdentity { device_id, keypair: Some(keypair), public_key, issuer_keys },
            meters: MeterBank::new(config.persistence),
            rtc: RtcClock::new(config.rtc_base_epoch_ms, config.rtc_drift_ppm),
            last_license_id: None,
            active_license: None,
            license_baseline: [0; 7],
            throttle: Throttle::Full,
            zeroized: false,
            powered: true,
            firmware_hash: digest(REFERENCE_FIRMWARE),
            integrity_lockout: false,
            throttle_bypassed: false,
            fuses: BTreeMap::new(),
            now_ms: 0,
            config,
        };
        licensing::enforce(&mut chip);
        chip
    }

    pub fn device_id(&self) -> DeviceId {
        self.identity.device_id
    }

    pub fn public_key(&self) -> PublicKey {
        self.identity.public_key
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn config(&self) -> &ChipConfig {
        &self.config
    }

    pub fn meters(&self) -> &MeterBank {
        &self.meters
    }

    /// Read-only meter value; the host may observe but not change it.
    pub fn meter(&self, r: MeterResource) -> u64 {
        self.meters.volatile(r)
    }

    pub fn throttle(&self) -> Throttle {
        self.throttle
    }

    pub fn is_zeroized(&self) -> bool {
        self.zeroized
    }

    pub fn is_powered(&self) -> bool {
        self.powered
    }

    pub fn last_license_id(&self) -> Option<u64> {
        self.last_license_id
    }

    pub fn active_license(&self) -> Option<&License> {
        self.active_license.as_ref()
    }

    pub fn firmware_hash(&self) -> [u8; 32] {
        self.firmware_hash
    }

    pub fn integrity_lockout(&self) -> bool {
        self.integrity_lockout
    }

    pub fn throttle_bypassed(&self) -> bool {
        self.throttle_bypassed
    }

    pub fn now_ms(&self) -> EpochMs {
        self.now_ms
    }

    pub fn provisioning_record(&self) -> ProvisioningRecord {
        ProvisioningRecord {
            device_id: self.identity.device_id,
            scheme: SIGNATURE_SCHEME.to_string(),
            public_key: self.identity.public_key,
            issuer_keys: self.identity.issuer_keys.clone(),
            firmware_hash: hex::encode(digest(REFERENCE_FIRMWARE)),
        }
    }

    /// Moves the chip's notion of simulated time forward, running any
    /// periodic flushes that fell due.
    pub fn advance_to(&mut self, now: EpochMs) -> Result<(), ChipError> {
        if now < self.now_ms {
            return Err(ChipError::TimeReversal { now, current: self.now_ms });
        }
        self.now_ms = now;
        if self.powered {
            self.meters.tick(now);
        }
        Ok(())
    }

    /// Signs `message` with the device key.
    pub fn sign(&self, message: &[u8]) -> Result<Signature, ChipError> {
        if self.zeroized {
            return Err(ChipError::Zeroized);
        }
        if !self.powered {
            return Err(ChipError::PoweredOff);
        }
        let kp = self.identity.keypair.as_ref().ok_or(ChipError::Zeroized)?;
        Ok(kp.sign(message))
    }

    /// Usage of `r` since the active license was installed.
    pub fn usage_since_install(&self, r: MeterResource) -> u64 {
        self.meters.volatile(r).saturating_sub(self.license_baseline[r as usize])
    }

    /// Records `amount` units of work on `r`.
    pub fn consume(&mut self, r: MeterResource, amount: u64) -> Result<ConsumeOutcome, ChipError> {
        if self.zeroized {
            return Err(ChipError::Zeroized);
        }
        if !self.powered {
            return Err(ChipError::PoweredOff);
        }
        if amount == 0 {
            return Ok(ConsumeOutcome { rate_fraction: self.rate_fraction() });
        }
        if !self.throttle_bypassed {
            match self.throttle {
                Throttle::Disabled => return Err(ChipError::Throttled),
                Throttle::Full => {
                    if let Some(quota) = self.active_license.as_ref().and_then(|l| l.quota(r)) {
                        let used = self.usage_since_install(r);
                        if used.saturating_add(amount) > quota {
                            return Err(ChipError::QuotaExceeded { resource: r, requested: amount, used, quota });
                        }
                    }
                }
                Throttle::Reduced(_) => {}
            }
        }
        let rate_fraction = self.rate_fraction();
        self.meters.add(r, amount);
        licensing::enforce(self);
        Ok(ConsumeOutcome { rate_fraction })
    }

    fn rate_fraction(&self) -> f64 {
        if self.throttle_bypassed {
            return 1.0;
        }
        match self.throttle {
            Throttle::Full => 1.0,
            Throttle::Reduced(f) => f,
            Throttle::Disabled => 0.0,
        }
    }

    /// Cuts power at `at`. Returns what survived in non-volatile storage.
    pub fn power_loss(&mut self, at: EpochMs) -> Result<PersistedSnapshot, ChipError> {
        self.advance_to(at)?;
        if self.powered {
            self.meters.on_power_loss(at);
            self.powered = false;
        }
        Ok(self.persisted_snapshot())
    }

    pub fn persisted_snapshot(&self) -> PersistedSnapshot {
        PersistedSnapshot {
            meters: self.meters.persisted_all(),
            last_license_id: self.last_license_id,
            fuses: self.fuses.iter().map(|(k, v)| (k.clone(), v.count())).collect(),
        }
    }

    /// Restores power at `at`, reloading volatile state from storage.
    pub fn power_on(&mut self, at: EpochMs) -> Result<(), ChipError> {
        if at < self.now_ms {
            return Err(ChipError::TimeReversal { now: at, current: self.now_ms });
        }
        self.now_ms = at;
        if !self.powered {
            self.meters.on_power_on(at);
            self.powered = true;
        }
        licensing::enforce(self);
        Ok(())
    }

    pub fn rtc_read(&mut self) -> EpochMs {
        self.rtc.read(self.now_ms)
    }

    pub fn unary_count(&self, name: &str) -> u32 {
        self.fuses.get(name).map_or(0, UnaryCounter::count)
    }

    pub fn unary_count_increment(&mut self, name: &str) -> Result<u32, ChipError> {
        let cap = self.config.fuse_capacity;
        self.fuses.entry(name.to_string()).or_insert_with(|| UnaryCounter::new(cap)).increment()
    }

    /// Applies a tamper event. Detected events trigger the configured
    /// response; covert ones modify state silently.
    pub fn tamper_event(&mut self, event: TamperEvent) -> TamperOutcome {
        if !event.covert {
            return match self.config.tamper_response {
                TamperResponse::Zeroize => {
                    self.zeroize();
                    TamperOutcome::Zeroized
                }
                TamperResponse::Ignore => TamperOutcome::Ignored,
            };
        }
        match event.kind {
            TamperKind::EnclosureBreach => TamperOutcome::Applied,
            TamperKind::MeterRollback { resource, amount } => {
                let i = resource as usize;
                self.meters.volatile[i] = self.meters.volatile[i].saturating_sub(amount);
                self.meters.persisted[i] = self.meters.persisted[i].saturating_sub(amount);
                self.license_baseline[i] = self.license_baseline[i].min(self.meters.volatile[i]);
                licensing::enforce(self);
                TamperOutcome::Applied
            }
            TamperKind::LicenseCounterReset => {
                self.last_license_id = None;
                TamperOutcome::Applied
            }
            TamperKind::ThrottleBypass => {
                self.throttle_bypassed = true;
                TamperOutcome::Applied
            }
            TamperKind::FirmwareModification { image } => {
                self.firmware_hash = digest(&image);
                TamperOutcome::Applied
            }
            TamperKind::KeyExtraction => match &self.identity.keypair {
                Some(kp) => TamperOutcome::KeyExtracted(kp.clone()),
                None => TamperOutcome::Ignored,
            },
        }
    }

    /// Deletes key material; the chip signs and executes nothing afterwards.
    pub fn zeroize(&mut self) {
        self.identity.keypair = None;
        self.zeroized = true;
        self.throttle = Throttle::Disabled;
        self.active_license = None;
    }

    /// Integrity self-test failed: the chip disables itself.
    pub fn self_disable(&mut self) {
        self.integrity_lockout = true;
        self.throttle = Throttle::Disabled;
    }

    pub(crate) fn accept_license(&mut self, license: License) {
        self.last_license_id = Some(license.license_id);
        self.license_baseline = self.meters.volatile_all();
        self.active_license = Some(license);
        let now = self.now_ms;
        self.meters.flush(now);
    }
}
