//! Compute accounting from signed meter snapshots.
//!
//! Each chip periodically signs its meter values. A verifier holding the
//! device registry checks every chain for signature validity, gapless
//! sequence numbers and non-decreasing meters, then totals float operations
//! across the fleet and compares against a reporting threshold.

pub mod classify;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chipmodel::{Chip, ChipError, DeviceId, EpochMs, MeterResource};
use crate::crypto::{tag, Encoder, PublicKey, Signature};

pub use classify::{classify, ClassLabel, Classification, ClassifierConfig, WorkloadLabel, WorkloadTrace};

/// Device id to registered public key.
pub type Registry = BTreeMap<DeviceId, PublicKey>;

/// Default attestation period: ten simulated minutes.
pub const DEFAULT_SNAPSHOT_PERIOD_MS: EpochMs = 600_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub device_id: DeviceId,
    pub sequence_no: u64,
    pub rtc_time: EpochMs,
    pub meters: BTreeMap<MeterResource, u64>,
    pub device_signature: Signature,
}

impl MeterSnapshot {
    pub fn signed_bytes(device_id: DeviceId, sequence_no: u64, rtc_time: EpochMs, meters: &BTreeMap<MeterResource, u64>) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(tag::METER_SNAPSHOT).u128(device_id.0).u64(sequence_no).u64(rtc_time).u32(meters.len() as u32);
        for (r, v) in meters {
            e.u8(r.ordinal()).u64(*v);
        }
        e.finish()
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(
            &Self::signed_bytes(self.device_id, self.sequence_no, self.rtc_time, &self.meters),
            &self.device_signature,
        )
        .is_ok()
    }

    pub fn meter(&self, r: MeterResource) -> u64 {
        self.meters.get(&r).copied().unwrap_or(0)
    }
}

/// Signs the chip's current meter values.
pub fn emit_snapshot(chip: &mut Chip, sequence_no: u64) -> Result<MeterSnapshot, ChipError> {
    let rtc_time = chip.rtc_read();
    let meters: BTreeMap<MeterResource, u64> = MeterResource::ALL.iter().map(|r| (*r, chip.meter(*r))).collect();
    let device_signature = chip.sign(&MeterSnapshot::signed_bytes(chip.device_id(), sequence_no, rtc_time, &meters))?;
    Ok(MeterSnapshot { device_id: chip.device_id(), sequence_no, rtc_time, meters, device_signature })
}

/// A reporting threshold kept in its original units alongside the divisor
/// that maps it onto desk-scale scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaledThreshold {
    pub operations: u128,
    pub scale_divisor: u128,
}

impl Default for ScaledThreshold {
    fn default() -> Self {
        ScaledThreshold { operations: 10u128.pow(26), scale_divisor: 10u128.pow(17) }
    }
}

impl ScaledThreshold {
    pub fn units(&self) -> u128 {
        self.operations / self.scale_divisor.max(1)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub threshold: ScaledThreshold,
    /// Missing sequence numbers tolerated between consecutive snapshots.
    pub gap_tolerance: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    BadSignature { sequence_no: u64 },
    DuplicateSequence { sequence_no: u64 },
    SequenceGap { prev: u64, next: u64 },
    /// A meter decreased from snapshot `prev` to snapshot `next`.
    Rollback { prev: u64, next: u64, resource: MeterResource, before: u64, after: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Verified,
    Violated,
    /// Not in the registry; excluded from totals.
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceVerification {
    pub device_id: DeviceId,
    pub status: DeviceStatus,
    pub snapshots: usize,
    pub violations: Vec<Violation>,
    /// Final minus initial float ops over signature-valid snapshots.
    pub float_ops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestReport {
    pub devices: Vec<DeviceVerification>,
    pub totals: BTreeMap<MeterResource, u128>,
    pub total_float_ops: u128,
    pub threshold_units: u128,
    pub exceeds_threshold: bool,
    /// No unverifiable devices and no violations.
    pub complete: bool,
    pub no_data: bool,
}

impl AttestReport {
    /// Indices of the (prev, next) pairs where any meter went backwards.
    pub fn rollbacks(&self) -> Vec<(DeviceId, u64, u64)> {
        let mut out = Vec::new();
        for d in &self.devices {
            for v in &d.violations {
                if let Violation::Rollback { prev, next, .. } = v {
                    if !out.contains(&(d.device_id, *prev, *next)) {
                        out.push((d.device_id, *prev, *next));
                    }
                }
            }
        }
        out
    }

    /// Line-oriented rendering with fixed field order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_float_ops: {}", self.total_float_ops);
        let _ = writeln!(s, "threshold_units: {}", self.threshold_units);
        let _ = writeln!(s, "exceeds_threshold: {}", self.exceeds_threshold);
        let _ = writeln!(s, "complete: {}", self.complete);
        let _ = writeln!(s, "no_data: {}", self.no_data);
        for (r, v) in &self.totals {
            let _ = writeln!(s, "total.{}: {}", serde_json::to_value(r).expect("name").as_str().unwrap_or("?"), v);
        }
        for d in &self.devices {
            let status = serde_json::to_value(d.status).expect("status");
            let _ = writeln!(
                s,
                "device {} status={} snapshots={} float_ops={} violations={}",
                d.device_id,
                status.as_str().unwrap_or("?"),
                d.snapshots,
                d.float_ops,
                d.violations.len()
            );
            for v in &d.violations {
                let _ = writeln!(s, "  violation {}", serde_json::to_string(v).expect("violation"));
            }
        }
        s
    }
}

/// Verifies every device's snapshot chain and totals consumption.
pub fn verify_chain(snapshots: &[MeterSnapshot], registry: &Registry, config: &VerifyConfig) -> AttestReport {
    let mut by_device: BTreeMap<DeviceId, Vec<&MeterSnapshot>> = BTreeMap::new();
    for s in snapshots {
        by_device.entry(s.device_id).or_default().push(s);
    }
    let mut devices = Vec::new();
    let mut totals: BTreeMap<MeterResource, u128> = MeterResource::ALL.iter().map(|r| (*r, 0)).collect();
    for (device_id, mut chain) in by_device {
        chain.sort_by_key(|s| s.sequence_no);
        let Some(key) = registry.get(&device_id) else {
            devices.push(DeviceVerification {
                device_id,
                status: DeviceStatus::Unverifiable,
                snapshots: chain.len(),
                violations: Vec::new(),
                float_ops: 0,
            });
            continue;
        };
        let mut violations = Vec::new();
        let mut valid: Vec<&MeterSnapshot> = Vec::new();
        for s in chain {
            if s.verify(key) {
                valid.push(s);
            } else {
                violations.push(Violation::BadSignature { sequence_no: s.sequence_no });
            }
        }
        for w in valid.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.sequence_no == b.sequence_no {
                violations.push(Violation::DuplicateSequence { sequence_no: b.sequence_no });
            } else if b.sequence_no - a.sequence_no - 1 > config.gap_tolerance {
                violations.push(Violation::SequenceGap { prev: a.sequence_no, next: b.sequence_no });
            }
            for r in MeterResource::ALL {
                if b.meter(r) < a.meter(r) {
                    violations.push(Violation::Rollback {
                        prev: a.sequence_no,
                        next: b.sequence_no,
                        resource: r,
                        before: a.meter(r),
                        after: b.meter(r),
                    });
                }
            }
        }
        let mut float_ops = 0;
        if let (Some(first), Some(last)) = (valid.first(), valid.last()) {
            for r in MeterResource::ALL {
                let delta = u128::from(last.meter(r).saturating_sub(first.meter(r)));
                *totals.get_mut(&r).expect("all resources") += delta;
                if r == MeterResource::FloatOps {
                    float_ops = delta;
                }
            }
        }
        devices.push(DeviceVerification {
            device_id,
            status: if violations.is_empty() { DeviceStatus::Verified } else { DeviceStatus::Violated },
            snapshots: valid.len(),
            violations,
            float_ops,
        });
    }
    let total_float_ops = totals[&MeterResource::FloatOps];
    let threshold_units = config.threshold.units();
    AttestReport {
        complete: devices.iter().all(|d| d.status == DeviceStatus::Verified),
        no_data: snapshots.is_empty(),
        devices,
        totals,
        total_float_ops,
        threshold_units,
        exceeds_threshold: total_float_ops > threshold_units,
    }
}

/// Output of [`account_trace`].
#[derive(Debug, Clone)]
pub struct Accounting {
    pub snapshots: Vec<MeterSnapshot>,
    pub registry: Registry,
    /// Float ops actually executed, summed over devices.
    pub oracle_float_ops: u128,
}

/// Replays a trace on license-exempt chips, one chip per device series,
/// converting utilization to `floor(util * peak_ops_per_step)` float ops
/// and interconnect/PCIe series to byte meters. Snapshots are taken at the
/// start, every `snapshot_every_steps` steps, and at the end.
pub fn account_trace<R: rand::Rng + ?Sized>(
    trace: &WorkloadTrace,
    peak_ops_per_step: u64,
    snapshot_every_steps: usize,
    rng: &mut R,
) -> Result<Accounting, ChipError> {
    use crate::chipmodel::ChipConfig;
    let mut snapshots = Vec::new();
    let mut registry = Registry::new();
    let mut oracle = 0u128;
    let every = snapshot_every_steps.max(1);
    for series in &trace.devices {
        let mut chip = Chip::provision(&mut *rng, vec![], ChipConfig { require_license: false, ..Default::default() });
        registry.insert(chip.device_id(), chip.public_key());
        let mut seq = 0;
        snapshots.push(emit_snapshot(&mut chip, seq)?);
        let steps = series.utilization.len();
        for step in 0..steps {
            let ops = (series.utilization[step].clamp(0.0, 1.0) * peak_ops_per_step as f64).floor() as u64;
            chip.consume(MeterResource::FloatOps, ops)?;
            chip.consume(MeterResource::InterconnectTransferBytes, series.interconnect_bytes[step])?;
            chip.consume(MeterResource::PcieTransferBytes, series.pcie_bytes[step])?;
            oracle += u128::from(ops);
            chip.advance_to(chip.now_ms() + trace.step_period_ms)?;
            if (step + 1) % every == 0 || step + 1 == steps {
                seq += 1;
                snapshots.push(emit_snapshot(&mut chip, seq)?);
            }
        }
    }
    Ok(Accounting { snapshots, registry, oracle_float_ops: oracle })
}
