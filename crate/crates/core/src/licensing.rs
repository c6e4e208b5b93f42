//! Offline licensing.
//!
//! An [`Issuer`] signs [`License`]s that grant a device metered quota. The
//! device accepts a license only if all of these hold:
//!
//! * the signature verifies under an issuer key enrolled at provisioning,
//! * the license names this device's ID,
//! * its ID is strictly greater than the last license the device accepted,
//! * it has not passed its `not_after` time.
//!
//! Wire format (little endian), signature over everything before it:
//!
//! ```text
//! license_id      u64
//! device_id       u128
//! quota_count     u32
//! quota entries   quota_count x (resource ordinal u8, units u64), ascending ordinal
//! has_not_after   u8 (0 or 1)
//! not_after       u64 (0 when absent)
//! signature       64 bytes
//! ```

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chipmodel::{Chip, DeviceId, EpochMs, MeterResource, Throttle};
use crate::crypto::{CryptoError, Decoder, Encoder, Keypair, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct License {
    pub license_id: u64,
    pub device_id: DeviceId,
    /// Resources without an entry are not limited by this license.
    pub quotas: BTreeMap<MeterResource, u64>,
    pub not_after: Option<EpochMs>,
    pub issuer_signature: Signature,
}

impl License {
    pub fn quota(&self, r: MeterResource) -> Option<u64> {
        self.quotas.get(&r).copied()
    }

    /// Canonical bytes covered by the issuer signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_bytes(self.license_id, self.device_id, &self.quotas, self.not_after)
    }

    /// Full wire encoding, signature last.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.issuer_signature.0);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut d = Decoder::new(bytes);
        let license_id = d.u64()?;
        let device_id = DeviceId(d.u128()?);
        let n = d.u32()?;
        let mut quotas = BTreeMap::new();
        let mut last: Option<u8> = None;
        for _ in 0..n {
            let ord = d.u8()?;
            if last.is_some_and(|l| l >= ord) {
                return Err(CryptoError::InvalidField("quota entries must be strictly ascending"));
            }
            last = Some(ord);
            let r = MeterResource::from_ordinal(ord)
                .ok_or(CryptoError::InvalidField("unknown meter resource"))?;
            quotas.insert(r, d.u64()?);
        }
        let not_after = match (d.u8()?, d.u64()?) {
            (0, 0) => None,
            (1, v) => Some(v),
            _ => return Err(CryptoError::InvalidField("bad not_after flag")),
        };
        let sig = Signature(d.raw::<64>()?);
        d.finish()?;
        Ok(License { license_id, device_id, quotas, not_after, issuer_signature: sig })
    }

    pub fn verify(&self, issuer: &PublicKey) -> Result<(), CryptoError> {
        issuer.verify(&self.signed_bytes(), &self.issuer_signature)
    }
}

fn signed_bytes(
    license_id: u64,
    device_id: DeviceId,
    quotas: &BTreeMap<MeterResource, u64>,
    not_after: Option<EpochMs>,
) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u64(license_id).u128(device_id.0).u32(quotas.len() as u32);
    for (r, units) in quotas {
        e.u8(r.ordinal()).u64(*units);
    }
    match not_after {
        Some(t) => e.u8(1).u64(t),
        None => e.u8(0).u64(0),
    };
    e.finish()
}

/// License provider: holds the signing key and per-device ID counters.
#[derive(Debug, Clone)]
pub struct Issuer {
    keypair: Keypair,
    next_license_id: BTreeMap<DeviceId, u64>,
}

impl Issuer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_keypair(Keypair::generate(rng))
    }

    pub fn from_keypair(keypair: Keypair) -> Self {
        Issuer { keypair, next_license_id: BTreeMap::new() }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public()
    }

    pub fn next_license_id(&self, device: DeviceId) -> u64 {
        self.next_license_id.get(&device).copied().unwrap_or(0)
    }

    pub fn issue(
        &mut self,
        device_id: DeviceId,
        quotas: BTreeMap<MeterResource, u64>,
        not_after: Option<EpochMs>,
    ) -> License {
        let counter = self.next_license_id.entry(device_id).or_insert(0);
        let license_id = *counter;
        *counter += 1;
        self.sign_license(license_id, device_id, quotas, not_after)
    }

    /// Signs arbitrary fields without touching the counter. Used to build
    /// test vectors and out-of-order licenses.
    pub fn sign_license(
        &self,
        license_id: u64,
        device_id: DeviceId,
        quotas: BTreeMap<MeterResource, u64>,
        not_after: Option<EpochMs>,
    ) -> License {
        let sig = self.keypair.sign(&signed_bytes(license_id, device_id, &quotas, not_after));
        License { license_id, device_id, quotas, not_after, issuer_signature: sig }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[error("signature does not verify under any enrolled issuer key")]
    BadSignature,
    #[error("license is bound to another device")]
    WrongDevice,
    #[error("license id is not newer than the last accepted license")]
    StaleId,
    #[error("license has expired")]
    Expired,
    #[error("device is zeroized")]
    Zeroized,
}

/// Installs `license` on `chip` if it passes every check. On success the
/// quota usage restarts at zero and the chip runs at full rate.
pub fn install(chip: &mut Chip, license: &License, now: EpochMs) -> Result<(), RejectReason> {
    if chip.is_zeroized() {
        return Err(RejectReason::Zeroized);
    }
    let signed = license.signed_bytes();
    let authentic = chip
        .identity()
        .issuer_keys()
        .iter()
        .any(|k| k.verify(&signed, &license.issuer_signature).is_ok());
    if !authentic {
        return Err(RejectReason::BadSignature);
    }
    if license.device_id != chip.device_id() {
        return Err(RejectReason::WrongDevice);
    }
    if chip.last_license_id().is_some_and(|last| license.license_id <= last) {
        return Err(RejectReason::StaleId);
    }
    if license.not_after.is_some_and(|t| now > t) {
        return Err(RejectReason::Expired);
    }
    chip.accept_license(license.clone());
    enforce(chip);
    Ok(())
}

/// Recomputes the throttle from the active license and current usage.
pub fn enforce(chip: &mut Chip) -> Throttle {
    if chip.is_zeroized() || chip.integrity_lockout() {
        chip.throttle = Throttle::Disabled;
        return chip.throttle;
    }
    if !chip.config().require_license {
        chip.throttle = Throttle::Full;
        return chip.throttle;
    }
    let violation = match &chip.active_license {
        None => true,
        Some(lic) => lic.quotas.iter().any(|(r, q)| chip.usage_since_install(*r) >= *q),
    };
    chip.throttle = if violation { chip.config().on_violation.throttle() } else { Throttle::Full };
    chip.throttle
}

/// Structured-text rendering used for golden vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LicenseText {
    pub license_id: u64,
    pub device_id: DeviceId,
    pub quota_count: u32,
    pub quotas: Vec<(MeterResource, u64)>,
    pub not_after: Option<EpochMs>,
    pub signature: Signature,
    pub wire_hex: String,
}

impl From<&License> for LicenseText {
    fn from(l: &License) -> Self {
        LicenseText {
            license_id: l.license_id,
            device_id: l.device_id,
            quota_count: l.quotas.len() as u32,
            quotas: l.quotas.iter().map(|(r, u)| (*r, *u)).collect(),
            not_after: l.not_after,
            signature: l.issuer_signature,
            wire_hex: hex::encode(l.to_wire()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipmodel::{ChipConfig, ChipError};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Issuer, Chip, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let issuer = Issuer::new(&mut rng);
        let chip = Chip::provision(&mut rng, vec![issuer.public_key()], ChipConfig::default());
        (issuer, chip, rng)
    }

    fn cycles(n: u64) -> BTreeMap<MeterResource, u64> {
        BTreeMap::from([(MeterResource::ClockCycles, n)])
    }

    #[test]
    fn ids_start_at_zero_and_increment() {
        let (mut issuer, chip, _) = setup();
        let ids: Vec<u64> =
            (0..3).map(|_| issuer.issue(chip.device_id(), cycles(1), None).license_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let l = issuer.issue(chip.device_id(), cycles(1), None);
        l.verify(&issuer.public_key()).unwrap();
    }

    #[test]
    fn fresh_license_accepted_and_replay_rejected() {
        let (mut issuer, mut chip, _) = setup();
        let l = issuer.issue(chip.device_id(), cycles(1000), None);
        install(&mut chip, &l, 0).unwrap();
        assert_eq!(chip.throttle(), Throttle::Full);
        assert_eq!(install(&mut chip, &l, 0), Err(RejectReason::StaleId));
    }

    #[test]
    fn license_for_another_device_rejected() {
        let (mut issuer, mut chip, mut rng) = setup();
        let other = Chip::provision(&mut rng, vec![issuer.public_key()], ChipConfig::default());
        let l = issuer.issue(other.device_id(), cycles(10), None);
        assert_eq!(install(&mut chip, &l, 0), Err(RejectReason::WrongDevice));
    }

    #[test]
    fn expired_license_rejected() {
        let (mut issuer, mut chip, _) = setup();
        let l = issuer.issue(chip.device_id(), cycles(10), Some(1000));
        assert_eq!(install(&mut chip, &l, 1001), Err(RejectReason::Expired));
        let l2 = issuer.issue(chip.device_id(), cycles(10), Some(1000));
        install(&mut chip, &l2, 1000).unwrap();
    }

    #[test]
    fn counterfeit_issuer_rejected() {
        let (_, mut chip, mut rng) = setup();
        let mut rogue = Issuer::new(&mut rng);
        let l = rogue.issue(chip.device_id(), cycles(10), None);
        assert_eq!(install(&mut chip, &l, 0), Err(RejectReason::BadSignature));
    }

    #[test]
    fn quota_boundary_and_renewal() {
        let (mut issuer, mut chip, _) = setup();
        assert_eq!(chip.throttle(), Throttle::Disabled);
        let lic = issuer.issue(chip.device_id(), cycles(1000), None);
        install(&mut chip, &lic, 0).unwrap();
        chip.consume(MeterResource::ClockCycles, 999).unwrap();
        assert_eq!(chip.throttle(), Throttle::Full);
        chip.consume(MeterResource::ClockCycles, 1).unwrap();
        assert_eq!(chip.throttle(), Throttle::Disabled);
        assert_eq!(chip.consume(MeterResource::ClockCycles, 1), Err(ChipError::Throttled));
        let lic = issuer.issue(chip.device_id(), cycles(1000), None);
        install(&mut chip, &lic, 0).unwrap();
        assert_eq!(chip.throttle(), Throttle::Full);
        assert_eq!(chip.usage_since_install(MeterResource::ClockCycles), 0);
        assert_eq!(chip.meter(MeterResource::ClockCycles), 1000);
    }

    #[test]
    fn crossing_consume_rejected_whole() {
        let (mut issuer, mut chip, _) = setup();
        let lic = issuer.issue(chip.device_id(), cycles(100), None);
        install(&mut chip, &lic, 0).unwrap();
        chip.consume(MeterResource::ClockCycles, 60).unwrap();
        let err = chip.consume(MeterResource::ClockCycles, 41).unwrap_err();
        assert!(matches!(err, ChipError::QuotaExceeded { used: 60, quota: 100, .. }));
        assert_eq!(chip.meter(MeterResource::ClockCycles), 60);
        assert_eq!(chip.throttle(), Throttle::Full);
    }

    #[test]
    fn reduced_policy_keeps_running_at_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut issuer = Issuer::new(&mut rng);
        let cfg = ChipConfig {
            on_violation: crate::chipmodel::ThrottlePolicy::Reduce(0.1),
            ..Default::default()
        };
        let mut chip = Chip::provision(&mut rng, vec![issuer.public_key()], cfg);
        assert_eq!(chip.throttle(), Throttle::Reduced(0.1));
        let lic = issuer.issue(chip.device_id(), cycles(5), None);
        install(&mut chip, &lic, 0).unwrap();
        chip.consume(MeterResource::ClockCycles, 5).unwrap();
        let out = chip.consume(MeterResource::ClockCycles, 5).unwrap();
        assert_eq!(out.rate_fraction, 0.1);
    }

    #[test]
    fn wire_layout_is_exact() {
        let kp = Keypair::from_seed([9; 32]);
        let issuer = Issuer::from_keypair(kp);
        let quotas = BTreeMap::from([(MeterResource::ClockCycles, 0x0102), (MeterResource::FloatOps, 7)]);
        let l = issuer.sign_license(3, DeviceId(0xAB), quotas, Some(0x10));
        let w = l.to_wire();
        let mut expected = vec![3, 0, 0, 0, 0, 0, 0, 0];
        expected.extend_from_slice(&[0xAB, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[0, 7, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[6, 0x02, 0x01, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0x10, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&w[..w.len() - 64], &expected[..]);
        assert_eq!(w.len(), expected.len() + 64);
        assert_eq!(License::from_wire(&w).unwrap(), l);
    }

    #[test]
    fn malformed_wire_rejected() {
        let issuer = Issuer::from_keypair(Keypair::from_seed([1; 32]));
        let l = issuer.sign_license(0, DeviceId(1), cycles(1), None);
        let w = l.to_wire();
        assert!(License::from_wire(&w[..w.len() - 1]).is_err());
        let mut extra = w.clone();
        extra.push(0);
        assert!(License::from_wire(&extra).is_err());
    }

    proptest! {
        #[test]
        fn wire_round_trip(
            id in any::<u64>(), dev in any::<u128>(),
            q in proptest::collection::btree_map(0u8..7, any::<u64>(), 0..7),
            na in proptest::option::of(any::<u64>()),
        ) {
            let issuer = Issuer::from_keypair(Keypair::from_seed([2; 32]));
            let quotas = q.into_iter().map(|(o, u)| (MeterResource::from_ordinal(o).unwrap(), u)).collect();
            let l = issuer.sign_license(id, DeviceId(dev), quotas, na);
            prop_assert_eq!(License::from_wire(&l.to_wire()).unwrap(), l);
        }
    }
}
