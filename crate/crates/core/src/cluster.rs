//! Authenticated chip-to-chip interconnect.
//!
//! Two enforcement regimes are supported. Under the pod regime a chip only
//! talks to members of a regulator-signed manifest whose firmware matches.
//! Under the cap regime each chip limits how many peers it is connected to
//! at once, following regulator-signed cap policies that it re-checks
//! periodically.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chipmodel::{Chip, ChipError, DeviceId, EpochMs, MeterResource};
use crate::crypto::{hex32, tag, Encoder, Keypair, PublicKey, Signature};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Peer cap in force before any policy is adopted.
    pub initial_cap: u32,
    /// Check period used before any policy is adopted.
    pub check_period_ms: EpochMs,
    pub bridge_latency_multiplier: f64,
    pub interconnect_latency_ms: f64,
    pub interconnect_bytes_per_ms: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            initial_cap: 8,
            check_period_ms: 60_000,
            bridge_latency_multiplier: 5.0,
            interconnect_latency_ms: 0.002,
            interconnect_bytes_per_ms: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    DirectInterconnect,
    PcieBridge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodMember {
    pub device_id: DeviceId,
    #[serde(with = "hex32")]
    pub firmware_hash: [u8; 32],
}

/// Regulator-signed list of chips allowed to interconnect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodManifest {
    pub pod_id: u64,
    pub manifest_epoch: u64,
    /// Sorted by device id.
    pub members: Vec<PodMember>,
    pub regulator_signature: Signature,
}

impl PodManifest {
    pub fn signed_bytes(pod_id: u64, manifest_epoch: u64, members: &[PodMember]) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(tag::POD_MANIFEST).u64(pod_id).u64(manifest_epoch).u32(members.len() as u32);
        for m in members {
            e.u128(m.device_id.0).raw(&m.firmware_hash);
        }
        e.finish()
    }

    pub fn verify(&self, regulator: &PublicKey) -> bool {
        regulator
            .verify(&Self::signed_bytes(self.pod_id, self.manifest_epoch, &self.members), &self.regulator_signature)
            .is_ok()
    }

    pub fn member(&self, d: DeviceId) -> Option<&PodMember> {
        self.members.iter().find(|m| m.device_id == d)
    }
}

/// Regulator-signed peer cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapPolicy {
    pub cap: u32,
    pub cap_epoch: u64,
    pub check_period_ms: EpochMs,
    pub regulator_signature: Signature,
}

impl CapPolicy {
    pub fn signed_bytes(cap: u32, cap_epoch: u64, check_period_ms: EpochMs) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u8(tag::CAP_POLICY).u32(cap).u64(cap_epoch).u64(check_period_ms);
        e.finish()
    }

    pub fn verify(&self, regulator: &PublicKey) -> bool {
        regulator
            .verify(&Self::signed_bytes(self.cap, self.cap_epoch, self.check_period_ms), &self.regulator_signature)
            .is_ok()
    }
}

/// The trusted party that signs manifests and cap policies.
#[derive(Debug, Clone)]
pub struct Regulator {
    keypair: Keypair,
}

impl Regulator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Regulator { keypair: Keypair::generate(rng) }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public()
    }

    pub fn sign_manifest(&self, pod_id: u64, manifest_epoch: u64, mut members: Vec<PodMember>) -> PodManifest {
        members.sort_by_key(|m| m.device_id);
        members.dedup_by_key(|m| m.device_id);
        let sig = self.keypair.sign(&PodManifest::signed_bytes(pod_id, manifest_epoch, &members));
        PodManifest { pod_id, manifest_epoch, members, regulator_signature: sig }
    }

    pub fn sign_cap(&self, cap: u32, cap_epoch: u64, check_period_ms: EpochMs) -> CapPolicy {
        let sig = self.keypair.sign(&CapPolicy::signed_bytes(cap, cap_epoch, check_period_ms));
        CapPolicy { cap, cap_epoch, check_period_ms, regulator_signature: sig }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pod,
    Cap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeReject {
    #[error("not in a common pod")]
    NotInPod,
    #[error("firmware hash does not match the manifest")]
    FirmwareMismatch,
    #[error("peer cap reached")]
    CapExceeded,
    #[error("mutual authentication failed")]
    BadAuth,
    #[error("endpoint is disabled")]
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum PolicyReject {
    #[error("regulator signature does not verify")]
    BadSignature,
    #[error("epoch is not newer than the adopted one")]
    StaleEpoch,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("handshake rejected: {0}")]
    Rejected(HandshakeReject),
    #[error("policy rejected: {0}")]
    Policy(PolicyReject),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("bridging through a host requires the pcie_bridge capability")]
    BridgingNotGranted,
    #[error("time {now} is before cluster time {current}")]
    TimeReversal { now: EpochMs, current: EpochMs },
    #[error(transparent)]
    Chip(#[from] ChipError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: u64,
    /// Ordered so that `peers.0 < peers.1`.
    pub peers: (DeviceId, DeviceId),
    pub established_at: EpochMs,
    pub link_kind: LinkKind,
    pub bandwidth_used: u64,
}

/// Something that can take part in mutual authentication.
pub trait Authenticator {
    fn device_id(&self) -> DeviceId;
    fn firmware_hash(&self) -> [u8; 32];
    fn sign(&self, message: &[u8]) -> Option<Signature>;
}

impl Authenticator for Chip {
    fn device_id(&self) -> DeviceId {
        Chip::device_id(self)
    }

    fn firmware_hash(&self) -> [u8; 32] {
        Chip::firmware_hash(self)
    }

    fn sign(&self, message: &[u8]) -> Option<Signature> {
        Chip::sign(self, message).ok()
    }
}

/// An endpoint claiming an identity it may not hold the key for.
#[derive(Debug, Clone)]
pub struct Impostor {
    pub claimed: DeviceId,
    pub keypair: Keypair,
    pub firmware_hash: [u8; 32],
}

impl Authenticator for Impostor {
    fn device_id(&self) -> DeviceId {
        self.claimed
    }

    fn firmware_hash(&self) -> [u8; 32] {
        self.firmware_hash
    }

    fn sign(&self, message: &[u8]) -> Option<Signature> {
        Some(self.keypair.sign(message))
    }
}

/// Bytes `signer` signs to prove its identity to `peer`, over the peer's nonce.
pub fn handshake_message(peer_nonce: &[u8; 32], signer: DeviceId, peer: DeviceId) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u8(tag::HANDSHAKE).raw(peer_nonce).u128(signer.0).u128(peer.0);
    e.finish()
}

/// One line of the cluster log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClusterEvent {
    Handshake {
        time: EpochMs,
        a: DeviceId,
        b: DeviceId,
        session: Option<u64>,
        rejected: Option<HandshakeReject>,
    },
    Teardown {
        time: EpochMs,
        session: u64,
        peers: (DeviceId, DeviceId),
        reason: String,
    },
    Data {
        time: EpochMs,
        session: Option<u64>,
        a: DeviceId,
        b: DeviceId,
        pod_a: Option<u64>,
        pod_b: Option<u64>,
        bytes: u64,
        link_kind: LinkKind,
        transit_ms: f64,
    },
    CapAdopted {
        time: EpochMs,
        device: DeviceId,
        cap: u32,
        cap_epoch: u64,
    },
    PolicyRejected {
        time: EpochMs,
        device: Option<DeviceId>,
        reason: PolicyReject,
    },
    ManifestAdopted {
        time: EpochMs,
        pod_id: u64,
        manifest_epoch: u64,
    },
    CapCheck {
        time: EpochMs,
        device: DeviceId,
        open: u32,
        cap: u32,
        closed: u32,
    },
    SelfDisabled {
        time: EpochMs,
        device: DeviceId,
    },
}

impl ClusterEvent {
    pub fn time(&self) -> EpochMs {
        match self {
            ClusterEvent::Handshake { time, .. }
            | ClusterEvent::Teardown { time, .. }
            | ClusterEvent::Data { time, .. }
            | ClusterEvent::CapAdopted { time, .. }
            | ClusterEvent::PolicyRejected { time, .. }
            | ClusterEvent::ManifestAdopted { time, .. }
            | ClusterEvent::CapCheck { time, .. }
            | ClusterEvent::SelfDisabled { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CapState {
    cap: u32,
    cap_epoch: Option<u64>,
    check_period_ms: EpochMs,
    last_check_ms: EpochMs,
    over_cap_since: Option<EpochMs>,
}

/// Summary of how long any chip spent above its adopted cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapAudit {
    /// Longest over-cap stretch after a lowering, ms.
    pub max_over_cap_ms: EpochMs,
    /// Over-cap states not caused by a cap lowering. Always zero for a
    /// correct implementation.
    pub unexplained: u64,
}

/// A set of chips, their sessions and the enforcement state.
#[derive(Debug)]
pub struct Cluster {
    config: ClusterConfig,
    regime: Regime,
    regulator: PublicKey,
    chips: BTreeMap<DeviceId, Chip>,
    registry: BTreeMap<DeviceId, PublicKey>,
    pods: BTreeMap<u64, PodManifest>,
    caps: BTreeMap<DeviceId, CapState>,
    sessions: BTreeMap<u64, Session>,
    next_session: u64,
    now_ms: EpochMs,
    log: Vec<ClusterEvent>,
    rng: ChaCha8Rng,
    audit: CapAudit,
}

impl Cluster {
    pub fn new(regime: Regime, regulator: PublicKey, config: ClusterConfig, seed: u64) -> Self {
        Cluster {
            config,
            regime,
            regulator,
            chips: BTreeMap::new(),
            registry: BTreeMap::new(),
            pods: BTreeMap::new(),
            caps: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 0,
            now_ms: 0,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: CapAudit::default(),
        }
    }

    pub fn add_chip(&mut self, chip: Chip) -> DeviceId {
        let id = chip.device_id();
        self.registry.insert(id, chip.public_key());
        self.caps.insert(
            id,
            CapState {
                cap: self.config.initial_cap,
                cap_epoch: None,
                check_period_ms: self.config.check_period_ms,
                last_check_ms: self.now_ms,
                over_cap_since: None,
            },
        );
        self.chips.insert(id, chip);
        id
    }

    pub fn chip(&self, d: DeviceId) -> Option<&Chip> {
        self.chips.get(&d)
    }

    pub fn chip_mut(&mut self, d: DeviceId) -> Option<&mut Chip> {
        self.chips.get_mut(&d)
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.chips.keys().copied()
    }

    pub fn now_ms(&self) -> EpochMs {
        self.now_ms
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn log(&self) -> &[ClusterEvent] {
        &self.log
    }

    pub fn log_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn open_sessions(&self, d: DeviceId) -> u32 {
        self.sessions.values().filter(|s| s.peers.0 == d || s.peers.1 == d).count() as u32
    }

    pub fn cap(&self, d: DeviceId) -> Option<u32> {
        self.caps.get(&d).map(|c| c.cap)
    }

    pub fn cap_epoch(&self, d: DeviceId) -> Option<u64> {
        self.caps.get(&d).and_then(|c| c.cap_epoch)
    }

    pub fn manifest(&self, pod_id: u64) -> Option<&PodManifest> {
        self.pods.get(&pod_id)
    }

    /// The pod a device belongs to, if any (lowest pod id wins).
    pub fn pod_of(&self, d: DeviceId) -> Option<u64> {
        self.pods.values().find(|p| p.member(d).is_some()).map(|p| p.pod_id)
    }

    /// Audit as of now, including any stretch still in progress.
    pub fn cap_audit(&self) -> CapAudit {
        let mut a = self.audit;
        for st in self.caps.values() {
            if let Some(since) = st.over_cap_since {
                a.max_over_cap_ms = a.max_over_cap_ms.max(self.now_ms - since);
            }
        }
        a
    }

    /// Installs or replaces a pod manifest. Replacements need a higher epoch;
    /// sessions involving removed members are closed.
    pub fn install_manifest(&mut self, manifest: PodManifest) -> Result<(), ClusterError> {
        let reject = if !manifest.verify(&self.regulator) {
            Some(PolicyReject::BadSignature)
        } else if self.pods.get(&manifest.pod_id).is_some_and(|m| manifest.manifest_epoch <= m.manifest_epoch) {
            Some(PolicyReject::StaleEpoch)
        } else {
            None
        };
        if let Some(reason) = reject {
            self.log.push(ClusterEvent::PolicyRejected { time: self.now_ms, device: None, reason });
            return Err(ClusterError::Policy(reason));
        }
        self.log.push(ClusterEvent::ManifestAdopted {
            time: self.now_ms,
            pod_id: manifest.pod_id,
            manifest_epoch: manifest.manifest_epoch,
        });
        self.pods.insert(manifest.pod_id, manifest);
        if self.regime == Regime::Pod {
            let stale: Vec<u64> = self
                .sessions
                .values()
                .filter(|s| s.link_kind == LinkKind::DirectInterconnect && self.common_pod(s.peers.0, s.peers.1).is_none())
                .map(|s| s.id)
                .collect();
            for id in stale {
                self.close(id, "manifest_replaced");
            }
        }
        Ok(())
    }

    fn common_pod(&self, a: DeviceId, b: DeviceId) -> Option<&PodManifest> {
        self.pods.values().find(|p| p.member(a).is_some() && p.member(b).is_some())
    }

    /// Adopts `policy` on chip `d` if it is signed and newer.
    pub fn apply_cap_update(&mut self, d: DeviceId, policy: &CapPolicy) -> Result<(), ClusterError> {
        let st = *self.caps.get(&d).ok_or(ClusterError::UnknownDevice(d))?;
        let reject = if !policy.verify(&self.regulator) {
            Some(PolicyReject::BadSignature)
        } else if st.cap_epoch.is_some_and(|e| policy.cap_epoch <= e) {
            Some(PolicyReject::StaleEpoch)
        } else {
            None
        };
        if let Some(reason) = reject {
            self.log.push(ClusterEvent::PolicyRejected { time: self.now_ms, device: Some(d), reason });
            return Err(ClusterError::Policy(reason));
        }
        let now = self.now_ms;
        let open = self.open_sessions(d);
        let st = self.caps.get_mut(&d).expect("checked above");
        st.cap = policy.cap;
        st.cap_epoch = Some(policy.cap_epoch);
        st.check_period_ms = policy.check_period_ms.max(1);
        if open > st.cap && st.over_cap_since.is_none() {
            st.over_cap_since = Some(now);
        }
        self.settle_over_cap(d);
        self.log.push(ClusterEvent::CapAdopted { time: now, device: d, cap: policy.cap, cap_epoch: policy.cap_epoch });
        Ok(())
    }

    /// Advances cluster time, running every periodic cap check that falls
    /// due on the way, in time order.
    pub fn advance_to(&mut self, t: EpochMs) -> Result<(), ClusterError> {
        if t < self.now_ms {
            return Err(ClusterError::TimeReversal { now: t, current: self.now_ms });
        }
        loop {
            let due = self
                .caps
                .iter()
                .map(|(d, st)| (st.last_check_ms + st.check_period_ms, *d))
                .filter(|(when, _)| *when <= t)
                .min();
            let Some((when, d)) = due else { break };
            // A shortened period can leave a check already overdue.
            self.now_ms = when.max(self.now_ms);
            self.periodic_check(d);
        }
        self.now_ms = t;
        Ok(())
    }

    /// Closes newest sessions first until `d` is within its cap.
    pub fn periodic_check(&mut self, d: DeviceId) {
        let now = self.now_ms;
        let Some(st) = self.caps.get(&d).copied() else { return };
        let open = self.open_sessions(d);
        let mut closed = 0;
        if self.regime == Regime::Cap && open > st.cap {
            let mut mine: Vec<&Session> =
                self.sessions.values().filter(|s| s.peers.0 == d || s.peers.1 == d).collect();
            mine.sort_by_key(|s| std::cmp::Reverse((s.established_at, s.id)));
            let victims: Vec<u64> = mine.iter().take((open - st.cap) as usize).map(|s| s.id).collect();
            for id in victims {
                self.close(id, "cap_lowered");
                closed += 1;
            }
        }
        self.settle_over_cap(d);
        let st = self.caps.get_mut(&d).expect("present");
        st.last_check_ms = now;
        self.log.push(ClusterEvent::CapCheck { time: now, device: d, open, cap: st.cap, closed });
    }

    fn close(&mut self, id: u64, reason: &str) {
        if let Some(s) = self.sessions.remove(&id) {
            self.log.push(ClusterEvent::Teardown {
                time: self.now_ms,
                session: id,
                peers: s.peers,
                reason: reason.to_string(),
            });
            for d in [s.peers.0, s.peers.1] {
                self.settle_over_cap(d);
            }
        }
    }

    fn settle_over_cap(&mut self, d: DeviceId) {
        let open = self.open_sessions(d);
        let now = self.now_ms;
        if let Some(st) = self.caps.get_mut(&d) {
            if let Some(since) = st.over_cap_since {
                if open <= st.cap {
                    self.audit.max_over_cap_ms = self.audit.max_over_cap_ms.max(now - since);
                    st.over_cap_since = None;
                }
            }
        }
    }

    /// Closes a session at either endpoint's request.
    pub fn teardown(&mut self, id: u64) -> Result<(), ClusterError> {
        if !self.sessions.contains_key(&id) {
            return Err(ClusterError::UnknownSession(id));
        }
        self.close(id, "requested");
        Ok(())
    }

    /// Mutual authentication between two member chips.
    pub fn handshake(&mut self, a: DeviceId, b: DeviceId) -> Result<u64, ClusterError> {
        let ca = self.chips.get(&a).ok_or(ClusterError::UnknownDevice(a))?.clone();
        let cb = self.chips.get(&b).ok_or(ClusterError::UnknownDevice(b))?.clone();
        self.handshake_endpoints(&ca, &cb)
    }

    /// Handshake where the initiator is an arbitrary endpoint, such as an
    /// impostor claiming a registered identity.
    pub fn handshake_from(&mut self, initiator: &dyn Authenticator, b: DeviceId) -> Result<u64, ClusterError> {
        let cb = self.chips.get(&b).ok_or(ClusterError::UnknownDevice(b))?.clone();
        self.handshake_endpoints(initiator, &cb)
    }

    fn authenticate(&mut self, prover: &dyn Authenticator, verifier: DeviceId) -> bool {
        let mut nonce = [0u8; 32];
        self.rng.fill(&mut nonce);
        let claimed = prover.device_id();
        let Some(key) = self.registry.get(&claimed) else { return false };
        match prover.sign(&handshake_message(&nonce, claimed, verifier)) {
            Some(sig) => key.verify(&handshake_message(&nonce, claimed, verifier), &sig).is_ok(),
            None => false,
        }
    }

    fn disabled(&self, d: DeviceId) -> bool {
        self.chips.get(&d).is_none_or(|c| c.is_zeroized() || c.integrity_lockout())
    }

    fn handshake_endpoints(&mut self, a: &dyn Authenticator, b: &dyn Authenticator) -> Result<u64, ClusterError> {
        let (ida, idb) = (a.device_id(), b.device_id());
        let verdict = self.evaluate(a, b);
        match verdict {
            Ok(()) => {
                let id = self.next_session;
                self.next_session += 1;
                let peers = if ida <= idb { (ida, idb) } else { (idb, ida) };
                self.sessions.insert(
                    id,
                    Session { id, peers, established_at: self.now_ms, link_kind: LinkKind::DirectInterconnect, bandwidth_used: 0 },
                );
                self.log.push(ClusterEvent::Handshake { time: self.now_ms, a: ida, b: idb, session: Some(id), rejected: None });
                for d in [ida, idb] {
                    if self.caps.get(&d).is_some_and(|st| self.regime == Regime::Cap && self.open_sessions(d) > st.cap) {
                        self.audit.unexplained += 1;
                    }
                }
                Ok(id)
            }
            Err(r) => {
                self.log.push(ClusterEvent::Handshake { time: self.now_ms, a: ida, b: idb, session: None, rejected: Some(r) });
                Err(ClusterError::Rejected(r))
            }
        }
    }

    fn evaluate(&mut self, a: &dyn Authenticator, b: &dyn Authenticator) -> Result<(), HandshakeReject> {
        let (ida, idb) = (a.device_id(), b.device_id());
        if ida == idb {
            return Err(HandshakeReject::BadAuth);
        }
        if !self.authenticate(a, idb) || !self.authenticate(b, ida) {
            return Err(HandshakeReject::BadAuth);
        }
        match self.regime {
            Regime::Pod => {
                let pod = self.common_pod(ida, idb).cloned().ok_or(HandshakeReject::NotInPod)?;
                let mut mismatch = false;
                for ep in [a, b] {
                    let expected = pod.member(ep.device_id()).expect("member").firmware_hash;
                    if ep.firmware_hash() != expected {
                        mismatch = true;
                        if let Some(c) = self.chips.get_mut(&ep.device_id()) {
                            if !c.integrity_lockout() {
                                c.self_disable();
                                self.log.push(ClusterEvent::SelfDisabled { time: self.now_ms, device: ep.device_id() });
                            }
                        }
                    }
                }
                if mismatch {
                    return Err(HandshakeReject::FirmwareMismatch);
                }
                if self.disabled(ida) || self.disabled(idb) {
                    return Err(HandshakeReject::Disabled);
                }
            }
            Regime::Cap => {
                if self.disabled(ida) || self.disabled(idb) {
                    return Err(HandshakeReject::Disabled);
                }
                for d in [ida, idb] {
                    if self.open_sessions(d) >= self.caps[&d].cap {
                        return Err(HandshakeReject::CapExceeded);
                    }
                }
            }
        }
        Ok(())
    }

    fn direct_transit_ms(&self, bytes: u64) -> f64 {
        self.config.interconnect_latency_ms + bytes as f64 / self.config.interconnect_bytes_per_ms
    }

    /// Sends `bytes` over an established session.
    pub fn transfer(&mut self, session: u64, bytes: u64) -> Result<f64, ClusterError> {
        let s = self.sessions.get(&session).ok_or(ClusterError::UnknownSession(session))?.clone();
        for d in [s.peers.0, s.peers.1] {
            self.chips.get_mut(&d).ok_or(ClusterError::UnknownDevice(d))?.consume(MeterResource::InterconnectTransferBytes, bytes)?;
        }
        let transit = self.direct_transit_ms(bytes);
        self.sessions.get_mut(&session).expect("present").bandwidth_used += bytes;
        self.log.push(ClusterEvent::Data {
            time: self.now_ms,
            session: Some(session),
            a: s.peers.0,
            b: s.peers.1,
            pod_a: self.pod_of(s.peers.0),
            pod_b: self.pod_of(s.peers.1),
            bytes,
            link_kind: LinkKind::DirectInterconnect,
            transit_ms: transit,
        });
        Ok(transit)
    }

    /// Moves data between two chips through a host's PCIe bus, bypassing
    /// interconnect authentication. Needs the bridging capability.
    pub fn bridge_transfer(&mut self, a: DeviceId, b: DeviceId, bytes: u64, granted: bool) -> Result<f64, ClusterError> {
        if !granted {
            return Err(ClusterError::BridgingNotGranted);
        }
        for d in [a, b] {
            self.chips.get_mut(&d).ok_or(ClusterError::UnknownDevice(d))?.consume(MeterResource::PcieTransferBytes, bytes)?;
        }
        let transit = self.direct_transit_ms(bytes) * self.config.bridge_latency_multiplier;
        self.log.push(ClusterEvent::Data {
            time: self.now_ms,
            session: None,
            a,
            b,
            pod_a: self.pod_of(a),
            pod_b: self.pod_of(b),
            bytes,
            link_kind: LinkKind::PcieBridge,
            transit_ms: transit,
        });
        Ok(transit)
    }
}

/// A flagged pair of pods exchanging data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlag {
    pub pods: (u64, u64),
    /// Windows whose inter-pod bytes reached the threshold.
    pub windows_over: usize,
    pub total_bytes: u64,
    /// Indices into the event log of the contributing data events.
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingDetector {
    /// Length of one training step, ms.
    pub window_ms: EpochMs,
    pub threshold_bytes_per_step: u64,
    /// Windows over threshold needed before a pair counts as periodic.
    pub min_windows: usize,
}

impl Default for CouplingDetector {
    fn default() -> Self {
        CouplingDetector { window_ms: 1000, threshold_bytes_per_step: 1 << 26, min_windows: 3 }
    }
}

impl CouplingDetector {
    /// Flags pod pairs with recurring inter-pod traffic at or above the
    /// per-step threshold.
    pub fn detect(&self, log: &[ClusterEvent]) -> Vec<CouplingFlag> {
        let mut per_window: BTreeMap<((u64, u64), u64), u64> = BTreeMap::new();
        let mut evidence: BTreeMap<(u64, u64), (u64, Vec<usize>)> = BTreeMap::new();
        for (i, e) in log.iter().enumerate() {
            if let ClusterEvent::Data { time, pod_a: Some(pa), pod_b: Some(pb), bytes, .. } = e {
                if pa == pb || *bytes == 0 {
                    continue;
                }
                let pair = (*pa.min(pb), *pa.max(pb));
                *per_window.entry((pair, time / self.window_ms.max(1))).or_default() += bytes;
                let ev = evidence.entry(pair).or_default();
                ev.0 += bytes;
                ev.1.push(i);
            }
        }
        let mut out = Vec::new();
        for (pair, (total, idx)) in evidence {
            let over = per_window
                .iter()
                .filter(|((p, _), b)| *p == pair && **b >= self.threshold_bytes_per_step)
                .count();
            if over >= self.min_windows {
                out.push(CouplingFlag { pods: pair, windows_over: over, total_bytes: total, evidence: idx });
            }
        }
        out
    }
}

/// Convenience wrapper over [`CouplingDetector::detect`].
pub fn detect_cross_pod_coupling(log: &[ClusterEvent], window_ms: EpochMs, threshold_bytes_per_step: u64) -> Vec<CouplingFlag> {
    CouplingDetector { window_ms, threshold_bytes_per_step, ..Default::default() }.detect(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipmodel::{ChipConfig, REFERENCE_FIRMWARE};
    use crate::crypto::digest;

    fn setup(regime: Regime, n: usize) -> (Cluster, Regulator, Vec<DeviceId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let reg = Regulator::new(&mut rng);
        let mut cl = Cluster::new(regime, reg.public_key(), ClusterConfig::default(), 1);
        let ids = (0..n)
            .map(|_| cl.add_chip(Chip::provision(&mut rng, vec![], ChipConfig { require_license: false, ..Default::default() })))
            .collect();
        (cl, reg, ids)
    }

    fn members(ids: &[DeviceId]) -> Vec<PodMember> {
        ids.iter().map(|d| PodMember { device_id: *d, firmware_hash: digest(REFERENCE_FIRMWARE) }).collect()
    }

    #[test]
    fn pod_membership_rule() {
        let (mut cl, reg, ids) = setup(Regime::Pod, 4);
        cl.install_manifest(reg.sign_manifest(1, 0, members(&ids[..3]))).unwrap();
        assert!(cl.handshake(ids[0], ids[1]).is_ok());
        assert_eq!(cl.handshake(ids[0], ids[3]), Err(ClusterError::Rejected(HandshakeReject::NotInPod)));
    }

    #[test]
    fn firmware_mismatch_rejects_and_disables() {
        let (mut cl, reg, ids) = setup(Regime::Pod, 3);
        cl.install_manifest(reg.sign_manifest(1, 0, members(&ids))).unwrap();
        use crate::chipmodel::{TamperEvent, TamperKind};
        cl.chip_mut(ids[1]).unwrap().tamper_event(TamperEvent {
            kind: TamperKind::FirmwareModification { image: b"patched".to_vec() },
            covert: true,
        });
        assert_eq!(cl.handshake(ids[0], ids[1]), Err(ClusterError::Rejected(HandshakeReject::FirmwareMismatch)));
        assert!(cl.chip(ids[1]).unwrap().integrity_lockout());
        assert!(!cl.chip(ids[0]).unwrap().integrity_lockout());
    }

    #[test]
    fn ninth_peer_exceeds_cap_of_eight() {
        let (mut cl, _, ids) = setup(Regime::Cap, 10);
        for peer in &ids[1..9] {
            cl.handshake(ids[0], *peer).unwrap();
        }
        assert_eq!(cl.handshake(ids[0], ids[9]), Err(ClusterError::Rejected(HandshakeReject::CapExceeded)));
    }

    #[test]
    fn lowering_from_sixteen_to_four_closes_six_newest() {
        let (mut cl, reg, ids) = setup(Regime::Cap, 11);
        for d in &ids {
            cl.apply_cap_update(*d, &reg.sign_cap(16, 1, 60_000)).unwrap();
        }
        let mut sessions = Vec::new();
        for (i, peer) in ids[1..].iter().enumerate() {
            cl.advance_to(i as u64 * 10).unwrap();
            sessions.push(cl.handshake(ids[0], *peer).unwrap());
        }
        cl.advance_to(1_000).unwrap();
        cl.apply_cap_update(ids[0], &reg.sign_cap(4, 2, 60_000)).unwrap();
        assert_eq!(cl.open_sessions(ids[0]), 10);
        cl.advance_to(1_000 + 60_000).unwrap();
        assert_eq!(cl.open_sessions(ids[0]), 4);
        let remaining: Vec<u64> = cl.sessions().map(|s| s.id).collect();
        assert_eq!(remaining, sessions[..4].to_vec());
        assert!(cl.cap_audit().max_over_cap_ms <= 60_000);
        assert_eq!(cl.cap_audit().unexplained, 0);
    }

    #[test]
    fn raising_the_cap_ends_the_over_cap_stretch() {
        let (mut cl, reg, ids) = setup(Regime::Cap, 3);
        cl.handshake(ids[0], ids[1]).unwrap();
        cl.handshake(ids[0], ids[2]).unwrap();
        cl.apply_cap_update(ids[0], &reg.sign_cap(1, 1, 60_000)).unwrap();
        cl.advance_to(100).unwrap();
        cl.apply_cap_update(ids[0], &reg.sign_cap(2, 2, 60_000)).unwrap();
        cl.advance_to(50_000).unwrap();
        assert_eq!(cl.open_sessions(ids[0]), 2);
        assert_eq!(cl.cap_audit().max_over_cap_ms, 100);
    }

    #[test]
    fn shortened_period_never_moves_time_back() {
        let (mut cl, reg, ids) = setup(Regime::Cap, 3);
        cl.handshake(ids[0], ids[1]).unwrap();
        cl.handshake(ids[0], ids[2]).unwrap();
        cl.advance_to(40_000).unwrap();
        cl.apply_cap_update(ids[0], &reg.sign_cap(1, 1, 10_000)).unwrap();
        cl.advance_to(45_000).unwrap();
        assert_eq!(cl.open_sessions(ids[0]), 1);
        let times: Vec<EpochMs> = cl.log().iter().map(ClusterEvent::time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
        assert_eq!(cl.cap_audit().max_over_cap_ms, 0);
    }

    #[test]
    fn unsigned_or_replayed_policy_is_rejected() {
        let (mut cl, reg, ids) = setup(Regime::Cap, 2);
        let good = reg.sign_cap(4, 5, 60_000);
        cl.apply_cap_update(ids[0], &good).unwrap();
        let mut forged = reg.sign_cap(100, 6, 60_000);
        forged.cap = 1000;
        assert_eq!(cl.apply_cap_update(ids[0], &forged), Err(ClusterError::Policy(PolicyReject::BadSignature)));
        let rogue = Regulator::new(&mut ChaCha8Rng::seed_from_u64(99)).sign_cap(100, 7, 60_000);
        assert_eq!(cl.apply_cap_update(ids[0], &rogue), Err(ClusterError::Policy(PolicyReject::BadSignature)));
        assert_eq!(cl.apply_cap_update(ids[0], &reg.sign_cap(100, 4, 60_000)), Err(ClusterError::Policy(PolicyReject::StaleEpoch)));
        assert_eq!(cl.apply_cap_update(ids[0], &good), Err(ClusterError::Policy(PolicyReject::StaleEpoch)));
        assert_eq!(cl.cap(ids[0]), Some(4));
    }

    #[test]
    fn forged_identity_never_authenticates() {
        let (mut cl, _, ids) = setup(Regime::Cap, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let imp = Impostor { claimed: ids[0], keypair: Keypair::generate(&mut rng), firmware_hash: digest(REFERENCE_FIRMWARE) };
            assert_eq!(cl.handshake_from(&imp, ids[1]), Err(ClusterError::Rejected(HandshakeReject::BadAuth)));
        }
        assert_eq!(cl.open_sessions(ids[1]), 0);
    }

    #[test]
    fn bridge_is_five_times_direct_and_meters_both_ends() {
        let (mut cl, _, ids) = setup(Regime::Pod, 2);
        let gb = 1u64 << 30;
        let direct = cl.direct_transit_ms(gb);
        let bridged = cl.bridge_transfer(ids[0], ids[1], gb, true).unwrap();
        assert!((bridged - 5.0 * direct).abs() < 1e-9);
        for d in &ids {
            assert_eq!(cl.chip(*d).unwrap().meter(MeterResource::PcieTransferBytes), gb);
        }
        cl.bridge_transfer(ids[0], ids[1], 0, true).unwrap();
        assert_eq!(cl.chip(ids[0]).unwrap().meter(MeterResource::PcieTransferBytes), gb);
        assert_eq!(cl.bridge_transfer(ids[0], ids[1], 1, false), Err(ClusterError::BridgingNotGranted));
    }

    #[test]
    fn coupling_detector_flags_periodic_bursts_only() {
        let (mut cl, reg, ids) = setup(Regime::Pod, 4);
        cl.install_manifest(reg.sign_manifest(1, 0, members(&ids[..2]))).unwrap();
        cl.install_manifest(reg.sign_manifest(2, 0, members(&ids[2..]))).unwrap();
        let det = CouplingDetector { window_ms: 1000, threshold_bytes_per_step: 1 << 20, min_windows: 3 };
        assert!(det.detect(cl.log()).is_empty());
        for step in 0..3 {
            cl.advance_to(step * 5000 + 100).unwrap();
            cl.bridge_transfer(ids[0], ids[2], 1 << 10, true).unwrap();
        }
        assert!(det.detect(cl.log()).is_empty());
        for step in 0..10 {
            cl.advance_to(20_000 + step * 1000 + 10).unwrap();
            cl.bridge_transfer(ids[1], ids[3], 1 << 22, true).unwrap();
        }
        let flags = det.detect(cl.log());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].pods, (1, 2));
        assert_eq!(flags[0].windows_over, 10);
    }

    #[test]
    fn manifest_replacement_needs_higher_epoch() {
        let (mut cl, reg, ids) = setup(Regime::Pod, 3);
        cl.install_manifest(reg.sign_manifest(1, 1, members(&ids))).unwrap();
        let s = cl.handshake(ids[0], ids[2]).unwrap();
        assert_eq!(
            cl.install_manifest(reg.sign_manifest(1, 1, members(&ids[..2]))),
            Err(ClusterError::Policy(PolicyReject::StaleEpoch))
        );
        cl.install_manifest(reg.sign_manifest(1, 2, members(&ids[..2]))).unwrap();
        assert!(cl.sessions().all(|x| x.id != s));
    }
}
