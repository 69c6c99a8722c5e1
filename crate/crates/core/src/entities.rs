//! Control server, ground station servers and drones: long-term state,
//! registration, provisioning, RFF propagation and departure.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{asym_keygen, AsymKeyPair, AsymPublicKey, Block256, Id32};
use crate::meter::Meter;
use crate::metrics::widths;
use crate::puf::PufDevice;
use crate::rffi::{
    calibrate_threshold, ClassifierConfig, Fingerprint, RffDatabase, RffSample, RffiError,
};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DomainId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Environment {
    Secure,
    Open,
}

#[derive(Debug, Error, PartialEq)]
pub enum EntityError {
    #[error("registration requires a secure environment")]
    InsecureEnvironment,
    #[error("drone {0} is already registered")]
    DuplicateDrone(Id32),
    #[error("GSS {0} is already registered")]
    DuplicateGss(Id32),
    #[error("domain {0:?} already has a GSS")]
    DuplicateDomain(DomainId),
    #[error("unknown drone {0}")]
    UnknownDrone(Id32),
    #[error("unknown domain {0:?}")]
    UnknownDomain(DomainId),
    #[error("drone {drone} is not authorized for domain {domain:?}")]
    Unauthorized { drone: Id32, domain: DomainId },
    #[error("GSS {0} cannot relay: drone has no RFF entry there")]
    RelayRefused(Id32),
    #[error(transparent)]
    Rffi(#[from] RffiError),
}

/// One generation of a per-pair secret chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epoch {
    pub challenge: Block256,
    /// OTP-wrapped secret; present only on the holder side.
    pub wrapped: Option<Block256>,
}

/// Current epoch plus at most one unconfirmed predecessor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub current: Epoch,
    pub previous: Option<Epoch>,
    pub generation: u64,
}

impl Chain {
    pub fn new(current: Epoch) -> Self {
        Chain {
            current,
            previous: None,
            generation: 0,
        }
    }

    /// Moves to `next`, keeping `used` as the fallback until confirmation.
    pub fn advance(&mut self, used: Epoch, next: Epoch) {
        self.previous = Some(used);
        self.current = next;
        self.generation += 1;
    }

    pub fn confirm(&mut self) {
        self.previous = None;
    }

    pub fn rollback(&mut self) -> bool {
        match self.previous.take() {
            Some(prev) => {
                self.current = prev;
                self.generation += 1;
                true
            }
            None => false,
        }
    }

    /// Current epoch first, then the retained predecessor.
    pub fn candidates(&self) -> impl Iterator<Item = Epoch> + '_ {
        std::iter::once(self.current).chain(self.previous)
    }

    pub fn is_holder(&self) -> bool {
        self.current.wrapped.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GssSlot {
    pub gss_id: Id32,
    pub gss_pk: AsymPublicKey,
    /// D2G chain; `None` until enrollment completes.
    pub chain: Option<Chain>,
}

/// Values a drone keeps between `enroll_request` and `enroll_complete`.
#[derive(Clone, Debug)]
pub struct EnrollCache {
    pub c_a: Block256,
    pub n_a: Block256,
    pub s_ag: Block256,
}

/// Ephemeral per-peer MAKE state, cleared on completion or abort.
#[derive(Clone, Debug)]
pub enum SessionCache {
    /// Holder sent M1 carrying a fresh challenge.
    HolderInitiated {
        used: Epoch,
        secret: Block256,
        c_star: Block256,
        m1: Vec<u8>,
    },
    /// Generator sent M1 carrying the refreshed secret.
    GeneratorInitiated {
        used: Epoch,
        secret: Block256,
        next: Epoch,
        s_star: Block256,
        m1: Vec<u8>,
    },
}

#[derive(Clone)]
pub struct DroneState {
    pub id: Id32,
    pub puf: PufDevice,
    pub fingerprint: Fingerprint,
    pub nonce: Option<Block256>,
    pub gss_slot: Option<GssSlot>,
    pub peer_slots: BTreeMap<Id32, Chain>,
    pub sessions: BTreeMap<Id32, SessionCache>,
    pub pending_enrollment: Option<EnrollCache>,
    pub meter: Meter,
}

impl DroneState {
    pub fn new(id: Id32, puf: PufDevice, fingerprint: Fingerprint) -> Self {
        DroneState {
            id,
            puf,
            fingerprint,
            nonce: None,
            gss_slot: None,
            peer_slots: BTreeMap::new(),
            sessions: BTreeMap::new(),
            pending_enrollment: None,
            meter: Meter::new(id),
        }
    }

    pub fn is_enrolled(&self) -> bool {
        self.gss_slot.as_ref().is_some_and(|s| s.chain.is_some())
    }

    pub fn gss_id(&self) -> Option<Id32> {
        self.gss_slot.as_ref().map(|s| s.gss_id)
    }

    /// Creates the generator-side slot for a drone that enrolled after us.
    /// The pair chain starts from our current D2G challenge, which is the
    /// challenge behind the D2G secret the GSS used to derive the pair secret.
    pub fn accept_peer(&mut self, peer: Id32) -> bool {
        let Some(chain) = self.gss_slot.as_ref().and_then(|s| s.chain) else {
            return false;
        };
        self.peer_slots.insert(
            peer,
            Chain::new(Epoch {
                challenge: chain.current.challenge,
                wrapped: None,
            }),
        );
        true
    }

    pub fn forget_peer(&mut self, peer: Id32) -> bool {
        self.sessions.remove(&peer);
        self.peer_slots.remove(&peer).is_some()
    }

    /// Drops everything tied to the current domain. Provisioning for the
    /// next domain starts from a clean slate.
    pub fn wipe_domain(&mut self) {
        self.nonce = None;
        self.gss_slot = None;
        self.peer_slots.clear();
        self.sessions.clear();
        self.pending_enrollment = None;
    }

    pub fn abort_session(&mut self, peer: Id32) -> bool {
        self.sessions.remove(&peer).is_some()
    }

    pub fn snapshot(&self) -> DroneSnapshot {
        DroneSnapshot {
            id: self.id,
            nonce: self.nonce,
            gss_slot: self.gss_slot.clone(),
            peer_slots: self
                .peer_slots
                .iter()
                .map(|(&peer, chain)| PeerSlotSnapshot { peer, chain: *chain })
                .collect(),
        }
    }

    /// At-rest storage for one D2D pair: own id, GSS id, nonce, then
    /// `{peer id, challenge, wrapped secret}` for the pair.
    pub fn d2d_storage_bits(&self, peer: Id32) -> Option<u64> {
        let chain = self.peer_slots.get(&peer)?;
        let mut bits = widths::ID + widths::ID + widths::BLOCK;
        bits += widths::ID + widths::BLOCK;
        if chain.current.wrapped.is_some() {
            bits += widths::BLOCK;
        }
        Some(bits)
    }

    /// D2G storage under the same counting rule: own id, GSS id, nonce and
    /// the D2G challenge.
    pub fn d2g_storage_bits(&self) -> Option<u64> {
        self.gss_slot.as_ref()?.chain?;
        Some(widths::ID + widths::ID + widths::BLOCK + widths::BLOCK)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSlotSnapshot {
    pub peer: Id32,
    #[serde(flatten)]
    pub chain: Chain,
}

/// JSON-exportable at-rest state of a drone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroneSnapshot {
    pub id: Id32,
    pub nonce: Option<Block256>,
    pub gss_slot: Option<GssSlot>,
    pub peer_slots: Vec<PeerSlotSnapshot>,
}

impl DroneSnapshot {
    /// Every 256-bit value present at rest.
    pub fn blocks(&self) -> Vec<Block256> {
        let mut out = Vec::new();
        out.extend(self.nonce);
        let mut push_chain = |c: &Chain| {
            for e in std::iter::once(c.current).chain(c.previous) {
                out.push(e.challenge);
                out.extend(e.wrapped);
            }
        };
        if let Some(slot) = &self.gss_slot {
            if let Some(c) = &slot.chain {
                push_chain(c);
            }
        }
        for p in &self.peer_slots {
            push_chain(&p.chain);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroneRecord {
    pub nonce: Block256,
    pub chain: Chain,
}

#[derive(Clone)]
pub struct GssState {
    pub id: Id32,
    pub domain: DomainId,
    pub keys: AsymKeyPair,
    pub puf: PufDevice,
    pub rff_db: RffDatabase,
    pub classifier: ClassifierConfig,
    pub records: BTreeMap<Id32, DroneRecord>,
    pub enrollment_order: Vec<Id32>,
    pub sessions: BTreeMap<Id32, SessionCache>,
    pub continuous_rffi: bool,
    pub meter: Meter,
}

impl GssState {
    pub fn is_enrolled(&self, drone: Id32) -> bool {
        self.records.contains_key(&drone)
    }

    pub fn abort_session(&mut self, peer: Id32) -> bool {
        self.sessions.remove(&peer).is_some()
    }

    /// Per-drone storage at the GSS: id, challenge, nonce and wrapped secret.
    /// The RFF database is reported separately.
    pub fn d2g_storage_bits(&self, drone: Id32) -> Option<u64> {
        self.records.get(&drone)?;
        Some(widths::ID + 3 * widths::BLOCK)
    }

    pub fn snapshot(&self) -> GssSnapshot {
        GssSnapshot {
            id: self.id,
            domain: self.domain,
            public_key: self.keys.public,
            records: self.records.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GssSnapshot {
    pub id: Id32,
    pub domain: DomainId,
    pub public_key: AsymPublicKey,
    pub records: BTreeMap<Id32, DroneRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct CsState {
    pub drone_registry: BTreeMap<Id32, Vec<Vec<f64>>>,
    pub authorizations: BTreeMap<Id32, BTreeSet<DomainId>>,
    pub gss_registry: BTreeMap<Id32, AsymPublicKey>,
    pub domain_directory: BTreeMap<DomainId, Id32>,
    pub classifier: ClassifierConfig,
    pub calibration_percentile: f64,
}

impl CsState {
    pub fn new(classifier: ClassifierConfig, calibration_percentile: f64) -> Self {
        CsState {
            classifier,
            calibration_percentile,
            ..Default::default()
        }
    }

    /// Stores the envelopes of a drone's registration burst.
    pub fn register_drone(
        &mut self,
        id: Id32,
        burst: &[RffSample],
        authorized: impl IntoIterator<Item = DomainId>,
        env: Environment,
    ) -> Result<(), EntityError> {
        if env != Environment::Secure {
            return Err(EntityError::InsecureEnvironment);
        }
        if self.drone_registry.contains_key(&id) {
            return Err(EntityError::DuplicateDrone(id));
        }
        self.drone_registry
            .insert(id, burst.iter().map(|s| s.vector.clone()).collect());
        self.authorizations.insert(id, authorized.into_iter().collect());
        Ok(())
    }

    fn registry_db(&self, domain: DomainId) -> RffDatabase {
        let mut db = RffDatabase::new();
        for (&id, v) in &self.drone_registry {
            if self.authorizations.get(&id).is_some_and(|d| d.contains(&domain)) {
                db.insert_vectors(id, v.clone());
            }
        }
        db
    }

    /// Registers a GSS for `domain`: fresh key pair, plus the RFF entries of
    /// drones already authorized there and a classifier calibrated on them.
    pub fn register_gss<R: RngCore + ?Sized>(
        &mut self,
        gss_id: Id32,
        domain: DomainId,
        puf: PufDevice,
        rng: &mut R,
    ) -> Result<GssState, EntityError> {
        if self.gss_registry.contains_key(&gss_id) {
            return Err(EntityError::DuplicateGss(gss_id));
        }
        if self.domain_directory.contains_key(&domain) {
            return Err(EntityError::DuplicateDomain(domain));
        }
        let keys = asym_keygen(rng);
        let rff_db = self.registry_db(domain);
        let classifier = if rff_db.is_empty() {
            self.classifier.clone()
        } else {
            calibrate_threshold(&rff_db, &self.classifier, self.calibration_percentile)?
        };
        self.gss_registry.insert(gss_id, keys.public);
        self.domain_directory.insert(domain, gss_id);
        Ok(GssState {
            id: gss_id,
            domain,
            keys,
            puf,
            rff_db,
            classifier,
            records: BTreeMap::new(),
            enrollment_order: Vec::new(),
            sessions: BTreeMap::new(),
            continuous_rffi: false,
            meter: Meter::new(gss_id),
        })
    }

    pub fn gss_for(&self, domain: DomainId) -> Result<(Id32, AsymPublicKey), EntityError> {
        let gss = *self
            .domain_directory
            .get(&domain)
            .ok_or(EntityError::UnknownDomain(domain))?;
        Ok((gss, self.gss_registry[&gss]))
    }

    /// Writes the target GSS's identity and public key into the drone.
    pub fn provision_drone(
        &self,
        drone: &mut DroneState,
        domain: DomainId,
    ) -> Result<(), EntityError> {
        if !self.drone_registry.contains_key(&drone.id) {
            return Err(EntityError::UnknownDrone(drone.id));
        }
        let (gss_id, gss_pk) = self.gss_for(domain)?;
        if !self
            .authorizations
            .get(&drone.id)
            .is_some_and(|d| d.contains(&domain))
        {
            return Err(EntityError::Unauthorized {
                drone: drone.id,
                domain,
            });
        }
        drone.gss_slot = Some(GssSlot {
            gss_id,
            gss_pk,
            chain: None,
        });
        Ok(())
    }

    /// Cross-domain provisioning relayed by the drone's current GSS.
    pub fn provision_via_relay(
        &self,
        relay: &GssState,
        drone: &mut DroneState,
        domain: DomainId,
    ) -> Result<(), EntityError> {
        // the relay must be able to recognize the drone over the air
        if !relay.rff_db.contains(drone.id) {
            return Err(EntityError::RelayRefused(relay.id));
        }
        self.provision_drone(drone, domain)
    }

    /// Sends a registered drone's RFF entry to a GSS and recalibrates its
    /// classifier.
    pub fn propagate_rff(&self, gss: &mut GssState, drone: Id32) -> Result<(), EntityError> {
        let vectors = self
            .drone_registry
            .get(&drone)
            .ok_or(EntityError::UnknownDrone(drone))?;
        gss.rff_db.insert_vectors(drone, vectors.clone());
        gss.classifier =
            calibrate_threshold(&gss.rff_db, &self.classifier, self.calibration_percentile)?;
        Ok(())
    }
}

/// Outcome of a departure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeaveOutcome {
    Left { notified: Vec<Id32> },
    NotEnrolled,
}

/// Removes a drone from its domain: the GSS drops its record, every other
/// drone forgets the pair, and the leaving drone wipes its domain state.
pub fn drone_leave(
    drone: &mut DroneState,
    gss: &mut GssState,
    others: &mut [&mut DroneState],
) -> LeaveOutcome {
    if gss.records.remove(&drone.id).is_none() {
        return LeaveOutcome::NotEnrolled;
    }
    gss.enrollment_order.retain(|&d| d != drone.id);
    gss.sessions.remove(&drone.id);
    let mut notified = Vec::new();
    for other in others.iter_mut() {
        if other.forget_peer(drone.id) {
            notified.push(other.id);
        }
    }
    drone.wipe_domain();
    LeaveOutcome::Left { notified }
}
