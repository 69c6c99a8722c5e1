//! Enrollment, MAKE in both directions for both profiles, and key
//! confirmation.
//!
//! Every pair has one *generator*, whose PUF mints the shared secret, and
//! one *holder*, which keeps the secret OTP-wrapped under a PUF-derived key.
//! D2D: the earlier-enrolled drone generates and the joiner holds. D2G: the
//! drone generates and the GSS holds.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Block256, CryptoError, Id32, Tag};
use crate::entities::{
    Chain, DroneRecord, DroneState, EnrollCache, Epoch, GssState, SessionCache,
};
use crate::messages::{
    DecodeError, EnrollM1, EnrollM2, KeyConfirm, MakeM1, MakeM2, Payload,
};
use crate::meter::{Meter, PadKind};
use crate::metrics::Phase;
use crate::rffi::{classify, Classification, RffSample, RffiError};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("no GSS provisioned")]
    UnknownGss,
    #[error("no pairing with {0}")]
    UnknownPeer(Id32),
    #[error("a session with {0} is already open")]
    SessionBusy(Id32),
    #[error("envelope does not match claimed sender {claimed}")]
    RogueSender { claimed: Id32 },
    #[error("enrollment ciphertext rejected: {0}")]
    Decrypt(#[from] CryptoError),
    #[error("enrollment credential from {0} does not verify")]
    EnrollAuthFailure(Id32),
    #[error("credential from {0} does not verify")]
    CredentialMismatch(Id32),
    #[error("{0} is not enrolled")]
    NotEnrolled(Id32),
    #[error("no enrollment in progress")]
    NoPendingEnrollment,
    #[error("no session open with {0}")]
    NoSession(Id32),
    #[error("key confirmation from {0} failed")]
    ConfirmationMismatch(Id32),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Rffi(#[from] RffiError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    D2D,
    D2G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Holder,
    Generator,
}

/// How a party relates to one peer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub kind: ProfileKind,
    pub role: Role,
}

impl RoleProfile {
    /// Hashes applied after the PUF read when minting or unwrapping.
    pub fn derivation_depth(&self) -> u32 {
        match self.kind {
            ProfileKind::D2D => 2,
            ProfileKind::D2G => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session_key: Block256,
    pub epoch: u64,
    pub transcript_hash: Block256,
}

/// Which stored epoch the initiator should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EpochSel {
    #[default]
    Current,
    /// Retry after a timeout, against the retained predecessor.
    Previous,
}

/// A protocol participant with per-peer chains.
pub trait MakeParty {
    fn party_id(&self) -> Id32;
    fn meter(&mut self) -> &mut Meter;
    fn profile(&self, peer: Id32) -> Result<RoleProfile>;
    fn chain(&self, peer: Id32) -> Option<&Chain>;
    fn chain_mut(&mut self, peer: Id32) -> Option<&mut Chain>;
    fn sessions(&mut self) -> &mut BTreeMap<Id32, SessionCache>;
    /// Generator side: the shared secret for `challenge`.
    fn mint(&mut self, peer: Id32, challenge: &Block256) -> Result<Block256>;
    /// Holder side: the OTP key for `challenge`.
    fn wrap_key(&mut self, peer: Id32, challenge: &Block256) -> Result<Block256>;
    /// Holder side: the challenge the refreshed secret is wrapped under.
    fn rewrap_challenge(&mut self, c_star: Block256, rng: &mut dyn RngCore) -> Block256;
}

impl DroneState {
    fn domain(&self) -> Result<(Id32, Block256)> {
        let gss = self.gss_id().ok_or(ProtocolError::UnknownGss)?;
        let n = self.nonce.ok_or(ProtocolError::NotEnrolled(self.id))?;
        Ok((gss, n))
    }

    /// `H(PUF(c) ⊕ n, ID_G)`
    fn d2g_secret(&mut self, c: &Block256) -> Result<Block256> {
        let (gss, n) = self.domain()?;
        let r = self.meter.puf(&self.puf, c);
        let rn = self.meter.xor(&r, &n);
        Ok(self.meter.hash2(rn.as_bytes(), &gss.to_bytes()))
    }
}

impl MakeParty for DroneState {
    fn party_id(&self) -> Id32 {
        self.id
    }

    fn meter(&mut self) -> &mut Meter {
        &mut self.meter
    }

    fn profile(&self, peer: Id32) -> Result<RoleProfile> {
        if self.gss_id() == Some(peer) {
            if !self.is_enrolled() {
                return Err(ProtocolError::NotEnrolled(self.id));
            }
            return Ok(RoleProfile {
                kind: ProfileKind::D2G,
                role: Role::Generator,
            });
        }
        let chain = self
            .peer_slots
            .get(&peer)
            .ok_or(ProtocolError::UnknownPeer(peer))?;
        Ok(RoleProfile {
            kind: ProfileKind::D2D,
            role: if chain.is_holder() {
                Role::Holder
            } else {
                Role::Generator
            },
        })
    }

    fn chain(&self, peer: Id32) -> Option<&Chain> {
        if self.gss_id() == Some(peer) {
            return self.gss_slot.as_ref()?.chain.as_ref();
        }
        self.peer_slots.get(&peer)
    }

    fn chain_mut(&mut self, peer: Id32) -> Option<&mut Chain> {
        if self.gss_id() == Some(peer) {
            return self.gss_slot.as_mut()?.chain.as_mut();
        }
        self.peer_slots.get_mut(&peer)
    }

    fn sessions(&mut self) -> &mut BTreeMap<Id32, SessionCache> {
        &mut self.sessions
    }

    fn mint(&mut self, peer: Id32, c: &Block256) -> Result<Block256> {
        let s_g = self.d2g_secret(c)?;
        if self.gss_id() == Some(peer) {
            return Ok(s_g);
        }
        Ok(self.meter.hash2(s_g.as_bytes(), &peer.to_bytes()))
    }

    fn wrap_key(&mut self, peer: Id32, c: &Block256) -> Result<Block256> {
        let (_, n) = self.domain()?;
        let s_g = self.d2g_secret(c)?;
        let sn = self.meter.xor(&s_g, &n);
        Ok(self.meter.hash2(sn.as_bytes(), &peer.to_bytes()))
    }

    fn rewrap_challenge(&mut self, c_star: Block256, _rng: &mut dyn RngCore) -> Block256 {
        c_star
    }
}

impl MakeParty for GssState {
    fn party_id(&self) -> Id32 {
        self.id
    }

    fn meter(&mut self) -> &mut Meter {
        &mut self.meter
    }

    fn profile(&self, peer: Id32) -> Result<RoleProfile> {
        if !self.records.contains_key(&peer) {
            return Err(ProtocolError::UnknownPeer(peer));
        }
        Ok(RoleProfile {
            kind: ProfileKind::D2G,
            role: Role::Holder,
        })
    }

    fn chain(&self, peer: Id32) -> Option<&Chain> {
        self.records.get(&peer).map(|r| &r.chain)
    }

    fn chain_mut(&mut self, peer: Id32) -> Option<&mut Chain> {
        self.records.get_mut(&peer).map(|r| &mut r.chain)
    }

    fn sessions(&mut self) -> &mut BTreeMap<Id32, SessionCache> {
        &mut self.sessions
    }

    fn mint(&mut self, peer: Id32, _c: &Block256) -> Result<Block256> {
        Err(ProtocolError::UnknownPeer(peer))
    }

    /// `H(PUF_G(c) ⊕ n_peer, ID_peer)`
    fn wrap_key(&mut self, peer: Id32, c: &Block256) -> Result<Block256> {
        let n = self
            .records
            .get(&peer)
            .ok_or(ProtocolError::UnknownPeer(peer))?
            .nonce;
        let r = self.meter.puf(&self.puf, c);
        let rn = self.meter.xor(&r, &n);
        Ok(self.meter.hash2(rn.as_bytes(), &peer.to_bytes()))
    }

    fn rewrap_challenge(&mut self, _c_star: Block256, rng: &mut dyn RngCore) -> Block256 {
        self.meter.random(rng)
    }
}

// ---------------------------------------------------------------------------
// Enrollment

/// Drone side, step 1.
pub fn enroll_request<R: RngCore + ?Sized>(drone: &mut DroneState, rng: &mut R) -> Result<EnrollM1> {
    let slot = drone.gss_slot.clone().ok_or(ProtocolError::UnknownGss)?;
    drone.meter.set_phase(Phase::Enrollment);
    let c_a = drone.meter.random(rng);
    let n_a = drone.meter.random(rng);
    let r_a = drone.meter.puf(&drone.puf, &c_a);
    let rn = drone.meter.xor(&r_a, &n_a);
    let s_ag = drone.meter.hash2(rn.as_bytes(), &slot.gss_id.to_bytes());
    drone.meter.note_secret(s_ag);
    let e_ag = drone.meter.asym_encrypt(&s_ag, &slot.gss_pk, rng);
    drone.pending_enrollment = Some(EnrollCache { c_a, n_a, s_ag });
    Ok(EnrollM1 {
        id_a: drone.id,
        n_a,
        e_ag,
    })
}

/// GSS reply to an accepted enrollment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnrollResponse {
    /// One per already-enrolled peer, in enrollment order.
    pub replies: Vec<EnrollM2>,
    /// Peers that must create a generator slot for the joiner once it
    /// completes.
    pub notify: Vec<Id32>,
}

/// The RFFI gate alone: does the envelope belong to `claimed`?
pub fn rffi_gate(gss: &GssState, claimed: Id32, envelope: &RffSample) -> Result<()> {
    match classify(&gss.rff_db, &gss.classifier, envelope) {
        Ok(Classification::Known(id)) if id == claimed => Ok(()),
        Ok(_) | Err(RffiError::EmptyDatabase) => Err(ProtocolError::RogueSender { claimed }),
        Err(e) => Err(e.into()),
    }
}

/// GSS side, step 2. The envelope is classified before any cryptographic
/// work. A drone that enrolls again replaces its record.
pub fn enroll_process<R: RngCore + ?Sized>(
    gss: &mut GssState,
    envelope: &RffSample,
    m1: &EnrollM1,
    rng: &mut R,
) -> Result<EnrollResponse> {
    gss.meter.set_phase(Phase::Enrollment);
    if let Err(e) = rffi_gate(gss, m1.id_a, envelope) {
        gss.meter.record_rejection(Phase::Enrollment);
        return Err(e);
    }
    let s_ag = gss.meter.asym_decrypt(&m1.e_ag, &gss.keys)?;
    let id_a = m1.id_a;

    let peers: Vec<Id32> = gss
        .enrollment_order
        .iter()
        .copied()
        .filter(|&p| p != id_a)
        .collect();
    let mut replies = Vec::with_capacity(peers.len());
    for &b in &peers {
        let rec = &gss.records[&b];
        let (c_gb, x_bg) = (rec.chain.current.challenge, rec.chain.current.wrapped);
        let x_bg = x_bg.expect("GSS records always hold a wrapped secret");
        let kappa = gss.wrap_key(b, &c_gb)?;
        let s_bg = gss.meter.xor(&x_bg, &kappa);
        let s_ba = gss.meter.hash2(s_bg.as_bytes(), &id_a.to_bytes());
        let sn = gss.meter.xor(&s_ag, &m1.n_a);
        let kappa_ab = gss.meter.hash2(sn.as_bytes(), &b.to_bytes());
        gss.meter.note_pad(PadKind::WrapKey, kappa_ab);
        let x_ba = gss.meter.xor(&s_ba, &kappa_ab);
        let xs = gss.meter.xor(&x_ba, &s_ag);
        let cred_g = gss.meter.hash2(xs.as_bytes(), &b.to_bytes());
        gss.meter.note_secret(s_ba);
        replies.push(EnrollM2 {
            x_ba,
            id_b: b,
            cred_g,
        });
    }

    let c_ga = gss.meter.random(rng);
    let r = gss.meter.puf(&gss.puf, &c_ga);
    let rn = gss.meter.xor(&r, &m1.n_a);
    let kappa_ga = gss.meter.hash2(rn.as_bytes(), &id_a.to_bytes());
    gss.meter.note_pad(PadKind::WrapKey, kappa_ga);
    let x_ag = gss.meter.xor(&s_ag, &kappa_ga);
    gss.records.insert(
        id_a,
        DroneRecord {
            nonce: m1.n_a,
            chain: Chain::new(Epoch {
                challenge: c_ga,
                wrapped: Some(x_ag),
            }),
        },
    );
    gss.sessions.remove(&id_a);
    if !gss.enrollment_order.contains(&id_a) {
        gss.enrollment_order.push(id_a);
    }
    Ok(EnrollResponse {
        replies,
        notify: peers,
    })
}

/// Drone side, step 3. The batch is all-or-nothing.
pub fn enroll_complete(drone: &mut DroneState, replies: &[EnrollM2]) -> Result<()> {
    let cache = drone
        .pending_enrollment
        .take()
        .ok_or(ProtocolError::NoPendingEnrollment)?;
    drone.meter.set_phase(Phase::Enrollment);
    for m2 in replies {
        let xs = drone.meter.xor(&m2.x_ba, &cache.s_ag);
        let expect = drone.meter.hash2(xs.as_bytes(), &m2.id_b.to_bytes());
        if !expect.ct_eq(&m2.cred_g) {
            drone.meter.record_rejection(Phase::Enrollment);
            return Err(ProtocolError::EnrollAuthFailure(m2.id_b));
        }
    }
    let slot = drone.gss_slot.as_mut().ok_or(ProtocolError::UnknownGss)?;
    slot.chain = Some(Chain::new(Epoch {
        challenge: cache.c_a,
        wrapped: None,
    }));
    drone.nonce = Some(cache.n_a);
    drone.peer_slots.clear();
    drone.sessions.clear();
    for m2 in replies {
        drone.peer_slots.insert(
            m2.id_b,
            Chain::new(Epoch {
                challenge: cache.c_a,
                wrapped: Some(m2.x_ba),
            }),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MAKE

fn begin<P: MakeParty + ?Sized>(p: &mut P, peer: Id32, want: Role) -> Result<RoleProfile> {
    let profile = p.profile(peer)?;
    if profile.role != want {
        return Err(ProtocolError::UnknownPeer(peer));
    }
    if p.sessions().contains_key(&peer) {
        return Err(ProtocolError::SessionBusy(peer));
    }
    p.meter().set_phase(Phase::Make);
    Ok(profile)
}

fn select_epoch<P: MakeParty + ?Sized>(p: &P, peer: Id32, sel: EpochSel) -> Result<Epoch> {
    let chain = p.chain(peer).ok_or(ProtocolError::UnknownPeer(peer))?;
    match sel {
        EpochSel::Current => Ok(chain.current),
        EpochSel::Previous => chain.previous.ok_or(ProtocolError::UnknownPeer(peer)),
    }
}

fn unwrap_epoch<P: MakeParty + ?Sized>(p: &mut P, peer: Id32, e: &Epoch) -> Result<Block256> {
    let kappa = p.wrap_key(peer, &e.challenge)?;
    let x = e.wrapped.ok_or(ProtocolError::UnknownPeer(peer))?;
    let s = p.meter().xor(&x, &kappa);
    p.meter().note_secret(s);
    Ok(s)
}

fn mint_epoch<P: MakeParty + ?Sized>(p: &mut P, peer: Id32, e: &Epoch) -> Result<Block256> {
    let s = p.mint(peer, &e.challenge)?;
    p.meter().note_secret(s);
    Ok(s)
}

/// Wraps `s_star` for the holder's next epoch.
fn rewrap<P: MakeParty + ?Sized>(
    p: &mut P,
    peer: Id32,
    s_star: Block256,
    c_star: Block256,
    rng: &mut dyn RngCore,
) -> Result<Epoch> {
    let challenge = p.rewrap_challenge(c_star, rng);
    let kappa = p.wrap_key(peer, &challenge)?;
    p.meter().note_pad(PadKind::WrapKey, kappa);
    let wrapped = p.meter().xor(&s_star, &kappa);
    Ok(Epoch {
        challenge,
        wrapped: Some(wrapped),
    })
}

fn finish<P: MakeParty + ?Sized>(
    p: &mut P,
    peer: Id32,
    used: Epoch,
    next: Epoch,
    c_star: &Block256,
    s_star: &Block256,
    m1: &[u8],
    m2: &[u8],
) -> Result<SessionOutcome> {
    let sk = p.meter().hash2(c_star.as_bytes(), s_star.as_bytes());
    p.meter().note_session_key(sk);
    let chain = p.chain_mut(peer).ok_or(ProtocolError::UnknownPeer(peer))?;
    chain.advance(used, next);
    let epoch = chain.generation;
    Ok(SessionOutcome {
        session_key: sk,
        epoch,
        transcript_hash: crypto::hash2(m1, m2),
    })
}

fn mask<P: MakeParty + ?Sized>(p: &mut P, s: &Block256, tag: Tag) -> Block256 {
    let pad = p.meter().hash_tagged(s, tag);
    p.meter().note_pad(
        match tag {
            Tag::One => PadKind::MaskOne,
            Tag::Two => PadKind::MaskTwo,
        },
        pad,
    );
    pad
}

fn reject<P: MakeParty + ?Sized>(p: &mut P, peer: Id32) -> ProtocolError {
    p.meter().record_rejection(Phase::Make);
    ProtocolError::CredentialMismatch(peer)
}

/// Holder opens: ships a fresh challenge masked under the current secret.
pub fn make_holder_init<P: MakeParty + ?Sized>(
    holder: &mut P,
    peer: Id32,
    sel: EpochSel,
    rng: &mut dyn RngCore,
) -> Result<MakeM1> {
    begin(holder, peer, Role::Holder)?;
    let used = select_epoch(holder, peer, sel)?;
    let s = unwrap_epoch(holder, peer, &used)?;
    let c_star = holder.meter().random(rng);
    let pad = mask(holder, &s, Tag::One);
    let x_star = holder.meter().xor(&c_star, &pad);
    let id = holder.party_id();
    let xs = holder.meter().xor(&x_star, &s);
    let cred = holder.meter().hash2(xs.as_bytes(), &id.to_bytes());
    let m1 = MakeM1 {
        sender_id: id,
        x_star,
        cred,
    };
    holder.sessions().insert(
        peer,
        SessionCache::HolderInitiated {
            used,
            secret: s,
            c_star,
            m1: Payload::MakeM1(m1).encode(),
        },
    );
    Ok(m1)
}

/// Generator answers a holder's M1 with the refreshed secret.
pub fn make_generator_respond<P: MakeParty + ?Sized>(
    generator: &mut P,
    m1: &MakeM1,
    rng: &mut dyn RngCore,
) -> Result<(MakeM2, SessionOutcome)> {
    let peer = m1.sender_id;
    begin(generator, peer, Role::Generator)?;
    let chain = *generator.chain(peer).ok_or(ProtocolError::UnknownPeer(peer))?;
    let mut matched = None;
    for e in chain.candidates() {
        let s = generator.mint(peer, &e.challenge)?;
        let xs = generator.meter().xor(&m1.x_star, &s);
        let expect = generator.meter().hash2(xs.as_bytes(), &peer.to_bytes());
        if expect.ct_eq(&m1.cred) {
            matched = Some((e, s));
            break;
        }
    }
    let Some((used, s)) = matched else {
        return Err(reject(generator, peer));
    };
    generator.meter().note_secret(s);
    let pad = generator.meter().hash_tagged(&s, Tag::One);
    let c_star = generator.meter().xor(&m1.x_star, &pad);
    let next = Epoch {
        challenge: generator.meter().random(rng),
        wrapped: None,
    };
    let s_star = mint_epoch(generator, peer, &next)?;
    let pad = mask(generator, &s, Tag::Two);
    let x_star = generator.meter().xor(&s_star, &pad);
    let xs = generator.meter().xor(&x_star, &s);
    let cred = generator.meter().hash2(xs.as_bytes(), c_star.as_bytes());
    let m2 = MakeM2 { x_star, cred };
    let out = finish(
        generator,
        peer,
        used,
        next,
        &c_star,
        &s_star,
        &Payload::MakeM1(*m1).encode(),
        &Payload::MakeM2(m2).encode(),
    )?;
    Ok((m2, out))
}

/// Holder closes: recovers the refreshed secret and re-wraps it.
pub fn make_holder_complete<P: MakeParty + ?Sized>(
    holder: &mut P,
    peer: Id32,
    m2: &MakeM2,
    rng: &mut dyn RngCore,
) -> Result<SessionOutcome> {
    let Some(SessionCache::HolderInitiated {
        used,
        secret: s,
        c_star,
        m1,
    }) = holder.sessions().remove(&peer)
    else {
        return Err(ProtocolError::NoSession(peer));
    };
    holder.meter().set_phase(Phase::Make);
    let xs = holder.meter().xor(&m2.x_star, &s);
    let expect = holder.meter().hash2(xs.as_bytes(), c_star.as_bytes());
    if !expect.ct_eq(&m2.cred) {
        return Err(reject(holder, peer));
    }
    let pad = holder.meter().hash_tagged(&s, Tag::Two);
    let s_star = holder.meter().xor(&m2.x_star, &pad);
    holder.meter().note_secret(s_star);
    let next = rewrap(holder, peer, s_star, c_star, rng)?;
    finish(
        holder,
        peer,
        used,
        next,
        &c_star,
        &s_star,
        &m1,
        &Payload::MakeM2(*m2).encode(),
    )
}

/// Generator opens: ships the refreshed secret masked under the current one.
pub fn make_generator_init<P: MakeParty + ?Sized>(
    generator: &mut P,
    peer: Id32,
    sel: EpochSel,
    rng: &mut dyn RngCore,
) -> Result<MakeM1> {
    begin(generator, peer, Role::Generator)?;
    let used = select_epoch(generator, peer, sel)?;
    let s = mint_epoch(generator, peer, &used)?;
    let next = Epoch {
        challenge: generator.meter().random(rng),
        wrapped: None,
    };
    let s_star = mint_epoch(generator, peer, &next)?;
    let pad = mask(generator, &s, Tag::One);
    let x_star = generator.meter().xor(&s_star, &pad);
    let id = generator.party_id();
    let xs = generator.meter().xor(&x_star, &s);
    let cred = generator.meter().hash2(xs.as_bytes(), &id.to_bytes());
    let m1 = MakeM1 {
        sender_id: id,
        x_star,
        cred,
    };
    generator.sessions().insert(
        peer,
        SessionCache::GeneratorInitiated {
            used,
            secret: s,
            next,
            s_star,
            m1: Payload::MakeM1(m1).encode(),
        },
    );
    Ok(m1)
}

/// Holder answers a generator's M1 with a fresh challenge.
pub fn make_holder_respond<P: MakeParty + ?Sized>(
    holder: &mut P,
    m1: &MakeM1,
    rng: &mut dyn RngCore,
) -> Result<(MakeM2, SessionOutcome)> {
    let peer = m1.sender_id;
    begin(holder, peer, Role::Holder)?;
    let chain = *holder.chain(peer).ok_or(ProtocolError::UnknownPeer(peer))?;
    let mut matched = None;
    for e in chain.candidates() {
        let kappa = holder.wrap_key(peer, &e.challenge)?;
        let x = e.wrapped.ok_or(ProtocolError::UnknownPeer(peer))?;
        let s = holder.meter().xor(&x, &kappa);
        let xs = holder.meter().xor(&m1.x_star, &s);
        let expect = holder.meter().hash2(xs.as_bytes(), &peer.to_bytes());
        if expect.ct_eq(&m1.cred) {
            matched = Some((e, s));
            break;
        }
    }
    let Some((used, s)) = matched else {
        return Err(reject(holder, peer));
    };
    holder.meter().note_secret(s);
    let pad = holder.meter().hash_tagged(&s, Tag::One);
    let s_star = holder.meter().xor(&m1.x_star, &pad);
    holder.meter().note_secret(s_star);
    let c_star = holder.meter().random(rng);
    let pad = mask(holder, &s, Tag::Two);
    let x_star = holder.meter().xor(&c_star, &pad);
    let xs = holder.meter().xor(&x_star, &s);
    let cred = holder.meter().hash2(xs.as_bytes(), s_star.as_bytes());
    let m2 = MakeM2 { x_star, cred };
    let next = rewrap(holder, peer, s_star, c_star, rng)?;
    let out = finish(
        holder,
        peer,
        used,
        next,
        &c_star,
        &s_star,
        &Payload::MakeM1(*m1).encode(),
        &Payload::MakeM2(m2).encode(),
    )?;
    Ok((m2, out))
}

/// Generator closes: recovers the holder's challenge.
pub fn make_generator_complete<P: MakeParty + ?Sized>(
    generator: &mut P,
    peer: Id32,
    m2: &MakeM2,
) -> Result<SessionOutcome> {
    let Some(SessionCache::GeneratorInitiated {
        used,
        secret: s,
        next,
        s_star,
        m1,
    }) = generator.sessions().remove(&peer)
    else {
        return Err(ProtocolError::NoSession(peer));
    };
    generator.meter().set_phase(Phase::Make);
    let xs = generator.meter().xor(&m2.x_star, &s);
    let expect = generator.meter().hash2(xs.as_bytes(), s_star.as_bytes());
    if !expect.ct_eq(&m2.cred) {
        return Err(reject(generator, peer));
    }
    let pad = generator.meter().hash_tagged(&s, Tag::Two);
    let c_star = generator.meter().xor(&m2.x_star, &pad);
    finish(
        generator,
        peer,
        used,
        next,
        &c_star,
        &s_star,
        &m1,
        &Payload::MakeM2(*m2).encode(),
    )
}

/// Drops any half-open session with `peer`.
pub fn abort_session<P: MakeParty + ?Sized>(p: &mut P, peer: Id32) -> bool {
    p.sessions().remove(&peer).is_some()
}

// ---------------------------------------------------------------------------
// Key confirmation (data phase)

const CONFIRM_LABEL: &[u8] = b"iod-key-confirm";

fn confirm_tag<P: MakeParty + ?Sized>(
    p: &mut P,
    sk: &Block256,
    from: Id32,
    to: Id32,
    step: u8,
) -> Block256 {
    let mut data = CONFIRM_LABEL.to_vec();
    data.push(step);
    data.extend_from_slice(&from.to_bytes());
    data.extend_from_slice(&to.to_bytes());
    p.meter().set_phase(Phase::Data);
    p.meter().mac(sk, &data)
}

/// Sent by whichever party finished the MAKE exchange last.
pub fn key_confirm_send<P: MakeParty + ?Sized>(
    p: &mut P,
    peer: Id32,
    out: &SessionOutcome,
) -> KeyConfirm {
    let id = p.party_id();
    KeyConfirm {
        tag: confirm_tag(p, &out.session_key, id, peer, 1),
    }
}

/// The other party checks the tag, commits, and replies. On mismatch it
/// rolls back to the epoch it used and stays silent.
pub fn key_confirm_receive<P: MakeParty + ?Sized>(
    p: &mut P,
    peer: Id32,
    out: &SessionOutcome,
    msg: &KeyConfirm,
) -> Result<KeyConfirm> {
    let id = p.party_id();
    let expect = confirm_tag(p, &out.session_key, peer, id, 1);
    let chain = p.chain_mut(peer).ok_or(ProtocolError::UnknownPeer(peer))?;
    if !expect.ct_eq(&msg.tag) {
        chain.rollback();
        p.meter().record_rejection(Phase::Data);
        return Err(ProtocolError::ConfirmationMismatch(peer));
    }
    chain.confirm();
    Ok(KeyConfirm {
        tag: confirm_tag(p, &out.session_key, id, peer, 2),
    })
}

/// The finisher checks the reply and commits. A bad reply is handled like a
/// lost one: the predecessor epoch stays available for the next session.
pub fn key_confirm_finish<P: MakeParty + ?Sized>(
    p: &mut P,
    peer: Id32,
    out: &SessionOutcome,
    msg: &KeyConfirm,
) -> Result<()> {
    let id = p.party_id();
    let expect = confirm_tag(p, &out.session_key, peer, id, 2);
    if !expect.ct_eq(&msg.tag) {
        p.meter().record_rejection(Phase::Data);
        return Err(ProtocolError::ConfirmationMismatch(peer));
    }
    p.chain_mut(peer)
        .ok_or(ProtocolError::UnknownPeer(peer))?
        .confirm();
    Ok(())
}

/// Optional per-frame RFFI check on D2G traffic at the GSS.
pub fn d2g_continuous_rffi(gss: &mut GssState, claimed: Id32, envelope: &RffSample) -> Result<()> {
    if !gss.continuous_rffi {
        return Ok(());
    }
    rffi_gate(gss, claimed, envelope).inspect_err(|_| gss.meter.record_rejection(Phase::Make))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entities::{CsState, DomainId, Environment};
    use crate::puf::PufDevice;
    use crate::rffi::{emit_sample, transmitter_new, ClassifierConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        gss: GssState,
        drones: Vec<DroneState>,
        rng: ChaCha20Rng,
    }

    fn world(n: u32, seed: u64) -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut cs = CsState::new(ClassifierConfig::default(), 99.0);
        let mut drones: Vec<DroneState> = (1..=n)
            .map(|i| {
                DroneState::new(
                    Id32(i),
                    PufDevice::noiseless(seed * 100 + i as u64),
                    transmitter_new(seed * 100 + i as u64, 64).unwrap(),
                )
            })
            .collect();
        for d in &drones {
            let burst: Vec<_> = (0..100)
                .map(|_| emit_sample(&d.fingerprint, 0.1, &mut rng).bind_emitter(d.id))
                .collect();
            cs.register_drone(d.id, &burst, [DomainId(1)], Environment::Secure)
                .unwrap();
        }
        let mut gss = cs
            .register_gss(Id32(900), DomainId(1), PufDevice::noiseless(seed), &mut rng)
            .unwrap();
        for i in 0..drones.len() {
            cs.provision_drone(&mut drones[i], DomainId(1)).unwrap();
            let m1 = enroll_request(&mut drones[i], &mut rng).unwrap();
            let env = emit_sample(&drones[i].fingerprint, 0.1, &mut rng);
            let resp = enroll_process(&mut gss, &env, &m1, &mut rng).unwrap();
            enroll_complete(&mut drones[i], &resp.replies).unwrap();
            for p in resp.notify {
                let id = drones[i].id;
                drones.iter_mut().find(|d| d.id == p).unwrap().accept_peer(id);
            }
        }
        World { gss, drones, rng }
    }

    #[test]
    fn d2d_holder_initiated_agrees() {
        let mut w = world(2, 1);
        let (a, b) = w.drones.split_at_mut(1);
        let (gen, hold) = (&mut a[0], &mut b[0]);
        let m1 = make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_g) = make_generator_respond(gen, &m1, &mut w.rng).unwrap();
        let o_h = make_holder_complete(hold, gen.id, &m2, &mut w.rng).unwrap();
        assert_eq!(o_g.session_key, o_h.session_key);
        assert_eq!(o_g.transcript_hash, o_h.transcript_hash);
        assert!(hold.sessions.is_empty());
    }

    #[test]
    fn d2d_generator_initiated_agrees() {
        let mut w = world(2, 2);
        let (a, b) = w.drones.split_at_mut(1);
        let (gen, hold) = (&mut a[0], &mut b[0]);
        let m1 = make_generator_init(gen, hold.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_h) = make_holder_respond(hold, &m1, &mut w.rng).unwrap();
        let o_g = make_generator_complete(gen, hold.id, &m2).unwrap();
        assert_eq!(o_g.session_key, o_h.session_key);
    }

    #[test]
    fn d2g_both_directions_agree() {
        let mut w = world(1, 3);
        let d = &mut w.drones[0];
        let m1 = make_holder_init(&mut w.gss, d.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_d) = make_generator_respond(d, &m1, &mut w.rng).unwrap();
        let o_g = make_holder_complete(&mut w.gss, d.id, &m2, &mut w.rng).unwrap();
        assert_eq!(o_d.session_key, o_g.session_key);

        let m1 = make_generator_init(d, w.gss.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_g) = make_holder_respond(&mut w.gss, &m1, &mut w.rng).unwrap();
        let o_d = make_generator_complete(d, w.gss.id, &m2).unwrap();
        assert_eq!(o_d.session_key, o_g.session_key);
    }

    #[test]
    fn second_session_needs_no_confirmation() {
        let mut w = world(2, 4);
        let (a, b) = w.drones.split_at_mut(1);
        let (gen, hold) = (&mut a[0], &mut b[0]);
        let mut keys = Vec::new();
        for _ in 0..3 {
            let m1 = make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng).unwrap();
            let (m2, o) = make_generator_respond(gen, &m1, &mut w.rng).unwrap();
            make_holder_complete(hold, gen.id, &m2, &mut w.rng).unwrap();
            keys.push(o.session_key);
        }
        keys.dedup();
        assert_eq!(keys.len(), 3);
    }

    #[test]
    fn busy_and_unknown_peer() {
        let mut w = world(2, 5);
        let (a, b) = w.drones.split_at_mut(1);
        let (gen, hold) = (&mut a[0], &mut b[0]);
        make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng).unwrap();
        assert_eq!(
            make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng),
            Err(ProtocolError::SessionBusy(gen.id))
        );
        assert!(abort_session(hold, gen.id));
        assert_eq!(
            make_holder_init(hold, Id32(77), EpochSel::Current, &mut w.rng),
            Err(ProtocolError::UnknownPeer(Id32(77)))
        );
    }

    #[test]
    fn enroll_without_gss_is_refused() {
        let mut d = DroneState::new(
            Id32(1),
            PufDevice::noiseless(1),
            transmitter_new(1, 64).unwrap(),
        );
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            enroll_request(&mut d, &mut rng),
            Err(ProtocolError::UnknownGss)
        ));
    }

    #[test]
    fn confirmation_commits_and_mismatch_rolls_back() {
        let mut w = world(2, 6);
        let (a, b) = w.drones.split_at_mut(1);
        let (gen, hold) = (&mut a[0], &mut b[0]);
        let m1 = make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_g) = make_generator_respond(gen, &m1, &mut w.rng).unwrap();
        let o_h = make_holder_complete(hold, gen.id, &m2, &mut w.rng).unwrap();
        let t1 = key_confirm_send(hold, gen.id, &o_h);
        let t2 = key_confirm_receive(gen, hold.id, &o_g, &t1).unwrap();
        key_confirm_finish(hold, gen.id, &o_h, &t2).unwrap();
        assert!(gen.peer_slots[&hold.id].previous.is_none());
        assert!(hold.peer_slots[&gen.id].previous.is_none());

        let before = gen.peer_slots[&hold.id];
        let m1 = make_holder_init(hold, gen.id, EpochSel::Current, &mut w.rng).unwrap();
        let (m2, o_g) = make_generator_respond(gen, &m1, &mut w.rng).unwrap();
        make_holder_complete(hold, gen.id, &m2, &mut w.rng).unwrap();
        let bad = KeyConfirm {
            tag: Block256::ZERO,
        };
        assert!(key_confirm_receive(gen, hold.id, &o_g, &bad).is_err());
        assert_eq!(gen.peer_slots[&hold.id].current, before.current);
    }
}
