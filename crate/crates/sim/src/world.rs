//! The simulated deployment: entities, the shared channel, the session
//! plan and the adversary script, executed in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use iod_core::crypto::{Block256, Id32};
use iod_core::entities::{
    drone_leave, Chain, CsState, DomainId, DroneSnapshot, DroneState, EntityError, Environment,
    GssState, SessionCache,
};
use iod_core::messages::{MsgType, Payload};
use iod_core::meter::{Audit, Meter};
use iod_core::metrics::{Counters, Phase};
use iod_core::protocol::{
    self, d2g_continuous_rffi, enroll_complete, enroll_process, enroll_request, EpochSel,
    MakeParty, ProfileKind, ProtocolError, Role, RoleProfile, SessionOutcome,
};
use iod_core::puf::PufDevice;
use iod_core::rffi::{emit_sample, transmitter_new, ClassifierConfig, Fingerprint, RffSample};

use crate::channel::{Channel, Frame, Origin, ADVERSARY};
use crate::config::{AdversaryAction, FrameSel, ScenarioConfig, SessionStep};

/// Enrollment attempts before a drone gives up (covers RFFI false rejects).
pub const ENROLL_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error(transparent)]
    Puf(#[from] iod_core::puf::PufError),
    #[error("adversary script: {0}")]
    Script(String),
}

/// Derives an independent 64-bit seed for one purpose and entity.
pub fn derive_seed(seed: u64, label: &str, id: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.update(id.to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone)]
pub enum Node {
    Drone(DroneState),
    Gss(GssState),
}

impl Node {
    pub fn drone(&self) -> Option<&DroneState> {
        match self {
            Node::Drone(d) => Some(d),
            Node::Gss(_) => None,
        }
    }

    pub fn drone_mut(&mut self) -> Option<&mut DroneState> {
        match self {
            Node::Drone(d) => Some(d),
            Node::Gss(_) => None,
        }
    }

    pub fn gss(&self) -> Option<&GssState> {
        match self {
            Node::Gss(g) => Some(g),
            Node::Drone(_) => None,
        }
    }

    pub fn gss_mut(&mut self) -> Option<&mut GssState> {
        match self {
            Node::Gss(g) => Some(g),
            Node::Drone(_) => None,
        }
    }

    pub fn meter_ref(&self) -> &Meter {
        match self {
            Node::Drone(d) => &d.meter,
            Node::Gss(g) => &g.meter,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $n:ident => $e:expr) => {
        match $self {
            Node::Drone($n) => $e,
            Node::Gss($n) => $e,
        }
    };
}

impl MakeParty for Node {
    fn party_id(&self) -> Id32 {
        delegate!(self, n => n.party_id())
    }
    fn meter(&mut self) -> &mut Meter {
        delegate!(self, n => MakeParty::meter(n))
    }
    fn profile(&self, peer: Id32) -> protocol::Result<RoleProfile> {
        delegate!(self, n => n.profile(peer))
    }
    fn chain(&self, peer: Id32) -> Option<&Chain> {
        delegate!(self, n => n.chain(peer))
    }
    fn chain_mut(&mut self, peer: Id32) -> Option<&mut Chain> {
        delegate!(self, n => n.chain_mut(peer))
    }
    fn sessions(&mut self) -> &mut BTreeMap<Id32, SessionCache> {
        delegate!(self, n => n.sessions())
    }
    fn mint(&mut self, peer: Id32, c: &Block256) -> protocol::Result<Block256> {
        delegate!(self, n => n.mint(peer, c))
    }
    fn wrap_key(&mut self, peer: Id32, c: &Block256) -> protocol::Result<Block256> {
        delegate!(self, n => n.wrap_key(peer, c))
    }
    fn rewrap_challenge(&mut self, c: Block256, rng: &mut dyn rand::RngCore) -> Block256 {
        delegate!(self, n => n.rewrap_challenge(c, rng))
    }
}

#[derive(Clone)]
pub struct Entity {
    pub node: Node,
    pub fingerprint: Fingerprint,
    pub rng: ChaCha20Rng,
}

impl Entity {
    pub fn id(&self) -> Id32 {
        self.node.party_id()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollRecord {
    pub session_id: u64,
    pub drone: Id32,
    pub domain: DomainId,
    pub success: bool,
    pub attempts: u32,
    pub failure: Option<String>,
    pub peers: usize,
    pub drone_ops: Counters,
    pub gss_ops: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MakeRecord {
    pub session_id: u64,
    pub initiator: Id32,
    pub responder: Id32,
    pub kind: ProfileKind,
    pub initiator_role: Role,
    pub success: bool,
    pub retried: bool,
    pub interfered: bool,
    pub confirmed: bool,
    /// Either side still held an unconfirmed previous epoch at the start,
    /// so verification may try two epochs.
    pub recovering: bool,
    pub failure: Option<String>,
    /// MAKE frames delivered in the successful attempt.
    pub messages: u64,
    pub initiator_ops: Counters,
    pub responder_ops: Counters,
    pub transcript_hash: Option<Block256>,
    #[serde(skip)]
    pub initiator_key: Option<Block256>,
    #[serde(skip)]
    pub responder_key: Option<Block256>,
}

impl MakeRecord {
    /// Clean sessions are the ones cost tables are measured on.
    pub fn clean(&self) -> bool {
        self.success && !self.retried && !self.interfered && !self.recovering
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VictimCost {
    pub puf_evals: u64,
    pub hash_evals: u64,
    pub asym_ops: u64,
    pub bits_sent: u64,
}

impl VictimCost {
    fn between(before: &Counters, after: &Counters) -> Self {
        let d = *after - *before;
        VictimCost {
            puf_evals: d.puf_evals,
            hash_evals: d.hash_evals,
            asym_ops: d.asym_enc + d.asym_dec,
            bits_sent: d.bits_sent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackResult {
    Rejected,
    Accepted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub scenario: String,
    pub attack: String,
    pub target: Id32,
    pub result: AttackResult,
    pub attribution: String,
    /// Rejected by the RFFI gate before any cryptography ran.
    pub gated: bool,
    pub victim_cost: VictimCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub entity: Id32,
    pub after_session: u64,
    pub puf_oracle: bool,
    pub snapshot: DroneSnapshot,
}

/// An active in-flight interference rule.
#[derive(Clone, Debug)]
enum Interference {
    Drop,
    Modify(Vec<usize>),
}

#[derive(Clone)]
pub struct Sim {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub cs: CsState,
    pub entities: BTreeMap<Id32, Entity>,
    pub domain_gss: BTreeMap<DomainId, Id32>,
    /// Domain each drone is currently provisioned for, and the last one it
    /// belonged to.
    pub drone_domain: BTreeMap<Id32, DomainId>,
    pub last_domain: BTreeMap<Id32, DomainId>,
    pub adversary_fp: Fingerprint,
    pub channel: Channel,
    adv_rng: ChaCha20Rng,
    next_session: u64,
    pub enrollments: Vec<EnrollRecord>,
    pub sessions: Vec<MakeRecord>,
    pub attacks: Vec<AttackOutcome>,
    pub captures: Vec<CaptureRecord>,
    pub scenario_label: String,
    rules: Vec<(FrameSel, Interference, bool)>,
    interfered_sessions: BTreeSet<u64>,
    rx_mark: BTreeMap<Id32, u64>,
    pub key_confirmation: bool,
    pub honest_bits_delivered: u64,
    pub honest_bits_received: u64,
}

impl Sim {
    /// Builds the topology: registers every drone and GSS with the CS and
    /// runs the initial enrollment order. The adversary script is armed but
    /// scheduled actions only fire from [`Sim::run_plan`].
    pub fn new(config: ScenarioConfig, seed: u64) -> Result<Sim, SimError> {
        let r = &config.rffi;
        let base = ClassifierConfig::new(r.k, 1.0).map_err(EntityError::from)?;
        let mut cs = CsState::new(base, r.threshold_percentile);
        let mut reg_rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "registration", 0));
        let mut entities = BTreeMap::new();

        for d in &config.drones {
            let id = Id32(d.id);
            let fp = transmitter_new(derive_seed(seed, "rff", d.id), r.dim)
                .map_err(EntityError::from)?;
            let puf = PufDevice::new(derive_seed(seed, "puf", d.id), config.puf.noise)?;
            let burst: Vec<RffSample> = (0..r.enroll_packets)
                .map(|_| emit_sample(&fp, r.noise, &mut reg_rng).bind_emitter(id))
                .collect();
            cs.register_drone(
                id,
                &burst,
                d.authorized.iter().map(|&x| DomainId(x)),
                Environment::Secure,
            )?;
            let mut state = DroneState::new(id, puf, fp.clone());
            state.meter.set_phase(Phase::Registration);
            entities.insert(
                id,
                Entity {
                    node: Node::Drone(state),
                    fingerprint: fp,
                    rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, "rng", d.id)),
                },
            );
        }
        let mut domain_gss = BTreeMap::new();
        for dom in &config.domains {
            let id = Id32(dom.gss);
            let puf = PufDevice::new(derive_seed(seed, "puf", dom.gss), config.puf.noise)?;
            let mut gss = cs.register_gss(id, DomainId(dom.id), puf, &mut reg_rng)?;
            gss.continuous_rffi = config.continuous_rffi;
            let fp = transmitter_new(derive_seed(seed, "rff", dom.gss), r.dim)
                .map_err(EntityError::from)?;
            entities.insert(
                id,
                Entity {
                    node: Node::Gss(gss),
                    fingerprint: fp,
                    rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, "rng", dom.gss)),
                },
            );
            domain_gss.insert(DomainId(dom.id), id);
        }
        let adversary_fp = transmitter_new(derive_seed(seed, "rff", ADVERSARY.0), r.dim)
            .map_err(EntityError::from)?;
        let channel = Channel::new(
            r.noise,
            ChaCha20Rng::seed_from_u64(derive_seed(seed, "channel", 0)),
        );
        let mut rules = Vec::new();
        for a in &config.adversary {
            match a {
                AdversaryAction::Drop { at } => rules.push((at.clone(), Interference::Drop, false)),
                AdversaryAction::Modify { at, bits } => {
                    rules.push((at.clone(), Interference::Modify(bits.clone()), false))
                }
                _ => {}
            }
        }
        let mut sim = Sim {
            key_confirmation: config.key_confirmation,
            scenario_label: config.name.clone(),
            config,
            seed,
            cs,
            entities,
            domain_gss,
            drone_domain: BTreeMap::new(),
            last_domain: BTreeMap::new(),
            adversary_fp,
            channel,
            adv_rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, "adversary", 0)),
            next_session: 0,
            enrollments: Vec::new(),
            sessions: Vec::new(),
            attacks: Vec::new(),
            captures: Vec::new(),
            rules,
            interfered_sessions: BTreeSet::new(),
            rx_mark: BTreeMap::new(),
            honest_bits_delivered: 0,
            honest_bits_received: 0,
        };
        for step in sim.config.enrollment.clone() {
            if let SessionStep::Enroll { drone, domain } = step {
                sim.enroll(Id32(drone), DomainId(domain))?;
            }
        }
        Ok(sim)
    }

    pub fn sessions_started(&self) -> u64 {
        self.next_session
    }

    fn new_session(&mut self) -> u64 {
        self.next_session += 1;
        self.next_session
    }

    pub fn drone(&self, id: Id32) -> Option<&DroneState> {
        self.entities.get(&id)?.node.drone()
    }

    pub fn drone_mut(&mut self, id: Id32) -> Option<&mut DroneState> {
        self.entities.get_mut(&id)?.node.drone_mut()
    }

    pub fn gss(&self, id: Id32) -> Option<&GssState> {
        self.entities.get(&id)?.node.gss()
    }

    pub fn gss_of(&self, domain: DomainId) -> Id32 {
        self.domain_gss[&domain]
    }

    fn take(&mut self, id: Id32) -> Entity {
        self.entities
            .remove(&id)
            .unwrap_or_else(|| panic!("entity {id} missing"))
    }

    fn put(&mut self, e: Entity) {
        self.entities.insert(e.id(), e);
    }

    // -- channel -----------------------------------------------------------

    fn interference_for(&mut self, frame: &Frame) -> Option<Interference> {
        for (sel, action, used) in self.rules.iter_mut() {
            if *used {
                continue;
            }
            let hit = match sel {
                FrameSel::Seq { seq } => *seq == frame.seq,
                FrameSel::Session { session, msg_type } => {
                    *session == frame.session_id && *msg_type == frame.msg_type
                }
            };
            if hit {
                *used = true;
                return Some(action.clone());
            }
        }
        None
    }

    /// Honest transmission. Returns the frame the recipient actually gets,
    /// which the adversary may have replaced, or `None` if it was dropped.
    fn send(&mut self, from: &mut Entity, to: Id32, session_id: u64, p: &Payload) -> Option<Frame> {
        let bits = p.accounted_bits();
        let msg_type = p.msg_type();
        MakeParty::meter(&mut from.node).record_sent(bits, msg_type.phase());
        let frame = self.channel.transmit(
            &from.fingerprint,
            from.id(),
            from.id(),
            to,
            session_id,
            msg_type,
            p.encode(),
            Origin::Honest,
        );
        match self.interference_for(&frame) {
            None => {
                self.honest_bits_delivered += bits;
                Some(frame)
            }
            Some(Interference::Drop) => {
                self.interfered_sessions.insert(session_id);
                None
            }
            Some(Interference::Modify(positions)) => {
                self.interfered_sessions.insert(session_id);
                let mut bytes = frame.bytes.clone();
                for &i in &positions {
                    if i < bytes.len() * 8 {
                        bytes[i / 8] ^= 0x80 >> (i % 8);
                    }
                }
                let fp = self.adversary_fp.clone();
                Some(self.channel.transmit(
                    &fp,
                    ADVERSARY,
                    frame.from,
                    to,
                    session_id,
                    msg_type,
                    bytes,
                    Origin::Modified,
                ))
            }
        }
    }

    fn receive(&mut self, to: &mut Entity, frame: &Frame) {
        let bits = crate::channel::accounted_bits(frame.msg_type, &frame.bytes);
        MakeParty::meter(&mut to.node).record_received(bits, frame.msg_type.phase());
        self.rx_mark
            .insert(to.id(), to.node.meter_ref().ledger.total().frames_rejected);
        if frame.origin == Origin::Honest {
            self.honest_bits_received += bits;
        }
    }

    /// Counts a rejection unless the protocol layer already did.
    fn reject(&mut self, to: &mut Entity, frame: &Frame) {
        let now = to.node.meter_ref().ledger.total().frames_rejected;
        if self.rx_mark.get(&to.id()) == Some(&now) {
            MakeParty::meter(&mut to.node).record_rejection(frame.msg_type.phase());
        }
    }

    // -- lifecycle -----------------------------------------------------------

    /// Provisioning by the CS. With `via_relay` the request reaches the CS
    /// through the GSS of the domain the drone last belonged to.
    pub fn provision(&mut self, drone: Id32, domain: DomainId, via_relay: bool) -> Result<(), SimError> {
        let gss_id = self.gss_of(domain);
        let mut d = self.take(drone);
        let res = (|| {
            let state = d.node.drone_mut().expect("drone");
            if via_relay {
                let relay_dom = self
                    .last_domain
                    .get(&drone)
                    .or(self.drone_domain.get(&drone))
                    .copied()
                    .ok_or(EntityError::RelayRefused(gss_id))?;
                let relay = self.gss(self.gss_of(relay_dom)).expect("gss");
                self.cs.provision_via_relay(relay, state, domain)?;
            } else {
                self.cs.provision_drone(state, domain)?;
            }
            Ok::<(), SimError>(())
        })();
        self.put(d);
        res?;
        let mut g = self.take(gss_id);
        let gss = g.node.gss_mut().expect("gss");
        let res = if gss.rff_db.contains(drone) {
            Ok(())
        } else {
            self.cs.propagate_rff(gss, drone)
        };
        self.put(g);
        res?;
        self.drone_domain.insert(drone, domain);
        Ok(())
    }

    /// Over-the-air enrollment with up to [`ENROLL_ATTEMPTS`] tries.
    pub fn enroll(&mut self, drone: Id32, domain: DomainId) -> Result<EnrollRecord, SimError> {
        let gss_id = self.gss_of(domain);
        let provisioned = self.drone(drone).and_then(|d| d.gss_id()) == Some(gss_id);
        if !provisioned {
            self.provision(drone, domain, false)?;
        }
        let sid = self.new_session();
        let mut d = self.take(drone);
        let mut g = self.take(gss_id);
        let d0 = d.node.meter_ref().ledger.phase(Phase::Enrollment);
        let g0 = g.node.meter_ref().ledger.phase(Phase::Enrollment);
        let mut attempts = 0;
        let mut failure = None;
        let mut peers = 0;
        let mut success = false;
        while attempts < ENROLL_ATTEMPTS {
            attempts += 1;
            match self.enroll_attempt(sid, &mut d, &mut g) {
                Ok((n, notify)) => {
                    peers = n;
                    success = true;
                    // join notice: each earlier drone opens a generator slot
                    for p in notify {
                        if let Some(e) = self.entities.get_mut(&p) {
                            if let Some(ds) = e.node.drone_mut() {
                                ds.accept_peer(drone);
                            }
                        }
                    }
                    break;
                }
                Err(e) => {
                    let retry = matches!(e, ProtocolError::RogueSender { .. });
                    failure.get_or_insert(e.to_string());
                    if !retry {
                        break;
                    }
                }
            }
        }
        let rec = EnrollRecord {
            session_id: sid,
            drone,
            domain,
            success,
            attempts,
            failure,
            peers,
            drone_ops: d.node.meter_ref().ledger.phase(Phase::Enrollment) - d0,
            gss_ops: g.node.meter_ref().ledger.phase(Phase::Enrollment) - g0,
        };
        self.put(d);
        self.put(g);
        if success {
            self.drone_domain.insert(drone, domain);
        }
        self.enrollments.push(rec.clone());
        Ok(rec)
    }

    fn enroll_attempt(
        &mut self,
        sid: u64,
        d: &mut Entity,
        g: &mut Entity,
    ) -> Result<(usize, Vec<Id32>), ProtocolError> {
        let state = d.node.drone_mut().expect("drone");
        let m1 = enroll_request(state, &mut d.rng)?;
        let Some(f1) = self.send(d, g.id(), sid, &Payload::EnrollM1(m1)) else {
            return Err(ProtocolError::NoSession(g.id()));
        };
        self.receive(g, &f1);
        let Payload::EnrollM1(m1) = f1.payload()? else {
            unreachable!("decoded by type")
        };
        let gss = g.node.gss_mut().expect("gss");
        let resp = match enroll_process(gss, &f1.envelope, &m1, &mut g.rng) {
            Ok(r) => r,
            Err(e) => {
                self.reject(g, &f1);
                return Err(e);
            }
        };
        let mut delivered = Vec::new();
        let mut last = None;
        for m2 in &resp.replies {
            if let Some(f) = self.send(g, d.id(), sid, &Payload::EnrollM2(*m2)) {
                self.receive(d, &f);
                if let Payload::EnrollM2(m) = f.payload()? {
                    delivered.push(m);
                }
                last = Some(f);
            }
        }
        let state = d.node.drone_mut().expect("drone");
        enroll_complete(state, &delivered).inspect_err(|_| {
            if let Some(f) = &last {
                self.reject(d, f);
            }
        })?;
        Ok((delivered.len(), resp.notify))
    }

    pub fn leave(&mut self, drone: Id32) -> bool {
        let Some(domain) = self.drone_domain.get(&drone).copied() else {
            return false;
        };
        let gss_id = self.gss_of(domain);
        let mut d = self.take(drone);
        let mut g = self.take(gss_id);
        let mut others: Vec<Entity> = self
            .drone_domain
            .iter()
            .filter(|(&o, &dom)| o != drone && dom == domain)
            .map(|(&o, _)| o)
            .collect::<Vec<_>>()
            .into_iter()
            .map(|o| self.take(o))
            .collect();
        let mut refs: Vec<&mut DroneState> = others
            .iter_mut()
            .filter_map(|e| e.node.drone_mut())
            .collect();
        let out = drone_leave(
            d.node.drone_mut().expect("drone"),
            g.node.gss_mut().expect("gss"),
            &mut refs,
        );
        for o in others {
            self.put(o);
        }
        self.put(d);
        self.put(g);
        self.drone_domain.remove(&drone);
        self.last_domain.insert(drone, domain);
        matches!(out, iod_core::entities::LeaveOutcome::Left { .. })
    }

    // -- MAKE ----------------------------------------------------------------

    /// One MAKE session including the initiator's single retry against its
    /// retained epoch, and key confirmation.
    pub fn make_session(&mut self, initiator: Id32, responder: Id32) -> MakeRecord {
        let sid = self.new_session();
        let mut a = self.take(initiator);
        let mut b = self.take(responder);
        let a0 = a.node.meter_ref().ledger.phase(Phase::Make);
        let b0 = b.node.meter_ref().ledger.phase(Phase::Make);
        let profile = a.node.profile(responder);
        let open = |n: &Node, peer: Id32| n.chain(peer).is_some_and(|c| c.previous.is_some());
        let recovering = open(&a.node, responder) || open(&b.node, initiator);
        let mut rec = MakeRecord {
            session_id: sid,
            initiator,
            responder,
            kind: profile.as_ref().map(|p| p.kind).unwrap_or(ProfileKind::D2D),
            initiator_role: profile.as_ref().map(|p| p.role).unwrap_or(Role::Holder),
            success: false,
            retried: false,
            interfered: false,
            confirmed: false,
            recovering,
            failure: None,
            messages: 0,
            initiator_ops: Counters::default(),
            responder_ops: Counters::default(),
            transcript_hash: None,
            initiator_key: None,
            responder_key: None,
        };
        let mut sel = EpochSel::Current;
        loop {
            match self.make_attempt(sid, &mut a, &mut b, sel) {
                Ok((oa, ob, msgs)) => {
                    rec.success = true;
                    rec.messages = msgs;
                    rec.transcript_hash = Some(oa.transcript_hash);
                    rec.initiator_key = Some(oa.session_key);
                    rec.responder_key = Some(ob.session_key);
                    if self.key_confirmation {
                        rec.confirmed = self.confirm(sid, &mut a, &mut b, &oa, &ob);
                    }
                    break;
                }
                Err(e) => {
                    protocol::abort_session(&mut a.node, responder);
                    rec.failure.get_or_insert(e);
                    let can_retry = a
                        .node
                        .chain(responder)
                        .is_some_and(|c| c.previous.is_some());
                    if sel == EpochSel::Current && can_retry {
                        sel = EpochSel::Previous;
                        rec.retried = true;
                        continue;
                    }
                    break;
                }
            }
        }
        rec.initiator_ops = a.node.meter_ref().ledger.phase(Phase::Make) - a0;
        rec.responder_ops = b.node.meter_ref().ledger.phase(Phase::Make) - b0;
        rec.interfered = self.interfered_sessions.contains(&sid);
        self.put(a);
        self.put(b);
        self.sessions.push(rec.clone());
        rec
    }

    fn gate(to: &mut Entity, frame: &Frame) -> Result<(), ProtocolError> {
        if let Node::Gss(g) = &mut to.node {
            return d2g_continuous_rffi(g, frame.from, &frame.envelope);
        }
        Ok(())
    }

    fn make_attempt(
        &mut self,
        sid: u64,
        a: &mut Entity,
        b: &mut Entity,
        sel: EpochSel,
    ) -> Result<(SessionOutcome, SessionOutcome, u64), String> {
        let (ai, bi) = (a.id(), b.id());
        let role = a.node.profile(bi).map_err(|e| e.to_string())?.role;
        let m1 = match role {
            Role::Holder => protocol::make_holder_init(&mut a.node, bi, sel, &mut a.rng),
            Role::Generator => protocol::make_generator_init(&mut a.node, bi, sel, &mut a.rng),
        }
        .map_err(|e| e.to_string())?;
        let f1 = self
            .send(a, bi, sid, &Payload::MakeM1(m1))
            .ok_or("make_m1 lost")?;
        let (m2, ob) = self
            .respond(b, &f1)
            .map_err(|e| format!("responder: {e}"))?
            .ok_or("responder sent nothing")?;
        let f2 = self.send(b, ai, sid, &m2).ok_or("make_m2 lost")?;
        let oa = self.complete(a, &f2).map_err(|e| format!("initiator: {e}"))?;
        Ok((oa, ob, 2))
    }

    /// Responder side of an incoming MakeM1.
    fn respond(
        &mut self,
        to: &mut Entity,
        frame: &Frame,
    ) -> Result<Option<(Payload, SessionOutcome)>, ProtocolError> {
        self.receive(to, frame);
        let res = (|| {
            Self::gate(to, frame)?;
            let Payload::MakeM1(m1) = frame.payload()? else {
                return Err(ProtocolError::NoSession(frame.from));
            };
            let role = to.node.profile(m1.sender_id)?.role;
            let (m2, out) = match role {
                Role::Generator => protocol::make_generator_respond(&mut to.node, &m1, &mut to.rng)?,
                Role::Holder => protocol::make_holder_respond(&mut to.node, &m1, &mut to.rng)?,
            };
            Ok(Some((Payload::MakeM2(m2), out)))
        })();
        if res.is_err() {
            self.reject(to, frame);
        }
        res
    }

    /// Initiator side of an incoming MakeM2; the header names the peer.
    fn complete(&mut self, to: &mut Entity, frame: &Frame) -> Result<SessionOutcome, ProtocolError> {
        self.receive(to, frame);
        let res = (|| {
            Self::gate(to, frame)?;
            let Payload::MakeM2(m2) = frame.payload()? else {
                return Err(ProtocolError::NoSession(frame.from));
            };
            let peer = frame.from;
            match to.node.sessions().get(&peer) {
                Some(SessionCache::HolderInitiated { .. }) => {
                    protocol::make_holder_complete(&mut to.node, peer, &m2, &mut to.rng)
                }
                Some(SessionCache::GeneratorInitiated { .. }) => {
                    protocol::make_generator_complete(&mut to.node, peer, &m2)
                }
                None => Err(ProtocolError::NoSession(peer)),
            }
        })();
        if res.is_err() {
            self.reject(to, frame);
        }
        res
    }

    fn confirm(
        &mut self,
        sid: u64,
        a: &mut Entity,
        b: &mut Entity,
        oa: &SessionOutcome,
        ob: &SessionOutcome,
    ) -> bool {
        let (ai, bi) = (a.id(), b.id());
        let t1 = protocol::key_confirm_send(&mut a.node, bi, oa);
        let Some(f1) = self.send(a, bi, sid, &Payload::KeyConfirm(t1)) else {
            return false;
        };
        self.receive(b, &f1);
        let Ok(Payload::KeyConfirm(t1)) = f1.payload() else {
            return false;
        };
        if Self::gate(b, &f1).is_err() {
            return false;
        }
        let t2 = match protocol::key_confirm_receive(&mut b.node, ai, ob, &t1) {
            Ok(t) => t,
            Err(_) => {
                self.reject(b, &f1);
                return false;
            }
        };
        let Some(f2) = self.send(b, ai, sid, &Payload::KeyConfirm(t2)) else {
            return false;
        };
        self.receive(a, &f2);
        let Ok(Payload::KeyConfirm(t2)) = f2.payload() else {
            return false;
        };
        if protocol::key_confirm_finish(&mut a.node, bi, oa, &t2).is_err() {
            self.reject(a, &f2);
            return false;
        }
        true
    }

    // -- adversary -----------------------------------------------------------

    /// Delivers an adversary-emitted frame outside any honest session and
    /// records what it cost the victim.
    pub fn deliver_adversarial(
        &mut self,
        attack: &str,
        to: Id32,
        claimed_from: Id32,
        msg_type: MsgType,
        bytes: Vec<u8>,
        origin: Origin,
    ) -> AttackOutcome {
        let sid = self.new_session();
        let fp = self.adversary_fp.clone();
        let frame = self.channel.transmit(
            &fp,
            ADVERSARY,
            claimed_from,
            to,
            sid,
            msg_type,
            bytes,
            origin,
        );
        let mut v = self.take(to);
        let before = v.node.meter_ref().ledger.total();
        let res = self.handle_unsolicited(&mut v, &frame);
        let after = v.node.meter_ref().ledger.total();
        self.put(v);
        let (result, attribution, gated) = match res {
            Ok(note) => (AttackResult::Accepted, note, false),
            Err(e) => (
                AttackResult::Rejected,
                e.to_string(),
                matches!(e, ProtocolError::RogueSender { .. } | ProtocolError::Rffi(_)),
            ),
        };
        let out = AttackOutcome {
            scenario: self.scenario_label.clone(),
            attack: attack.to_string(),
            target: to,
            result,
            attribution,
            gated,
            victim_cost: VictimCost::between(&before, &after),
        };
        self.attacks.push(out.clone());
        out
    }

    fn handle_unsolicited(&mut self, v: &mut Entity, frame: &Frame) -> Result<String, ProtocolError> {
        match frame.msg_type {
            MsgType::MakeM1 => {
                let sid = frame.session_id;
                match self.respond(v, frame)? {
                    Some((m2, _)) => {
                        // the victim answers the claimed sender, which has
                        // no session open for it
                        if let Some(f) = self.send(v, frame.from, sid, &m2) {
                            if self.entities.contains_key(&frame.from) {
                                let mut peer = self.take(frame.from);
                                let _ = self.complete(&mut peer, &f);
                                self.put(peer);
                            }
                        }
                        Ok("responder accepted the frame and replied".into())
                    }
                    None => Err(ProtocolError::NoSession(frame.from)),
                }
            }
            MsgType::MakeM2 => self
                .complete(v, frame)
                .map(|_| "initiator completed a session".into()),
            MsgType::EnrollM1 => {
                self.receive(v, frame);
                let Node::Gss(g) = &mut v.node else {
                    self.reject(v, frame);
                    return Err(ProtocolError::UnknownGss);
                };
                let Payload::EnrollM1(m1) = frame.payload()? else {
                    unreachable!("decoded by type")
                };
                let r = enroll_process(g, &frame.envelope, &m1, &mut v.rng);
                match r {
                    Ok(_) => Ok("GSS processed the enrollment request".into()),
                    Err(e) => {
                        self.reject(v, frame);
                        Err(e)
                    }
                }
            }
            MsgType::EnrollM2 => {
                self.receive(v, frame);
                let Node::Drone(d) = &mut v.node else {
                    self.reject(v, frame);
                    return Err(ProtocolError::NoPendingEnrollment);
                };
                let Payload::EnrollM2(m2) = frame.payload()? else {
                    unreachable!("decoded by type")
                };
                enroll_complete(d, &[m2])
                    .map(|_| "drone accepted enrollment reply".into())
                    .inspect_err(|_| self.reject(v, frame))
            }
            MsgType::KeyConfirm => {
                self.receive(v, frame);
                self.reject(v, frame);
                Err(ProtocolError::NoSession(frame.from))
            }
        }
    }

    /// Opens a MAKE session whose M1 goes on the air but never arrives,
    /// leaving the initiator waiting for an M2.
    pub fn begin_make(&mut self, initiator: Id32, responder: Id32) -> Result<Frame, ProtocolError> {
        let sid = self.new_session();
        let mut a = self.take(initiator);
        let res = (|| {
            let role = a.node.profile(responder)?.role;
            let m1 = match role {
                Role::Holder => protocol::make_holder_init(&mut a.node, responder, EpochSel::Current, &mut a.rng),
                Role::Generator => {
                    protocol::make_generator_init(&mut a.node, responder, EpochSel::Current, &mut a.rng)
                }
            }?;
            let p = Payload::MakeM1(m1);
            MakeParty::meter(&mut a.node).record_sent(p.accounted_bits(), Phase::Make);
            Ok(self.channel.transmit(
                &a.fingerprint,
                initiator,
                initiator,
                responder,
                sid,
                MsgType::MakeM1,
                p.encode(),
                Origin::Honest,
            ))
        })();
        self.put(a);
        res
    }

    pub fn abort_make(&mut self, initiator: Id32, responder: Id32) {
        if let Some(e) = self.entities.get_mut(&initiator) {
            protocol::abort_session(&mut e.node, responder);
        }
    }

    /// Starts a re-enrollment whose request never reaches the GSS.
    pub fn begin_enroll(&mut self, drone: Id32) -> Result<Frame, ProtocolError> {
        let sid = self.new_session();
        let mut d = self.take(drone);
        let res = (|| {
            let gss = d.node.drone().and_then(|x| x.gss_id()).ok_or(ProtocolError::UnknownGss)?;
            let m1 = enroll_request(d.node.drone_mut().expect("drone"), &mut d.rng)?;
            let p = Payload::EnrollM1(m1);
            MakeParty::meter(&mut d.node).record_sent(p.accounted_bits(), Phase::Enrollment);
            Ok(self.channel.transmit(
                &d.fingerprint,
                drone,
                drone,
                gss,
                sid,
                MsgType::EnrollM1,
                p.encode(),
                Origin::Honest,
            ))
        })();
        self.put(d);
        res
    }

    pub fn abort_enroll(&mut self, drone: Id32) {
        if let Some(d) = self.drone_mut(drone) {
            d.pending_enrollment = None;
        }
    }

    /// Arms a one-shot interference rule.
    pub fn arm(&mut self, at: FrameSel, modify_bits: Option<Vec<usize>>) {
        let action = match modify_bits {
            Some(bits) => Interference::Modify(bits),
            None => Interference::Drop,
        };
        self.rules.push((at, action, false));
    }

    /// Id the next protocol run will get.
    pub fn next_session_id(&self) -> u64 {
        self.next_session + 1
    }

    /// Replaces the adversary's transmitter, e.g. with a mimic.
    pub fn set_adversary_fingerprint(&mut self, fp: Fingerprint) {
        self.adversary_fp = fp;
    }

    fn resolve(&self, sel: &FrameSel) -> Result<Frame, SimError> {
        let f = match sel {
            FrameSel::Seq { seq } => self.channel.frame(*seq),
            FrameSel::Session { session, msg_type } => self
                .channel
                .frames
                .iter()
                .find(|f| f.session_id == *session && f.msg_type == *msg_type),
        };
        f.cloned()
            .ok_or_else(|| SimError::Script(format!("no observed frame matches {sel:?}")))
    }

    pub fn replay(&mut self, sel: &FrameSel, to: Option<Id32>, attack: &str) -> Result<AttackOutcome, SimError> {
        let f = self.resolve(sel)?;
        Ok(self.deliver_adversarial(
            attack,
            to.unwrap_or(f.to),
            f.from,
            f.msg_type,
            f.bytes,
            Origin::Replay,
        ))
    }

    pub fn capture(&mut self, entity: Id32, puf_oracle: bool) -> CaptureRecord {
        let snapshot = self.drone(entity).expect("captured drone").snapshot();
        let rec = CaptureRecord {
            entity,
            after_session: self.next_session,
            puf_oracle,
            snapshot,
        };
        self.captures.push(rec.clone());
        rec
    }

    fn run_scheduled(&mut self, done: u64) -> Result<(), SimError> {
        for a in self.config.adversary.clone() {
            match a {
                AdversaryAction::Replay {
                    source,
                    after_session,
                    to,
                } if after_session == done => {
                    self.replay(&source, to.map(Id32), "replay")?;
                }
                AdversaryAction::Inject {
                    after_session,
                    to,
                    from,
                    msg_type,
                    payload_hex,
                } if after_session == done => {
                    let bytes = hex::decode(&payload_hex).map_err(|e| SimError::Script(e.to_string()))?;
                    self.deliver_adversarial("inject", Id32(to), Id32(from), msg_type, bytes, Origin::Injected);
                }
                AdversaryAction::Capture {
                    entity,
                    after_session,
                    puf_oracle,
                } if after_session == done => {
                    self.capture(Id32(entity), puf_oracle);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs the session plan, firing scheduled adversary actions after the
    /// protocol run whose id they name.
    pub fn run_plan(&mut self) -> Result<(), SimError> {
        let mut fired = BTreeSet::new();
        let mut fire = |sim: &mut Sim| -> Result<(), SimError> {
            for n in 0..=sim.next_session {
                if fired.insert(n) {
                    sim.run_scheduled(n)?;
                }
            }
            Ok(())
        };
        fire(self)?;
        for step in self.config.sessions.clone() {
            match step {
                SessionStep::Make {
                    pair,
                    initiator,
                    count,
                } => {
                    let responder = if pair[0] == initiator { pair[1] } else { pair[0] };
                    for _ in 0..count {
                        self.make_session(Id32(initiator), Id32(responder));
                        fire(self)?;
                    }
                }
                SessionStep::Enroll { drone, domain } => {
                    self.enroll(Id32(drone), DomainId(domain))?;
                    fire(self)?;
                }
                SessionStep::Leave { drone } => {
                    self.leave(Id32(drone));
                }
                SessionStep::Provision {
                    drone,
                    domain,
                    via_relay,
                } => {
                    self.provision(Id32(drone), DomainId(domain), via_relay)?;
                }
            }
        }
        fire(self)?;
        for (sel, _, used) in &self.rules {
            if !used {
                return Err(SimError::Script(format!("no frame matched {sel:?}")));
            }
        }
        Ok(())
    }

    // -- ground truth ----------------------------------------------------------

    pub fn audit(&self) -> Audit {
        let mut a = Audit::default();
        for e in self.entities.values() {
            a.merge(&e.node.meter_ref().audit);
        }
        a
    }

    /// Adversary capability for deduction: a random-number source that
    /// protocol code never sees.
    pub fn adversary_rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.adv_rng
    }

    pub fn interfered(&self, session: u64) -> bool {
        self.interfered_sessions.contains(&session)
    }
}
