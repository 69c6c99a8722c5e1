use iod_core::crypto::{Block256, Id32};
use iod_core::entities::{CsState, DomainId, DroneState, Environment, GssState};
use iod_core::messages::MakeM1;
use iod_core::metrics::Counters;
use iod_core::protocol::*;
use iod_core::puf::PufDevice;
use iod_core::rffi::{emit_sample, transmitter_new, ClassifierConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const GSS: Id32 = Id32(900);

struct World {
    cs: CsState,
    gss: GssState,
    drones: Vec<DroneState>,
    rng: ChaCha20Rng,
}

fn drone(i: u32, seed: u64) -> DroneState {
    let s = seed * 100 + i as u64;
    DroneState::new(Id32(i), PufDevice::noiseless(s), transmitter_new(s, 64).unwrap())
}

fn world(n: u32, seed: u64) -> World {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cs = CsState::new(ClassifierConfig::default(), 99.0);
    let drones: Vec<_> = (1..=n).map(|i| drone(i, seed)).collect();
    for d in &drones {
        let burst: Vec<_> = (0..100)
            .map(|_| emit_sample(&d.fingerprint, 0.1, &mut rng).bind_emitter(d.id))
            .collect();
        cs.register_drone(d.id, &burst, [DomainId(1)], Environment::Secure).unwrap();
    }
    let gss = cs.register_gss(GSS, DomainId(1), PufDevice::noiseless(seed), &mut rng).unwrap();
    let mut w = World { cs, gss, drones, rng };
    for i in 0..w.drones.len() {
        enroll(&mut w, i).unwrap();
    }
    w
}

fn enroll(w: &mut World, i: usize) -> Result<()> {
    w.cs.provision_drone(&mut w.drones[i], DomainId(1)).unwrap();
    let m1 = enroll_request(&mut w.drones[i], &mut w.rng)?;
    let env = emit_sample(&w.drones[i].fingerprint, 0.1, &mut w.rng);
    let resp = enroll_process(&mut w.gss, &env, &m1, &mut w.rng)?;
    enroll_complete(&mut w.drones[i], &resp.replies)?;
    let id = w.drones[i].id;
    for p in resp.notify {
        w.drones.iter_mut().find(|d| d.id == p).unwrap().accept_peer(id);
    }
    Ok(())
}

fn ops(c: Counters) -> (u64, u64, u64, u64) {
    (c.puf_evals, c.hash_evals, c.asym_enc, c.asym_dec)
}

fn pair(w: &mut World) -> (&mut DroneState, &mut DroneState, &mut ChaCha20Rng) {
    let (a, b) = w.drones.split_at_mut(1);
    (&mut a[0], &mut b[0], &mut w.rng)
}

#[test]
fn enrollment_request_costs() {
    let mut w = world(1, 1);
    let mut d = drone(2, 1);
    let burst: Vec<_> = (0..100).map(|_| emit_sample(&d.fingerprint, 0.1, &mut w.rng)).collect();
    w.cs.register_drone(d.id, &burst, [DomainId(1)], Environment::Secure).unwrap();
    w.cs.propagate_rff(&mut w.gss, d.id).unwrap();
    w.cs.provision_drone(&mut d, DomainId(1)).unwrap();
    let before = d.meter.ledger.total();
    let m1 = enroll_request(&mut d, &mut w.rng).unwrap();
    assert_eq!(ops(d.meter.ledger.total() - before), (1, 1, 1, 0));
    let env = emit_sample(&d.fingerprint, 0.1, &mut w.rng);
    let resp = enroll_process(&mut w.gss, &env, &m1, &mut w.rng).unwrap();
    assert_eq!(resp.replies.len(), 1);
    enroll_complete(&mut d, &resp.replies).unwrap();
    assert_eq!(ops(d.meter.ledger.total() - before), (1, 2, 1, 0));
}

#[test]
fn rogue_envelope_costs_nothing() {
    let mut w = world(2, 2);
    let before = w.gss.meter.ledger.total();
    let m1 = enroll_request(&mut w.drones[0], &mut w.rng).unwrap();
    let rogue = transmitter_new(4242, 64).unwrap();
    let env = emit_sample(&rogue, 0.1, &mut w.rng);
    let err = enroll_process(&mut w.gss, &env, &m1, &mut w.rng).unwrap_err();
    assert_eq!(err, ProtocolError::RogueSender { claimed: Id32(1) });
    let d = w.gss.meter.ledger.total() - before;
    assert_eq!(ops(d), (0, 0, 0, 0));
    assert_eq!(d.frames_rejected, 1);
}

#[test]
fn tampered_or_replayed_enroll_m2_is_refused() {
    let mut w = world(1, 3);
    let mut d = drone(2, 3);
    let burst: Vec<_> = (0..100).map(|_| emit_sample(&d.fingerprint, 0.1, &mut w.rng)).collect();
    w.cs.register_drone(d.id, &burst, [DomainId(1)], Environment::Secure).unwrap();
    w.cs.propagate_rff(&mut w.gss, d.id).unwrap();
    w.cs.provision_drone(&mut d, DomainId(1)).unwrap();

    let m1 = enroll_request(&mut d, &mut w.rng).unwrap();
    let env = emit_sample(&d.fingerprint, 0.1, &mut w.rng);
    let honest = enroll_process(&mut w.gss, &env, &m1, &mut w.rng).unwrap().replies;
    for bit in (0..256).step_by(4) {
        let mut m2 = honest.clone();
        m2[0].x_ba.flip_bit(bit);
        let pending = d.pending_enrollment.clone();
        assert!(enroll_complete(&mut d, &m2).is_err(), "bit {bit}");
        assert!(d.peer_slots.is_empty() && d.nonce.is_none());
        d.pending_enrollment = pending;
    }
    d.pending_enrollment = None;

    // a fresh request has a new nonce, so the old batch no longer verifies
    let m1 = enroll_request(&mut d, &mut w.rng).unwrap();
    let env = emit_sample(&d.fingerprint, 0.1, &mut w.rng);
    enroll_process(&mut w.gss, &env, &m1, &mut w.rng).unwrap();
    assert!(enroll_complete(&mut d, &honest).is_err());
    assert!(d.peer_slots.is_empty());
}

#[test]
fn per_party_operation_counts() {
    let mut w = world(2, 4);
    let (gen, hold, rng) = pair(&mut w);
    let (g0, h0) = (gen.meter.ledger.total(), hold.meter.ledger.total());
    let m1 = make_holder_init(hold, gen.id, EpochSel::Current, rng).unwrap();
    let (m2, _) = make_generator_respond(gen, &m1, rng).unwrap();
    make_holder_complete(hold, gen.id, &m2, rng).unwrap();
    assert_eq!(ops(gen.meter.ledger.total() - g0), (2, 9, 0, 0));
    assert_eq!(ops(hold.meter.ledger.total() - h0), (2, 9, 0, 0));

    let d = &mut w.drones[0];
    let (d0, s0) = (d.meter.ledger.total(), w.gss.meter.ledger.total());
    let m1 = make_generator_init(d, GSS, EpochSel::Current, &mut w.rng).unwrap();
    let (m2, _) = make_holder_respond(&mut w.gss, &m1, &mut w.rng).unwrap();
    make_generator_complete(d, GSS, &m2).unwrap();
    assert_eq!(ops(d.meter.ledger.total() - d0), (2, 7, 0, 0));
    assert_eq!(ops(w.gss.meter.ledger.total() - s0), (2, 7, 0, 0));
}

#[test]
fn forged_credential_is_dropped_cheaply() {
    let mut w = world(2, 5);
    let (gen, hold, rng) = pair(&mut w);
    let honest = make_holder_init(hold, gen.id, EpochSel::Current, rng).unwrap();
    let chain = gen.peer_slots[&hold.id];
    for field in 0..2 {
        let mut m1: MakeM1 = honest;
        if field == 0 {
            m1.cred.flip_bit(3);
        } else {
            m1.x_star.flip_bit(200);
        }
        let before = gen.meter.ledger.total();
        let err = make_generator_respond(gen, &m1, rng).unwrap_err();
        assert_eq!(err, ProtocolError::CredentialMismatch(hold.id));
        let (p, h, e, d) = ops(gen.meter.ledger.total() - before);
        assert!(p <= 1 && h <= 3 && e == 0 && d == 0, "{p}P {h}H");
        assert_eq!(gen.peer_slots[&hold.id], chain);
        assert!(gen.sessions.is_empty());
    }
}

#[test]
fn old_m1_fails_after_chain_moves_on() {
    let mut w = world(2, 6);
    let (gen, hold, rng) = pair(&mut w);
    let mut stale = Vec::new();
    for _ in 0..3 {
        let m1 = make_holder_init(hold, gen.id, EpochSel::Current, rng).unwrap();
        let (m2, og) = make_generator_respond(gen, &m1, rng).unwrap();
        let oh = make_holder_complete(hold, gen.id, &m2, rng).unwrap();
        let t1 = key_confirm_send(hold, gen.id, &oh);
        let t2 = key_confirm_receive(gen, hold.id, &og, &t1).unwrap();
        key_confirm_finish(hold, gen.id, &oh, &t2).unwrap();
        assert!(gen.peer_slots[&hold.id].previous.is_none());
        stale.push(m1);
    }
    for m1 in &stale {
        assert_eq!(
            make_generator_respond(gen, m1, rng).unwrap_err(),
            ProtocolError::CredentialMismatch(hold.id)
        );
    }
}

#[test]
fn interleaved_directions_keep_chains_in_step() {
    let mut w = world(2, 7);
    let (gen, hold, rng) = pair(&mut w);
    let mut keys = Vec::new();
    for round in 0..6 {
        let (a, b) = if round % 2 == 0 {
            let m1 = make_holder_init(hold, gen.id, EpochSel::Current, rng).unwrap();
            let (m2, a) = make_generator_respond(gen, &m1, rng).unwrap();
            (a, make_holder_complete(hold, gen.id, &m2, rng).unwrap())
        } else {
            let m1 = make_generator_init(gen, hold.id, EpochSel::Current, rng).unwrap();
            let (m2, a) = make_holder_respond(hold, &m1, rng).unwrap();
            (a, make_generator_complete(gen, hold.id, &m2).unwrap())
        };
        assert_eq!(a.session_key, b.session_key, "round {round}");
        keys.push(a.session_key);
    }
    keys.sort_by_key(|k: &Block256| k.0);
    keys.dedup();
    assert_eq!(keys.len(), 6);
}
