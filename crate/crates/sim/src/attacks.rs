//! Canned attack batteries run against a small reference deployment.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use iod_core::crypto::{asym_encrypt, Block256, Id32};
use iod_core::messages::{EnrollM1, EnrollM2, MakeM1, MakeM2, MsgType, Payload};

use crate::channel::Origin;
use crate::config::{DomainConfig, DroneConfig, FrameSel, ScenarioConfig, SessionStep};
use crate::pfs::{self, PfsFinding};
use crate::report::dos_bound_holds;
use crate::world::{derive_seed, AttackOutcome, AttackResult, Sim, SimError, VictimCost};

pub const GSS: Id32 = Id32(100);
pub const DOMAIN: u32 = 1;
/// Bit positions sampled per 256-bit field; id fields are swept fully.
pub const BITS_PER_FIELD: usize = 64;
/// Forged frames per target in the impersonation battery.
pub const FORGERIES: usize = 16;
/// Sessions completed before a capture.
pub const CAPTURE_AT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Replay,
    Mitm,
    Impersonation,
    Dos,
    Capture,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Replay,
        Suite::Mitm,
        Suite::Impersonation,
        Suite::Dos,
        Suite::Capture,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Replay => "replay",
            Suite::Mitm => "mitm",
            Suite::Impersonation => "impersonation",
            Suite::Dos => "dos",
            Suite::Capture => "capture",
            Suite::All => "all",
        };
        f.write_str(s)
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "replay" => Suite::Replay,
            "mitm" => Suite::Mitm,
            "impersonation" => Suite::Impersonation,
            "dos" => Suite::Dos,
            "capture" => Suite::Capture,
            "all" => Suite::All,
            _ => return Err(format!("unknown suite {s}")),
        })
    }
}

/// One MAKE variant as (initiator, responder) in the reference deployment.
#[derive(Clone, Copy, Debug)]
pub struct Variant {
    pub label: &'static str,
    pub initiator: Id32,
    pub responder: Id32,
}

/// Drone 1 enrolled first, so it generates for drone 2 and for the GSS.
pub const VARIANTS: [Variant; 4] = [
    Variant {
        label: "d2d_holder_initiated",
        initiator: Id32(2),
        responder: Id32(1),
    },
    Variant {
        label: "d2d_generator_initiated",
        initiator: Id32(1),
        responder: Id32(2),
    },
    Variant {
        label: "d2g_holder_initiated",
        initiator: GSS,
        responder: Id32(1),
    },
    Variant {
        label: "d2g_generator_initiated",
        initiator: Id32(1),
        responder: GSS,
    },
];

/// Three drones in one domain; drone 3 is enrolled only if `with_third`.
pub fn reference_config(name: &str, with_third: bool, continuous_rffi: bool) -> ScenarioConfig {
    let mut enrollment: Vec<SessionStep> = [1, 2]
        .iter()
        .map(|&d| SessionStep::Enroll {
            drone: d,
            domain: DOMAIN,
        })
        .collect();
    if with_third {
        enrollment.push(SessionStep::Enroll {
            drone: 3,
            domain: DOMAIN,
        });
    }
    ScenarioConfig {
        name: name.to_string(),
        seed: None,
        domains: vec![DomainConfig {
            id: DOMAIN,
            gss: GSS.0,
        }],
        drones: (1..=3)
            .map(|id| DroneConfig {
                id,
                authorized: vec![DOMAIN],
            })
            .collect(),
        enrollment,
        rffi: Default::default(),
        puf: Default::default(),
        sessions: Vec::new(),
        adversary: Vec::new(),
        key_confirmation: true,
        continuous_rffi,
        expect_failures: Vec::new(),
    }
}

/// Reference deployment with `rounds` confirmed sessions of every variant.
pub fn reference_world(name: &str, seed: u64, rounds: usize, continuous_rffi: bool) -> Result<Sim, SimError> {
    let mut sim = Sim::new(reference_config(name, true, continuous_rffi), seed)?;
    for _ in 0..rounds {
        for v in VARIANTS {
            let r = sim.make_session(v.initiator, v.responder);
            if !r.success {
                return Err(SimError::Script(format!("honest warm-up failed: {:?}", r.failure)));
            }
        }
    }
    Ok(sim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub outcomes: Vec<AttackOutcome>,
    pub pfs: Vec<PfsFinding>,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite report serializes") + "\n"
    }

    pub fn summary(&self) -> String {
        let rejected = self
            .outcomes
            .iter()
            .filter(|o| o.result == AttackResult::Rejected)
            .count();
        format!(
            "{}: {}/{} rejected, {} capture analyses, {}",
            self.suite,
            rejected,
            self.outcomes.len(),
            self.pfs.len(),
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

fn finish(suite: Suite, seed: u64, outcomes: Vec<AttackOutcome>, pfs: Vec<PfsFinding>, dos: bool) -> SuiteReport {
    let mut failures: Vec<String> = outcomes
        .iter()
        .filter(|o| o.result == AttackResult::Accepted)
        .map(|o| format!("{}/{} accepted by {}: {}", o.scenario, o.attack, o.target, o.attribution))
        .collect();
    if dos {
        failures.extend(
            outcomes
                .iter()
                .filter(|o| !dos_bound_holds(o))
                .map(|o| format!("{}/{} over cost budget: {:?}", o.scenario, o.attack, o.victim_cost)),
        );
    }
    for f in pfs.iter().filter(|f| !f.holds()) {
        failures.push(format!(
            "{}: capture of {} ({:?}) exposes past sessions {:?} (fixpoint {:?})",
            f.scenario, f.captured, f.level, f.past_leaked, f.past_leaked_fixpoint
        ));
    }
    SuiteReport {
        schema_version: iod_core::metrics::REPORT_SCHEMA_VERSION,
        suite,
        seed,
        passed: failures.is_empty(),
        outcomes,
        pfs,
        failures,
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<SuiteReport>, SimError> {
    let suites: Vec<Suite> = if suite == Suite::All {
        Suite::EACH.to_vec()
    } else {
        vec![suite]
    };
    suites
        .into_iter()
        .map(|s| match s {
            Suite::Replay => replay_battery(seed),
            Suite::Mitm => mitm_battery(seed),
            Suite::Impersonation => impersonation_battery(seed),
            Suite::Dos => dos_battery(seed),
            Suite::Capture => capture_battery(seed),
            Suite::All => unreachable!("expanded above"),
        })
        .collect()
}

// -- replay ---------------------------------------------------------------------

fn honest_frames(sim: &Sim, t: MsgType) -> Vec<crate::channel::Frame> {
    sim.channel
        .frames
        .iter()
        .filter(|f| f.msg_type == t && f.origin == Origin::Honest)
        .cloned()
        .collect()
}

pub fn replay_battery(seed: u64) -> Result<SuiteReport, SimError> {
    let mut sim = reference_world("replay", seed, 3, false)?;
    let mut out = Vec::new();

    // enrollment requests, back to the GSS
    for f in honest_frames(&sim, MsgType::EnrollM1) {
        out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, None, "replay_enroll_m1")?);
    }
    // enrollment replies, into a fresh enrollment of the same drone
    for f in honest_frames(&sim, MsgType::EnrollM2) {
        sim.begin_enroll(f.to).map_err(|e| SimError::Script(e.to_string()))?;
        out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, None, "replay_enroll_m2")?);
        sim.abort_enroll(f.to);
    }
    // stale MAKE openers, to the original responder and rerouted
    let m1s = honest_frames(&sim, MsgType::MakeM1);
    for f in &m1s {
        out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, None, "replay_stale_make_m1")?);
        let other = if f.to == Id32(3) { Id32(1) } else { Id32(3) };
        if other != f.from {
            out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, Some(other), "replay_rerouted_make_m1")?);
        }
    }
    // stale MAKE replies, into a fresh session of the same pair
    for v in VARIANTS {
        sim.begin_make(v.initiator, v.responder)
            .map_err(|e| SimError::Script(e.to_string()))?;
        for f in honest_frames(&sim, MsgType::MakeM2) {
            if f.from == v.responder && f.to == v.initiator {
                out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, None, "replay_stale_make_m2")?);
            }
        }
        sim.abort_make(v.initiator, v.responder);
    }
    Ok(finish(Suite::Replay, seed, out, Vec::new(), false))
}

// -- mitm -----------------------------------------------------------------------

fn field_positions(rng: &mut ChaCha20Rng, t: MsgType) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, at, len) in Payload::fields(t) {
        let bits = len * 8;
        let picks: Vec<usize> = if bits <= BITS_PER_FIELD {
            (0..bits).collect()
        } else {
            let mut v = sample(rng, bits, BITS_PER_FIELD).into_vec();
            v.sort_unstable();
            v
        };
        out.extend(picks.into_iter().map(|p| (name.to_string(), at * 8 + p)));
    }
    out
}

pub fn mitm_battery(seed: u64) -> Result<SuiteReport, SimError> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "mitm", 0));
    let mut out = Vec::new();

    let make_base = reference_world("mitm", seed, 1, false)?;
    for v in VARIANTS {
        for t in [MsgType::MakeM1, MsgType::MakeM2] {
            let recipient = if t == MsgType::MakeM1 { v.responder } else { v.initiator };
            for (field, bit) in field_positions(&mut rng, t) {
                let mut sim = make_base.clone();
                let sid = sim.next_session_id();
                sim.arm(FrameSel::Session { session: sid, msg_type: t }, Some(vec![bit]));
                let r = sim.make_session(v.initiator, v.responder);
                let rejected = !r.success || r.retried;
                out.push(AttackOutcome {
                    scenario: v.label.to_string(),
                    attack: format!("mitm_{t}.{field}[{bit}]"),
                    target: recipient,
                    result: verdict(rejected),
                    attribution: r.failure.unwrap_or_default(),
                    gated: false,
                    victim_cost: VictimCost::default(),
                });
            }
        }
    }

    // drone 3 joins with two peers already enrolled
    let enroll_base = Sim::new(reference_config("mitm", false, false), seed)?;
    for t in [MsgType::EnrollM1, MsgType::EnrollM2] {
        let recipient = if t == MsgType::EnrollM1 { GSS } else { Id32(3) };
        for (field, bit) in field_positions(&mut rng, t) {
            let mut sim = enroll_base.clone();
            let sid = sim.next_session_id();
            sim.arm(FrameSel::Session { session: sid, msg_type: t }, Some(vec![bit]));
            let r = sim.enroll(Id32(3), iod_core::entities::DomainId(DOMAIN))?;
            let rejected = !r.success || r.attempts > 1;
            out.push(AttackOutcome {
                scenario: "enrollment".into(),
                attack: format!("mitm_{t}.{field}[{bit}]"),
                target: recipient,
                result: verdict(rejected),
                attribution: r.failure.unwrap_or_default(),
                gated: false,
                victim_cost: VictimCost::default(),
            });
        }
    }
    Ok(finish(Suite::Mitm, seed, out, Vec::new(), false))
}

fn verdict(rejected: bool) -> AttackResult {
    if rejected {
        AttackResult::Rejected
    } else {
        AttackResult::Accepted
    }
}

// -- impersonation ----------------------------------------------------------------

fn forged_make_m1(rng: &mut ChaCha20Rng, claimed: Id32) -> Vec<u8> {
    Payload::MakeM1(MakeM1 {
        sender_id: claimed,
        x_star: Block256::random(rng),
        cred: Block256::random(rng),
    })
    .encode()
}

fn forged_make_m2(rng: &mut ChaCha20Rng) -> Vec<u8> {
    Payload::MakeM2(MakeM2 {
        x_star: Block256::random(rng),
        cred: Block256::random(rng),
    })
    .encode()
}

/// Well-formed request under the GSS's public key, with an
/// adversary-chosen secret.
fn forged_enroll_m1(sim: &Sim, rng: &mut ChaCha20Rng, claimed: Id32) -> Vec<u8> {
    let pk = sim.gss(GSS).expect("reference GSS").keys.public;
    let secret = Block256::random(rng);
    Payload::EnrollM1(EnrollM1 {
        id_a: claimed,
        n_a: Block256::random(rng),
        e_ag: asym_encrypt(&secret, &pk, rng),
    })
    .encode()
}

pub fn impersonation_battery(seed: u64) -> Result<SuiteReport, SimError> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "impersonation", 0));
    let mut sim = reference_world("impersonation", seed, 2, false)?;
    let mut out = Vec::new();
    let pairs = [
        (Id32(1), Id32(2)),
        (Id32(2), Id32(1)),
        (Id32(1), Id32(3)),
        (Id32(3), Id32(2)),
        (Id32(1), GSS),
        (Id32(3), GSS),
        (GSS, Id32(1)),
        (GSS, Id32(2)),
    ];
    for (claimed, victim) in pairs {
        for _ in 0..FORGERIES {
            let bytes = forged_make_m1(&mut rng, claimed);
            out.push(sim.deliver_adversarial(
                "forged_make_m1",
                victim,
                claimed,
                MsgType::MakeM1,
                bytes,
                Origin::Injected,
            ));
        }
    }
    for v in VARIANTS {
        sim.begin_make(v.initiator, v.responder)
            .map_err(|e| SimError::Script(e.to_string()))?;
        for _ in 0..FORGERIES {
            let bytes = forged_make_m2(&mut rng);
            out.push(sim.deliver_adversarial(
                "forged_make_m2",
                v.initiator,
                v.responder,
                MsgType::MakeM2,
                bytes,
                Origin::Injected,
            ));
        }
        sim.abort_make(v.initiator, v.responder);
    }
    for claimed in [Id32(1), Id32(2), Id32(3)] {
        for _ in 0..FORGERIES {
            let bytes = forged_enroll_m1(&sim, &mut rng, claimed);
            out.push(sim.deliver_adversarial(
                "forged_enroll_m1",
                GSS,
                claimed,
                MsgType::EnrollM1,
                bytes,
                Origin::Injected,
            ));
        }
    }
    for drone in [Id32(2), Id32(3)] {
        sim.begin_enroll(drone).map_err(|e| SimError::Script(e.to_string()))?;
        for _ in 0..FORGERIES {
            let bytes = Payload::EnrollM2(EnrollM2 {
                x_ba: Block256::random(&mut rng),
                id_b: Id32(1),
                cred_g: Block256::random(&mut rng),
            })
            .encode();
            out.push(sim.deliver_adversarial(
                "forged_enroll_m2",
                drone,
                GSS,
                MsgType::EnrollM2,
                bytes,
                Origin::Injected,
            ));
        }
        sim.abort_enroll(drone);
    }
    Ok(finish(Suite::Impersonation, seed, out, Vec::new(), false))
}

// -- dos ------------------------------------------------------------------------

/// Floods confirmed parties with forged and stale frames and checks the
/// incremental cost of every rejection.
pub fn dos_battery(seed: u64) -> Result<SuiteReport, SimError> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "dos", 0));
    let mut out = Vec::new();
    for gated in [true, false] {
        let label = if gated { "dos_gated" } else { "dos_ungated" };
        let mut sim = reference_world(label, seed, 2, gated)?;
        for (claimed, victim) in [(Id32(1), GSS), (Id32(2), GSS), (Id32(1), Id32(2)), (Id32(2), Id32(1)), (GSS, Id32(1))] {
            for _ in 0..FORGERIES {
                let bytes = forged_make_m1(&mut rng, claimed);
                out.push(sim.deliver_adversarial(
                    "flood_make_m1",
                    victim,
                    claimed,
                    MsgType::MakeM1,
                    bytes,
                    Origin::Injected,
                ));
            }
        }
        for _ in 0..FORGERIES {
            let bytes = forged_enroll_m1(&sim, &mut rng, Id32(1));
            out.push(sim.deliver_adversarial(
                "flood_enroll_m1",
                GSS,
                Id32(1),
                MsgType::EnrollM1,
                bytes,
                Origin::Injected,
            ));
        }
        for f in honest_frames(&sim, MsgType::MakeM1) {
            out.push(sim.replay(&FrameSel::Seq { seq: f.seq }, None, "flood_stale_make_m1")?);
        }
        for o in out.iter_mut() {
            if o.scenario.is_empty() || o.scenario == "dos" {
                o.scenario = label.to_string();
            }
        }
    }
    Ok(finish(Suite::Dos, seed, out, Vec::new(), true))
}

// -- capture --------------------------------------------------------------------

/// Captures each role after [`CAPTURE_AT`] sessions with its peer, then runs
/// one more session, at both capture levels. The mixed variant first runs
/// one session on each of the victim's other chains, so that no challenge
/// from enrollment time is still stored at capture.
pub fn capture_battery(seed: u64) -> Result<SuiteReport, SimError> {
    let mut findings = Vec::new();
    let roles = [
        ("d2d_holder", Id32(2), Id32(1)),
        ("d2d_generator", Id32(1), Id32(2)),
        ("d2g_drone", Id32(1), GSS),
    ];
    for mixed in [false, true] {
        for (label, victim, peer) in roles {
            for oracle in [false, true] {
                findings.push(capture_scenario(label, seed, victim, peer, oracle, mixed)?);
            }
        }
    }
    Ok(finish(Suite::Capture, seed, Vec::new(), findings, false))
}

pub fn capture_scenario(
    label: &str,
    seed: u64,
    victim: Id32,
    peer: Id32,
    puf_oracle: bool,
    mixed: bool,
) -> Result<PfsFinding, SimError> {
    let name = if mixed { format!("{label}_mixed") } else { label.to_string() };
    let mut sim = Sim::new(reference_config(&name, false, false), seed)?;
    if mixed {
        let others: Vec<Id32> = [Id32(1), Id32(2), GSS]
            .into_iter()
            .filter(|o| *o != victim && *o != peer)
            .collect();
        for o in others {
            let r = sim.make_session(victim, o);
            if !r.success {
                return Err(SimError::Script(format!("warm-up session failed: {:?}", r.failure)));
            }
        }
    }
    for i in 0..CAPTURE_AT {
        // alternate directions so both variants feed the history
        let (a, b) = if i % 2 == 0 { (victim, peer) } else { (peer, victim) };
        let r = sim.make_session(a, b);
        if !r.success {
            return Err(SimError::Script(format!("honest session failed: {:?}", r.failure)));
        }
    }
    let cap = sim.capture(victim, puf_oracle);
    sim.make_session(victim, peer);
    Ok(pfs::analyse(&sim, &cap))
}
