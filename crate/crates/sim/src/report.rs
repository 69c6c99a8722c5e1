//! Run reports and the per-run invariant checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use iod_core::crypto::Block256;
use iod_core::metrics::{self, reference, Counters, CostReport, MakeRow, Phase, StorageRow};
use iod_core::protocol::{ProfileKind, Role};

use crate::config::ScenarioConfig;
use crate::pfs::{self, PfsFinding};
use crate::world::{AttackOutcome, AttackResult, CaptureRecord, EnrollRecord, MakeRecord, Sim, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub enrollments: Vec<EnrollRecord>,
    pub sessions: Vec<MakeRecord>,
    pub attacks: Vec<AttackOutcome>,
    pub captures: Vec<CaptureRecord>,
    pub pfs: Vec<PfsFinding>,
    pub cost: CostReport,
    pub transcript_sha256: String,
}

impl RunReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub transcript: String,
    pub sim: Sim,
}

pub fn variant_label(kind: ProfileKind, initiator: Role) -> String {
    let k = match kind {
        ProfileKind::D2D => "D2D",
        ProfileKind::D2G => "D2G",
    };
    let r = match initiator {
        Role::Holder => "holder-initiated",
        Role::Generator => "generator-initiated",
    };
    format!("{k} {r}")
}

pub fn reference_ops(kind: ProfileKind) -> (u64, u64) {
    match kind {
        ProfileKind::D2D => reference::D2D_PER_PARTY_OPS,
        ProfileKind::D2G => reference::D2G_PER_PARTY_OPS,
    }
}

fn make_rows(sessions: &[MakeRecord]) -> Vec<MakeRow> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for s in sessions.iter().filter(|s| s.clean()) {
        let label = variant_label(s.kind, s.initiator_role);
        if !seen.insert(label.clone()) {
            continue;
        }
        let (p, h) = reference_ops(s.kind);
        rows.push(MakeRow {
            label,
            messages: s.messages,
            initiator_bits: s.initiator_ops.bits_sent,
            responder_bits: s.responder_ops.bits_sent,
            total_bits: s.initiator_ops.bits_sent + s.responder_ops.bits_sent,
            initiator_ops: s.initiator_ops.op_formula(),
            responder_ops: s.responder_ops.op_formula(),
            reference_total_bits: reference::MAKE_TOTAL_BITS,
            reference_ops: format!("{}T_PUF+{}T_H", 2 * p, 2 * h),
        });
    }
    rows
}

fn storage_rows(sim: &Sim) -> Vec<StorageRow> {
    let mut rows = Vec::new();
    // first holder/generator pair found
    'outer: for e in sim.entities.values() {
        let Some(d) = e.node.drone() else { continue };
        for (peer, chain) in &d.peer_slots {
            if chain.current.wrapped.is_none() {
                continue;
            }
            let holder = d.d2d_storage_bits(*peer).unwrap_or(0);
            let generator = sim
                .drone(*peer)
                .and_then(|p| p.d2d_storage_bits(d.id))
                .unwrap_or(0);
            rows.push(StorageRow {
                label: "D2D".into(),
                drone_a_bits: holder,
                peer_bits: generator.to_string(),
                reference_drone_a: reference::D2D_STORAGE_HOLDER.to_string(),
                reference_peer: reference::D2D_STORAGE_GENERATOR.to_string(),
                gated: true,
            });
            break 'outer;
        }
    }
    for e in sim.entities.values() {
        let Some(d) = e.node.drone() else { continue };
        let (Some(bits), Some(g)) = (d.d2g_storage_bits(), d.gss_id()) else {
            continue;
        };
        let gss = sim.gss(g).and_then(|g| g.d2g_storage_bits(d.id)).unwrap_or(0);
        rows.push(StorageRow {
            label: "D2G".into(),
            drone_a_bits: bits,
            peer_bits: format!("S_RFF+{gss}"),
            reference_drone_a: reference::D2G_STORAGE_DRONE.to_string(),
            reference_peer: format!("S_RFF+{}", reference::D2G_STORAGE_GSS_FIXED),
            gated: false,
        });
        break;
    }
    rows
}

/// Pads used twice by the same party.
pub fn duplicate_pads(sim: &Sim) -> usize {
    let mut dups = 0;
    for e in sim.entities.values() {
        let mut seen = BTreeSet::new();
        for p in &e.node.meter_ref().audit.pads {
            if !seen.insert(p.pad) {
                dups += 1;
            }
        }
    }
    dups
}

/// Within a rejected frame's handling: no asymmetric work, no reply, and
/// no PUF work at all behind the RFFI gate.
pub fn dos_bound_holds(a: &AttackOutcome) -> bool {
    let c = &a.victim_cost;
    if a.result != AttackResult::Rejected {
        return true;
    }
    if c.asym_ops != 0 || c.bits_sent != 0 {
        return false;
    }
    if a.gated {
        c.puf_evals == 0
    } else {
        c.puf_evals <= 1 && c.hash_evals <= 3
    }
}

fn ops_match(c: &Counters, (p, h): (u64, u64)) -> bool {
    c.puf_evals == p && c.hash_evals == h
}

fn run_checks(sim: &Sim, pfs: &[PfsFinding]) -> Vec<Check> {
    let cfg = &sim.config;
    let expected: BTreeSet<u64> = cfg.expect_failures.iter().copied().collect();
    let mut out = Vec::new();

    let bad: Vec<u64> = sim
        .sessions
        .iter()
        .filter(|s| s.success && s.initiator_key != s.responder_key)
        .map(|s| s.session_id)
        .collect();
    out.push(check("key_agreement", bad.is_empty(), format!("mismatched sessions: {bad:?}")));

    let unexpected: Vec<u64> = sim
        .sessions
        .iter()
        .filter(|s| !s.success && !expected.contains(&s.session_id))
        .map(|s| s.session_id)
        .chain(
            sim.enrollments
                .iter()
                .filter(|e| !e.success && !expected.contains(&e.session_id))
                .map(|e| e.session_id),
        )
        .collect();
    let missing: Vec<u64> = expected
        .iter()
        .copied()
        .filter(|id| {
            sim.sessions.iter().any(|s| s.session_id == *id && s.success)
                || sim.enrollments.iter().any(|e| e.session_id == *id && e.success)
        })
        .collect();
    out.push(check(
        "expected_outcomes",
        unexpected.is_empty() && missing.is_empty(),
        format!("unexpected failures {unexpected:?}, expected failures that succeeded {missing:?}"),
    ));

    let clean: Vec<&MakeRecord> = sim.sessions.iter().filter(|s| s.clean()).collect();
    let bad: Vec<u64> = clean
        .iter()
        .filter(|s| {
            let r = reference_ops(s.kind);
            !ops_match(&s.initiator_ops, r) || !ops_match(&s.responder_ops, r)
        })
        .map(|s| s.session_id)
        .collect();
    out.push(check(
        "make_op_counts",
        bad.is_empty(),
        format!("{} clean sessions, off-reference: {bad:?}", clean.len()),
    ));

    let bad: Vec<u64> = clean
        .iter()
        .filter(|s| {
            s.messages != reference::MAKE_MESSAGES
                || s.initiator_ops.bits_sent != reference::MAKE_INITIATOR_BITS
                || s.responder_ops.bits_sent != reference::MAKE_RESPONDER_BITS
        })
        .map(|s| s.session_id)
        .collect();
    out.push(check(
        "make_messages_and_bits",
        bad.is_empty(),
        format!("sessions off 2 messages / 544+512 bits: {bad:?}"),
    ));

    let dups = duplicate_pads(sim);
    let lossy = sim.sessions.iter().any(|s| s.interfered || s.retried);
    out.push(check(
        "pad_uniqueness",
        dups == 0 || lossy,
        if lossy && dups > 0 {
            format!("{dups} reused pads after scripted loss (exempt)")
        } else {
            format!("{dups} reused pads")
        },
    ));

    let mut keys = BTreeSet::new();
    let mut repeated = 0;
    for s in sim.sessions.iter().filter(|s| s.success) {
        if let Some(k) = s.initiator_key {
            if !keys.insert(k) {
                repeated += 1;
            }
        }
    }
    out.push(check("session_keys_distinct", repeated == 0, format!("{repeated} repeated keys")));

    let audit = sim.audit();
    let secrets: BTreeSet<Block256> = audit
        .secrets
        .iter()
        .chain(&audit.session_keys)
        .copied()
        .collect();
    let mut at_rest = 0;
    for e in sim.entities.values() {
        if let Some(d) = e.node.drone() {
            at_rest += d.snapshot().blocks().iter().filter(|b| secrets.contains(b)).count();
        }
        if let Some(g) = e.node.gss() {
            for r in g.records.values() {
                let c = &r.chain;
                for ep in std::iter::once(&c.current).chain(&c.previous) {
                    at_rest += std::iter::once(ep.challenge)
                        .chain(ep.wrapped)
                        .chain(std::iter::once(r.nonce))
                        .filter(|b| secrets.contains(b))
                        .count();
                }
            }
        }
    }
    out.push(check("no_secret_at_rest", at_rest == 0, format!("{at_rest} stored blocks equal a secret")));

    let bad = sim
        .channel
        .frames
        .iter()
        .filter(|f| f.envelope.ground_truth_emitter() != Some(f.emitter))
        .count();
    out.push(check(
        "envelope_integrity",
        bad == 0,
        format!("{} frames, {bad} with foreign envelopes", sim.channel.frames.len()),
    ));

    out.push(check(
        "bit_conservation",
        sim.honest_bits_delivered == sim.honest_bits_received,
        format!(
            "delivered {} bits, received {} bits",
            sim.honest_bits_delivered, sim.honest_bits_received
        ),
    ));

    let mut unused = Counters::default();
    let mut mac_outside_data = 0;
    for e in sim.entities.values() {
        let l = &e.node.meter_ref().ledger;
        unused += l.total();
        for (phase, c) in l.phases() {
            if *phase != Phase::Data {
                mac_outside_data += c.mac;
            }
        }
    }
    let extra = unused.random_shuffle + unused.mod_exp + unused.sign + unused.verify;
    out.push(check(
        "unused_operations_zero",
        extra == 0 && mac_outside_data == 0,
        format!("T_RS/T_ME/T_Sig/T_Verf total {extra}, MAC outside data phase {mac_outside_data}"),
    ));

    let accepted: Vec<String> = sim
        .attacks
        .iter()
        .filter(|a| a.result == AttackResult::Accepted)
        .map(|a| format!("{} -> {}", a.attack, a.target))
        .collect();
    out.push(check(
        "adversarial_frames_rejected",
        accepted.is_empty(),
        format!("{} frames, accepted: {accepted:?}", sim.attacks.len()),
    ));

    let bad = sim.attacks.iter().filter(|a| !dos_bound_holds(a)).count();
    out.push(check("dos_cost_bound", bad == 0, format!("{bad} rejections over budget")));

    for f in pfs {
        out.push(check(
            &format!("forward_secrecy_{}_{:?}", f.captured, f.level).to_lowercase(),
            f.holds(),
            format!(
                "past sessions {:?}, derivable {:?}; later derivable {:?}",
                f.past_sessions, f.past_leaked, f.later_derived
            ),
        ));
    }
    out
}

pub fn cost_report(sim: &Sim) -> CostReport {
    let ledgers = sim
        .entities
        .values()
        .map(|e| (e.id().to_string(), &e.node.meter_ref().ledger));
    metrics::report(ledgers, make_rows(&sim.sessions), storage_rows(sim))
}

/// Executes a scenario and assembles its report.
pub fn run_simulation(config: &ScenarioConfig, seed: u64) -> Result<RunOutput, SimError> {
    let mut sim = Sim::new(config.clone(), seed)?;
    sim.run_plan()?;
    let pfs: Vec<PfsFinding> = sim.captures.iter().map(|c| pfs::analyse(&sim, c)).collect();
    let checks = run_checks(&sim, &pfs);
    let transcript = sim.channel.transcript_jsonl();
    let report = RunReport {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        scenario: config.name.clone(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
        enrollments: sim.enrollments.clone(),
        sessions: sim.sessions.clone(),
        attacks: sim.attacks.clone(),
        captures: sim.captures.clone(),
        pfs,
        cost: cost_report(&sim),
        transcript_sha256: hex::encode(Sha256::digest(transcript.as_bytes())),
    };
    Ok(RunOutput {
        report,
        transcript,
        sim,
    })
}

/// Counts of `(kind, initiator role)` among clean sessions.
pub fn variant_counts(sessions: &[MakeRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.clean()) {
        *m.entry(variant_label(s.kind, s.initiator_role)).or_insert(0) += 1;
    }
    m
}

