//! Forward-secrecy analysis: what a capture reveals about past session keys.

use serde::{Deserialize, Serialize};

use iod_core::crypto::{Block256, Id32};
use iod_core::messages::Payload;

use crate::knowledge::{KnowledgeBase, DEFAULT_DEPTH};
use crate::world::{CaptureRecord, Sim};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureLevel {
    /// Stored state only.
    MemoryDump,
    /// Stored state plus query access to the device's PUF.
    Full,
}

impl CaptureLevel {
    pub fn from_oracle(puf_oracle: bool) -> Self {
        if puf_oracle {
            CaptureLevel::Full
        } else {
            CaptureLevel::MemoryDump
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfsFinding {
    pub scenario: String,
    pub captured: Id32,
    pub level: CaptureLevel,
    pub after_session: u64,
    /// Sessions of the captured drone completed before the capture.
    pub past_sessions: Vec<u64>,
    /// Past sessions whose key the adversary can derive.
    pub past_leaked: Vec<u64>,
    pub later_sessions: Vec<u64>,
    pub later_derived: Vec<u64>,
    pub rounds: usize,
    pub bounded: bool,
    /// Past sessions derivable once saturation runs to a fixpoint.
    pub past_leaked_fixpoint: Vec<u64>,
}

impl PfsFinding {
    pub fn holds(&self) -> bool {
        self.past_leaked.is_empty() && self.past_leaked_fixpoint.is_empty()
    }
}

/// Every 256-bit field of every frame on the air.
pub fn observed_blocks(sim: &Sim) -> Vec<Block256> {
    let mut out = Vec::new();
    for f in &sim.channel.frames {
        for (_, at, len) in Payload::fields(f.msg_type) {
            if *len == 32 && at + len <= f.bytes.len() {
                out.push(Block256(f.bytes[*at..at + len].try_into().expect("32 bytes")));
            }
        }
    }
    out
}

/// Seeds a knowledge base with the full transcript and the captured state,
/// saturates it, and checks each session key of the captured drone.
pub fn analyse(sim: &Sim, capture: &CaptureRecord) -> PfsFinding {
    let mut kb = KnowledgeBase::from_audit(&sim.audit());
    for b in observed_blocks(sim) {
        kb.learn(b);
    }
    for b in capture.snapshot.blocks() {
        kb.learn(b);
    }
    if capture.puf_oracle {
        kb.grant_puf_oracle(capture.entity);
    }
    let closure = kb.close(Some(DEFAULT_DEPTH));
    let mut f = PfsFinding {
        scenario: sim.scenario_label.clone(),
        captured: capture.entity,
        level: CaptureLevel::from_oracle(capture.puf_oracle),
        after_session: capture.after_session,
        past_sessions: Vec::new(),
        past_leaked: Vec::new(),
        later_sessions: Vec::new(),
        later_derived: Vec::new(),
        rounds: closure.rounds,
        bounded: closure.bounded,
        past_leaked_fixpoint: Vec::new(),
    };
    let mut relevant = Vec::new();
    for s in &sim.sessions {
        if !s.success || (s.initiator != capture.entity && s.responder != capture.entity) {
            continue;
        }
        let keys = [s.initiator_key, s.responder_key];
        let known = keys.iter().flatten().any(|k| kb.knows(k));
        relevant.push((s.session_id, keys));
        if s.session_id <= capture.after_session {
            f.past_sessions.push(s.session_id);
            if known {
                f.past_leaked.push(s.session_id);
            }
        } else {
            f.later_sessions.push(s.session_id);
            if known {
                f.later_derived.push(s.session_id);
            }
        }
    }
    if closure.bounded {
        kb.close(None);
    }
    for (id, keys) in relevant {
        if id <= capture.after_session && keys.iter().flatten().any(|k| kb.knows(k)) {
            f.past_leaked_fixpoint.push(id);
        }
    }
    f
}
