//! Simulated wireless channel. The channel, not the sender, attaches the
//! physical envelope, so a frame always carries its real emitter's RF
//! signature whatever id the payload claims.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use iod_core::crypto::Id32;
use iod_core::messages::{MsgType, Payload};
use iod_core::rffi::{emit_sample, Fingerprint, RffSample};

/// Ground-truth id used for envelopes the adversary emits.
pub const ADVERSARY: Id32 = Id32(u32::MAX);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Honest,
    Replay,
    Modified,
    Injected,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub seq: u64,
    pub step: u64,
    pub session_id: u64,
    pub emitter: Id32,
    /// Header sender; unauthenticated metadata.
    pub from: Id32,
    pub to: Id32,
    pub msg_type: MsgType,
    pub bytes: Vec<u8>,
    pub envelope: RffSample,
    pub origin: Origin,
}

impl Frame {
    pub fn payload(&self) -> Result<Payload, iod_core::messages::DecodeError> {
        Payload::decode(self.msg_type, &self.bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub session_id: u64,
    pub seq: u64,
    pub direction: String,
    pub msg_type: MsgType,
    pub fields: BTreeMap<String, String>,
    pub bits: u64,
    pub origin: Origin,
}

#[derive(Clone, Debug)]
pub struct Channel {
    next_seq: u64,
    pub step: u64,
    noise_sigma: f64,
    rng: ChaCha20Rng,
    /// Everything ever put on the air; the adversary sees all of it.
    pub frames: Vec<Frame>,
    pub transcript: Vec<TranscriptEntry>,
}

fn label(id: Id32) -> String {
    if id == ADVERSARY {
        "adv".into()
    } else {
        id.0.to_string()
    }
}

impl Channel {
    pub fn new(noise_sigma: f64, rng: ChaCha20Rng) -> Self {
        Channel {
            next_seq: 0,
            step: 0,
            noise_sigma,
            rng,
            frames: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// A fresh envelope from `fp`, bound to its real emitter.
    pub fn envelope(&mut self, fp: &Fingerprint, emitter: Id32) -> RffSample {
        emit_sample(fp, self.noise_sigma, &mut self.rng).bind_emitter(emitter)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn transmit(
        &mut self,
        fp: &Fingerprint,
        emitter: Id32,
        from: Id32,
        to: Id32,
        session_id: u64,
        msg_type: MsgType,
        bytes: Vec<u8>,
        origin: Origin,
    ) -> Frame {
        let envelope = self.envelope(fp, emitter);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.step += 1;
        let frame = Frame {
            seq,
            step: self.step,
            session_id,
            emitter,
            from,
            to,
            msg_type,
            bytes,
            envelope,
            origin,
        };
        assert_eq!(
            frame.envelope.ground_truth_emitter(),
            Some(emitter),
            "envelope bound to the wrong transmitter"
        );
        self.transcript.push(TranscriptEntry {
            session_id,
            seq,
            direction: format!("{}->{}", label(emitter), label(to)),
            msg_type,
            fields: Payload::fields(msg_type)
                .iter()
                .filter(|(_, at, len)| at + len <= frame.bytes.len())
                .map(|(name, at, len)| (name.to_string(), hex::encode(&frame.bytes[*at..at + len])))
                .collect(),
            bits: accounted_bits(msg_type, &frame.bytes),
            origin,
        });
        self.frames.push(frame.clone());
        frame
    }

    pub fn frame(&self, seq: u64) -> Option<&Frame> {
        self.frames.get(seq as usize)
    }

    pub fn transcript_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.transcript {
            out.push_str(&serde_json::to_string(e).expect("transcript entries serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn accounted_bits(msg_type: MsgType, bytes: &[u8]) -> u64 {
    Payload::decode(msg_type, bytes)
        .map(|p| p.accounted_bits())
        .unwrap_or(bytes.len() as u64 * 8)
}
