//! Metered access to primitives. Every protocol-path hash, PUF evaluation
//! and public-key operation goes through a [`Meter`], which increments the
//! owner's [`CostLedger`] and appends to a ground-truth [`Audit`] trail.
//!
//! The audit trail is simulator instrumentation. It is not entity state and
//! never appears in snapshots.

use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::crypto::{self, AsymCiphertext, AsymKeyPair, AsymPublicKey, Block256, CryptoError, Id32, Tag};
use crate::metrics::{CostLedger, OpKind, Phase};
use crate::puf::PufDevice;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRecord {
    pub x: Vec<u8>,
    pub y: Vec<u8>,
    pub out: Block256,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PufRecord {
    pub device: Id32,
    pub challenge: Block256,
    pub response: Block256,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadKind {
    /// OTP key wrapping a stored secret.
    WrapKey,
    /// `H(s, 1)` mask on the first MAKE message.
    MaskOne,
    /// `H(s, 2)` mask on the second MAKE message.
    MaskTwo,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub owner: Id32,
    pub kind: PadKind,
    pub pad: Block256,
}

/// `out = a ⊕ b`, as computed by an honest party.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct XorRecord {
    pub a: Block256,
    pub b: Block256,
    pub out: Block256,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsymRecord {
    pub recipient: AsymPublicKey,
    pub ciphertext: Vec<u8>,
    pub plaintext: Block256,
}

/// Ground truth collected while an entity runs the protocol.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub hashes: Vec<HashRecord>,
    pub pufs: Vec<PufRecord>,
    pub pads: Vec<PadRecord>,
    pub encryptions: Vec<AsymRecord>,
    pub xors: Vec<XorRecord>,
    /// Fresh random draws (challenges and nonces).
    pub randoms: Vec<Block256>,
    /// Every shared secret minted or unwrapped.
    pub secrets: Vec<Block256>,
    pub session_keys: Vec<Block256>,
}

impl Audit {
    pub fn merge(&mut self, other: &Audit) {
        self.hashes.extend_from_slice(&other.hashes);
        self.pufs.extend_from_slice(&other.pufs);
        self.pads.extend_from_slice(&other.pads);
        self.encryptions.extend_from_slice(&other.encryptions);
        self.xors.extend_from_slice(&other.xors);
        self.randoms.extend_from_slice(&other.randoms);
        self.secrets.extend_from_slice(&other.secrets);
        self.session_keys.extend_from_slice(&other.session_keys);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Meter {
    owner: Id32,
    phase: Option<Phase>,
    pub ledger: CostLedger,
    pub audit: Audit,
}

impl Meter {
    pub fn new(owner: Id32) -> Self {
        Meter {
            owner,
            ..Default::default()
        }
    }

    pub fn owner(&self) -> Id32 {
        self.owner
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = Some(phase);
    }

    pub fn phase(&self) -> Phase {
        self.phase.unwrap_or(Phase::Make)
    }

    fn record(&mut self, kind: OpKind) {
        let phase = self.phase();
        self.ledger.record(kind, phase);
    }

    pub fn hash2(&mut self, x: &[u8], y: &[u8]) -> Block256 {
        self.record(OpKind::Hash);
        let out = crypto::hash2(x, y);
        self.audit.hashes.push(HashRecord {
            x: x.to_vec(),
            y: y.to_vec(),
            out,
        });
        out
    }

    pub fn hash_tagged(&mut self, s: &Block256, tag: Tag) -> Block256 {
        self.hash2(s.as_bytes(), &[tag.byte()])
    }

    /// Protocol-path PUF read: always the noiseless response.
    pub fn puf(&mut self, device: &PufDevice, c: &Block256) -> Block256 {
        self.record(OpKind::Puf);
        let response = device.response(c);
        self.audit.pufs.push(PufRecord {
            device: self.owner,
            challenge: *c,
            response,
        });
        response
    }

    pub fn asym_encrypt<R: RngCore + ?Sized>(
        &mut self,
        m: &Block256,
        pk: &AsymPublicKey,
        rng: &mut R,
    ) -> AsymCiphertext {
        self.record(OpKind::AsymEnc);
        let c = crypto::asym_encrypt(m, pk, rng);
        self.audit.encryptions.push(AsymRecord {
            recipient: *pk,
            ciphertext: c.to_bytes().to_vec(),
            plaintext: *m,
        });
        c
    }

    pub fn asym_decrypt(
        &mut self,
        c: &AsymCiphertext,
        keys: &AsymKeyPair,
    ) -> Result<Block256, CryptoError> {
        self.record(OpKind::AsymDec);
        crypto::asym_decrypt(c, keys)
    }

    /// HMAC-SHA256 used for key-confirmation tags.
    pub fn mac(&mut self, key: &Block256, data: &[u8]) -> Block256 {
        self.record(OpKind::Mac);
        let mut mac =
            Hmac::<Sha256>::new_from_slice(key.as_bytes()).expect("HMAC accepts any key length");
        mac.update(data);
        Block256(mac.finalize().into_bytes().into())
    }

    /// Not a costed operation; logged so deductions can trace XOR structure.
    pub fn xor(&mut self, a: &Block256, b: &Block256) -> Block256 {
        let out = *a ^ *b;
        self.audit.xors.push(XorRecord { a: *a, b: *b, out });
        out
    }

    pub fn random<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> Block256 {
        let v = Block256::random(rng);
        self.audit.randoms.push(v);
        v
    }

    pub fn note_pad(&mut self, kind: PadKind, pad: Block256) {
        self.audit.pads.push(PadRecord {
            owner: self.owner,
            kind,
            pad,
        });
    }

    pub fn note_secret(&mut self, s: Block256) {
        self.audit.secrets.push(s);
    }

    pub fn note_session_key(&mut self, sk: Block256) {
        self.audit.session_keys.push(sk);
    }

    pub fn record_sent(&mut self, bits: u64, phase: Phase) {
        self.ledger.record_sent(bits, phase);
    }

    pub fn record_received(&mut self, bits: u64, phase: Phase) {
        self.ledger.record_received(bits, phase);
    }

    pub fn record_rejection(&mut self, phase: Phase) {
        self.ledger.record_rejection(phase);
    }
}
