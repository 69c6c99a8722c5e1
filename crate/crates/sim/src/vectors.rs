//! Reference vectors for reimplementations: primitive test vectors plus the
//! transcript of one honest reference run.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use iod_core::crypto::{
    asym_decrypt, asym_encrypt, asym_keygen, encode_inputs, hash2, hash_tagged, xor_mask, Block256,
    Id32, Tag,
};
use iod_core::puf::PufDevice;

use crate::attacks::{reference_config, GSS};
use crate::channel::TranscriptEntry;
use crate::world::{Sim, SimError};

pub const VECTOR_SEED: u64 = 2024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub name: String,
    pub inputs: Vec<(String, String)>,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFile {
    pub schema_version: u32,
    pub hash: String,
    pub crypto: Vec<Vector>,
    pub protocol_seed: u64,
    pub transcript: Vec<TranscriptEntry>,
    pub session_keys: Vec<String>,
}

impl VectorFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vectors serialize") + "\n"
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn v(name: &str, inputs: &[(&str, String)], output: String) -> Vector {
    Vector {
        name: name.to_string(),
        inputs: inputs.iter().map(|(k, x)| (k.to_string(), x.clone())).collect(),
        output,
    }
}

fn crypto_vectors() -> Vec<Vector> {
    let mut rng = ChaCha20Rng::seed_from_u64(VECTOR_SEED);
    let a = Block256::random(&mut rng);
    let b = Block256::random(&mut rng);
    let id = Id32(0x0102_0304);
    let mut out = vec![
        v(
            "encode_inputs",
            &[("x", hex::encode([0xaa])), ("y", hex::encode(id.to_bytes()))],
            hex::encode(encode_inputs(&[&[0xaa], &id.to_bytes()]).expect("short inputs")),
        ),
        v(
            "hash2_bytes",
            &[("x", hex::encode(b"abc")), ("y", hex::encode([0x01]))],
            hash2(b"abc", &[0x01]).to_hex(),
        ),
        v(
            "hash2_block_id",
            &[("x", a.to_hex()), ("y", hex::encode(id.to_bytes()))],
            hash2(a.as_bytes(), &id.to_bytes()).to_hex(),
        ),
        v(
            "hash2_block_block",
            &[("x", a.to_hex()), ("y", b.to_hex())],
            hash2(a.as_bytes(), b.as_bytes()).to_hex(),
        ),
        v("hash_tagged_1", &[("s", a.to_hex())], hash_tagged(&a, Tag::One).to_hex()),
        v("hash_tagged_2", &[("s", a.to_hex())], hash_tagged(&a, Tag::Two).to_hex()),
        v("xor", &[("a", a.to_hex()), ("b", b.to_hex())], xor_mask(&a, &b).to_hex()),
    ];
    let keys = asym_keygen(&mut rng);
    let ct = asym_encrypt(&a, &keys.public, &mut rng);
    assert_eq!(asym_decrypt(&ct, &keys).expect("own ciphertext"), a);
    out.push(v(
        "ecies_x25519",
        &[
            ("secret_key", hex::encode(keys.secret_bytes())),
            ("public_key", hex::encode(keys.public.0)),
            ("plaintext", a.to_hex()),
        ],
        hex::encode(ct.to_bytes()),
    ));
    let puf = PufDevice::noiseless(VECTOR_SEED);
    out.push(v(
        "puf_response",
        &[("device_seed", VECTOR_SEED.to_string()), ("challenge", b.to_hex())],
        puf.response(&b).to_hex(),
    ));
    out
}

/// Enrollment of two drones, then one D2D and one D2G session.
pub fn reference_vectors() -> Result<VectorFile, SimError> {
    let mut sim = Sim::new(reference_config("vectors", false, false), VECTOR_SEED)?;
    let mut keys = Vec::new();
    for (a, b) in [(Id32(2), Id32(1)), (Id32(1), GSS)] {
        let r = sim.make_session(a, b);
        if !r.success {
            return Err(SimError::Script(format!("reference session failed: {:?}", r.failure)));
        }
        keys.extend(r.initiator_key.map(|k| k.to_hex()));
    }
    Ok(VectorFile {
        schema_version: iod_core::metrics::REPORT_SCHEMA_VERSION,
        hash: iod_core::crypto::HASH_NAME.to_string(),
        crypto: crypto_vectors(),
        protocol_seed: VECTOR_SEED,
        transcript: sim.channel.transcript.clone(),
        session_keys: keys,
    })
}
