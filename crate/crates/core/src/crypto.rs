//! Primitives shared by every entity: the length-framed two-input hash,
//! one-time-pad masking, and ECIES-style public-key encryption over X25519.
//!
//! The hash is SHA-256 applied to [`encode_inputs`]. Asymmetric ciphertexts
//! carry a 32-byte ephemeral public key, a 32-byte masked body and a 32-byte
//! HMAC-SHA256 tag over both.

use std::fmt;
use std::ops::{BitXor, BitXorAssign};

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

/// Name of the hash function fixed for this build; printed in report headers.
pub const HASH_NAME: &str = "SHA-256";

const ECIES_INFO: &[u8] = b"iod-ecies-v1";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("hash argument {index} is empty")]
    EmptyArgument { index: usize },
    #[error("hash argument {index} is too long ({len} bytes)")]
    OversizedArgument { index: usize, len: usize },
    #[error("hash tag {0} is not 1 or 2")]
    InvalidTag(u8),
    #[error("asymmetric decryption failed")]
    DecryptFailure,
    #[error("malformed {what}: expected {expected} bytes, got {got}")]
    Malformed {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// A 256-bit value: challenges, responses, nonces, secrets, pads and keys.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Block256(pub [u8; 32]);

impl Block256 {
    pub const BITS: usize = 256;
    pub const ZERO: Block256 = Block256([0u8; 32]);

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Block256(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Bit `i`, MSB-first within each byte.
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 8] ^= 1 << (7 - i % 8);
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|b| b.count_ones()).sum()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
        Self::from_slice(&bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Malformed {
            what: "block",
            expected: 32,
            got: bytes.len(),
        })?;
        Ok(Block256(arr))
    }

    /// Constant-time equality, used for every credential comparison.
    pub fn ct_eq(&self, other: &Block256) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl fmt::Debug for Block256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block256({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Block256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl BitXor for Block256 {
    type Output = Block256;

    fn bitxor(mut self, rhs: Block256) -> Block256 {
        self ^= rhs;
        self
    }
}

impl BitXorAssign for Block256 {
    fn bitxor_assign(&mut self, rhs: Block256) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a ^= b;
        }
    }
}

impl Serialize for Block256 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Block256 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Block256::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// 32-bit entity identifier, compared and hashed as its big-endian bytes.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Id32(pub u32);

impl Id32 {
    pub const BITS: usize = 32;

    pub fn to_bytes(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for Id32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Prefix-free encoding of an argument list: each argument as a 4-byte
/// big-endian length followed by its bytes.
pub fn encode_inputs(args: &[&[u8]]) -> Result<Vec<u8>, CryptoError> {
    let mut out = Vec::with_capacity(args.iter().map(|a| a.len() + 4).sum());
    for (index, arg) in args.iter().enumerate() {
        if arg.is_empty() {
            return Err(CryptoError::EmptyArgument { index });
        }
        let len = u32::try_from(arg.len())
            .map_err(|_| CryptoError::OversizedArgument { index, len: arg.len() })?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(arg);
    }
    Ok(out)
}

/// The protocol's two-input hash `H(x, y)`.
///
/// Panics on empty arguments; every protocol input is a fixed-width id,
/// tag or block.
pub fn hash2(x: &[u8], y: &[u8]) -> Block256 {
    let encoded = encode_inputs(&[x, y]).expect("hash2 arguments are non-empty");
    Block256(Sha256::digest(&encoded).into())
}

/// Domain tags for `H(s, 1)` and `H(s, 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    One = 1,
    Two = 2,
}

impl Tag {
    pub fn byte(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Tag {
    type Error = CryptoError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Tag::One),
            2 => Ok(Tag::Two),
            other => Err(CryptoError::InvalidTag(other)),
        }
    }
}

pub fn hash_tagged(s: &Block256, tag: Tag) -> Block256 {
    hash2(s.as_bytes(), &[tag.byte()])
}

pub fn xor_mask(a: &Block256, b: &Block256) -> Block256 {
    *a ^ *b
}

pub fn random_block<R: RngCore + ?Sized>(rng: &mut R) -> Block256 {
    Block256::random(rng)
}

/// X25519 public key in its 32-byte encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AsymPublicKey(pub [u8; 32]);

impl fmt::Debug for AsymPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AsymPublicKey({}..)", &hex::encode(self.0)[..12])
    }
}

impl Serialize for AsymPublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for AsymPublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let b = Block256::from_hex(&s).map_err(serde::de::Error::custom)?;
        Ok(AsymPublicKey(b.0))
    }
}

pub struct AsymKeyPair {
    pub public: AsymPublicKey,
    secret: StaticSecret,
}

impl AsymKeyPair {
    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = AsymPublicKey(PublicKey::from(&secret).to_bytes());
        AsymKeyPair { public, secret }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

impl Clone for AsymKeyPair {
    fn clone(&self) -> Self {
        AsymKeyPair {
            public: self.public,
            secret: StaticSecret::from(self.secret.to_bytes()),
        }
    }
}

impl fmt::Debug for AsymKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AsymKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn asym_keygen<R: RngCore + ?Sized>(rng: &mut R) -> AsymKeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    AsymKeyPair::from_secret_bytes(seed)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AsymCiphertext {
    pub ephemeral: [u8; 32],
    pub body: Block256,
    pub tag: [u8; 32],
}

impl AsymCiphertext {
    /// Accounted width: ephemeral point plus body. The tag is not counted.
    pub const ACCOUNTED_BITS: usize = 512;
    pub const WIRE_LEN: usize = 96;

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..32].copy_from_slice(&self.ephemeral);
        out[32..64].copy_from_slice(&self.body.0);
        out[64..].copy_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != Self::WIRE_LEN {
            return Err(CryptoError::Malformed {
                what: "ciphertext",
                expected: Self::WIRE_LEN,
                got: bytes.len(),
            });
        }
        let mut ephemeral = [0u8; 32];
        let mut tag = [0u8; 32];
        ephemeral.copy_from_slice(&bytes[..32]);
        tag.copy_from_slice(&bytes[64..]);
        Ok(AsymCiphertext {
            ephemeral,
            body: Block256::from_slice(&bytes[32..64])?,
            tag,
        })
    }
}

fn ecies_keys(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let hk = Hkdf::<Sha256>::new(Some(ephemeral), shared);
    let mut info = Vec::with_capacity(ECIES_INFO.len() + 32);
    info.extend_from_slice(ECIES_INFO);
    info.extend_from_slice(recipient);
    let mut okm = [0u8; 64];
    hk.expand(&info, &mut okm).expect("64 bytes is a valid HKDF output length");
    let mut pad = [0u8; 32];
    let mut mac_key = [0u8; 32];
    pad.copy_from_slice(&okm[..32]);
    mac_key.copy_from_slice(&okm[32..]);
    (pad, mac_key)
}

fn ecies_tag(mac_key: &[u8; 32], ephemeral: &[u8; 32], body: &Block256) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(mac_key).expect("HMAC accepts any key length");
    mac.update(ephemeral);
    mac.update(body.as_bytes());
    mac
}

pub fn asym_encrypt<R: RngCore + ?Sized>(
    m: &Block256,
    pk: &AsymPublicKey,
    rng: &mut R,
) -> AsymCiphertext {
    let mut eph_seed = [0u8; 32];
    rng.fill_bytes(&mut eph_seed);
    let eph = StaticSecret::from(eph_seed);
    let ephemeral = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(pk.0));
    let (pad, mac_key) = ecies_keys(shared.as_bytes(), &ephemeral, &pk.0);
    let body = *m ^ Block256(pad);
    let tag = ecies_tag(&mac_key, &ephemeral, &body).finalize().into_bytes().into();
    AsymCiphertext {
        ephemeral,
        body,
        tag,
    }
}

pub fn asym_decrypt(c: &AsymCiphertext, keys: &AsymKeyPair) -> Result<Block256, CryptoError> {
    let shared = keys.secret.diffie_hellman(&PublicKey::from(c.ephemeral));
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptFailure);
    }
    let (pad, mac_key) = ecies_keys(shared.as_bytes(), &c.ephemeral, &keys.public.0);
    ecies_tag(&mac_key, &c.ephemeral, &c.body)
        .verify_slice(&c.tag)
        .map_err(|_| CryptoError::DecryptFailure)?;
    Ok(c.body ^ Block256(pad))
}

/// Uniform random bits in `[0, n)`, handy for tamper sweeps.
pub fn random_positions<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn encode_single_byte() {
        assert_eq!(encode_inputs(&[&[0xAA]]).unwrap(), vec![0, 0, 0, 1, 0xAA]);
    }

    #[test]
    fn encode_is_framed() {
        let a = encode_inputs(&[&[0xAA], &[0xBB]]).unwrap();
        let b = encode_inputs(&[&[0xAA, 0xBB]]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_two_blocks_length() {
        let mut r = rng(1);
        let (x, y) = (Block256::random(&mut r), Block256::random(&mut r));
        assert_eq!(encode_inputs(&[&x.0, &y.0]).unwrap().len(), 2 * (4 + 32));
    }

    #[test]
    fn encode_rejects_empty() {
        assert_eq!(
            encode_inputs(&[&[1], &[]]),
            Err(CryptoError::EmptyArgument { index: 1 })
        );
    }

    #[test]
    fn hash2_is_order_sensitive() {
        let mut r = rng(2);
        for _ in 0..1000 {
            let (a, b) = (Block256::random(&mut r), Block256::random(&mut r));
            assert_eq!(hash2(&a.0, &b.0), hash2(&a.0, &b.0));
            assert_ne!(hash2(&a.0, &b.0), hash2(&b.0, &a.0));
        }
    }

    // Reference digests computed with Python's hashlib over the framed encoding.
    #[test]
    fn hash2_reference_vectors() {
        assert_eq!(
            hash2(b"abc", &[1]).to_hex(),
            "1059f67288906a4ed1c85cffd6020fc394efdd0c629e630503bca213071f086f"
        );
        let counting: Vec<u8> = (0u8..32).collect();
        assert_eq!(
            hash2(&counting, &Id32(7).to_bytes()).to_hex(),
            "3a102c408d01aca8b0aa030bfa28dc756c0b721e7e72b09c08de64b73cc771d9"
        );
        assert_eq!(
            hash_tagged(&Block256::ZERO, Tag::One).to_hex(),
            "d6d1c4c420bca4f4b56439105ab74eb351d63db542f754cf7d834145538d74b0"
        );
        assert_eq!(
            hash_tagged(&Block256::ZERO, Tag::Two).to_hex(),
            "12f1b216f05214f57c439449b79f4198f115743b8093f4507e70b344f9be18fb"
        );
    }

    #[test]
    fn hash_tagged_definition() {
        let mut r = rng(3);
        for _ in 0..1000 {
            let s = Block256::random(&mut r);
            assert_eq!(hash_tagged(&s, Tag::One), hash2(&s.0, &[0x01]));
            assert_ne!(hash_tagged(&s, Tag::One), hash_tagged(&s, Tag::Two));
        }
        assert_eq!(Tag::try_from(3), Err(CryptoError::InvalidTag(3)));
    }

    #[test]
    fn xor_laws() {
        let mut r = rng(4);
        let (x, k) = (Block256::random(&mut r), Block256::random(&mut r));
        assert_eq!(xor_mask(&x, &Block256::ZERO), x);
        assert_eq!(xor_mask(&xor_mask(&x, &k), &k), x);
        assert_eq!(xor_mask(&x, &x), Block256::ZERO);
    }

    #[test]
    fn ecies_round_trip_and_randomized() {
        let mut r = rng(5);
        let keys = asym_keygen(&mut r);
        let m = Block256::random(&mut r);
        let c1 = asym_encrypt(&m, &keys.public, &mut r);
        let c2 = asym_encrypt(&m, &keys.public, &mut r);
        assert_ne!(c1, c2);
        assert_eq!(asym_decrypt(&c1, &keys).unwrap(), m);
        assert_eq!(asym_decrypt(&c2, &keys).unwrap(), m);
    }

    #[test]
    fn ecies_tamper_sweep() {
        let mut r = rng(6);
        let keys = asym_keygen(&mut r);
        let m = Block256::random(&mut r);
        let c = asym_encrypt(&m, &keys.public, &mut r);
        let bytes = c.to_bytes();
        for pos in random_positions(&mut r, AsymCiphertext::WIRE_LEN * 8, 64) {
            let mut t = bytes;
            t[pos / 8] ^= 1 << (7 - pos % 8);
            let tampered = AsymCiphertext::from_bytes(&t).unwrap();
            assert_eq!(
                asym_decrypt(&tampered, &keys),
                Err(CryptoError::DecryptFailure),
                "bit {pos}"
            );
        }
    }

    #[test]
    fn keygen_determinism() {
        let a = asym_keygen(&mut rng(7));
        let b = asym_keygen(&mut rng(7));
        assert_eq!(a.public, b.public);
        assert_eq!(a.secret_bytes(), b.secret_bytes());
        let publics: HashSet<_> = (0..100).map(|s| asym_keygen(&mut rng(1000 + s)).public.0).collect();
        assert_eq!(publics.len(), 100);
    }

    #[test]
    fn random_blocks_are_balanced() {
        let mut r = rng(8);
        let draws: Vec<_> = (0..10_000).map(|_| random_block(&mut r)).collect();
        let unique: HashSet<_> = draws.iter().collect();
        assert_eq!(unique.len(), draws.len());
        for bit in 0..256 {
            let ones = draws.iter().filter(|b| b.bit(bit)).count() as f64 / draws.len() as f64;
            assert!((0.45..=0.55).contains(&ones), "bit {bit}: {ones}");
        }
        assert_eq!(random_block(&mut rng(9)), random_block(&mut rng(9)));
    }
}
