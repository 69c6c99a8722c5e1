//! Primitive outputs checked against values computed outside this crate
//! (Python hashlib and the `cryptography` package).

use iod_core::crypto::{
    asym_decrypt, encode_inputs, hash2, hash_tagged, AsymCiphertext, AsymKeyPair, Block256, Id32,
    Tag,
};

fn block(hex: &str) -> Block256 {
    Block256::from_hex(hex).unwrap()
}

#[test]
fn hash2_matches_length_prefixed_sha256() {
    assert_eq!(
        hash2(b"abc", &[0x01]),
        block("1059f67288906a4ed1c85cffd6020fc394efdd0c629e630503bca213071f086f")
    );
    assert_eq!(
        hash2(&[0u8; 32], &Id32(7).to_bytes()),
        block("a1ca99be33a3399128a9b6a818ec626ed860bd23689cc1bd0ad4278e222e47f1")
    );
}

#[test]
fn tagged_hash_oracle() {
    let s = Block256([0x11; 32]);
    assert_eq!(
        hash_tagged(&s, Tag::One),
        block("cfb8ce18013a9419d6914319f3ec0845cd5da85ce3460325fbcf661b83d9fd70")
    );
    assert_eq!(
        hash_tagged(&s, Tag::Two),
        block("8799323fea203f0b416fc766fcae16ea6acbd06d3193888da0b1e4f2ab68496a")
    );
}

#[test]
fn encoding_is_prefix_free() {
    // ("ab", "c") and ("a", "bc") concatenate to the same bytes.
    let a = encode_inputs(&[b"ab", b"c"]).unwrap();
    let b = encode_inputs(&[b"a", b"bc"]).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, [0, 0, 0, 2, b'a', b'b', 0, 0, 0, 1, b'c']);
    assert!(encode_inputs(&[b"x", b""]).is_err());
}

// X25519 recipient key 01..20, ephemeral key 65..84, plaintext 0x5a * 32,
// HKDF-SHA256(salt = ephemeral pk, info = "iod-ecies-v1" || recipient pk).
const RECIPIENT_PK: &str = "07a37cbc142093c8b755dc1b10e86cb426374ad16aa853ed0bdfc0b2b86d1c7c";
const CIPHERTEXT: &str = "5714769d116bf76436ae74bc793d2c30ad1903c59ac5273805c7e2698b410c36\
                          6c06df7b6b914e56b542dbd0d5a16f0eec9eb51f03ed8a2791aee3410de0e603\
                          e3d7669ef930541d12d33eb49c37dafeba041ade1c878291f969b16cecec17ec";

fn recipient() -> AsymKeyPair {
    let mut sk = [0u8; 32];
    for (i, b) in sk.iter_mut().enumerate() {
        *b = i as u8 + 1;
    }
    AsymKeyPair::from_secret_bytes(sk)
}

#[test]
fn ecies_decrypts_external_ciphertext() {
    let keys = recipient();
    assert_eq!(hex::encode(keys.public.0), RECIPIENT_PK);
    let bytes = hex::decode(CIPHERTEXT).unwrap();
    let ct = AsymCiphertext::from_bytes(&bytes).unwrap();
    assert_eq!(asym_decrypt(&ct, &keys).unwrap(), Block256([0x5a; 32]));
}

#[test]
fn ecies_rejects_any_flipped_bit() {
    let keys = recipient();
    let good = hex::decode(CIPHERTEXT).unwrap();
    for bit in (0..good.len() * 8).step_by(7) {
        let mut bytes = good.clone();
        bytes[bit / 8] ^= 1 << (bit % 8);
        let ct = AsymCiphertext::from_bytes(&bytes).unwrap();
        assert!(asym_decrypt(&ct, &keys).is_err(), "bit {bit}");
    }
}

#[test]
fn ecies_rejects_wrong_recipient() {
    let other = AsymKeyPair::from_secret_bytes([9; 32]);
    let ct = AsymCiphertext::from_bytes(&hex::decode(CIPHERTEXT).unwrap()).unwrap();
    assert!(asym_decrypt(&ct, &other).is_err());
}
