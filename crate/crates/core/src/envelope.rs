//! Two-secret key escrow and the response envelope.
//!
//! The system operator derives `s1 = HMAC(psk, n1)` and `s2 = HMAC(psk, n2)`.
//! Responses are sealed under `sk = H(s1 || s2)`. The contract publishes `s1`
//! and `H(s2)`, so the consumer can only rebuild `sk` once `s2` is revealed.
//!
//! Primitives: SHA-256 for `H`, HMAC-SHA-256, AES-256-GCM.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce as GcmNonce};
use hmac::{Hmac, Mac};
use rand::Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ldp::ResponseVector;

pub const DIGEST_LEN: usize = 32;
pub const SECRET_LEN: usize = 32;
pub const PSK_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
pub const CIPHER_NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    /// Wrong key, or the ciphertext was altered.
    #[error("authentication failed")]
    Authentication,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("expected {expected} bytes, got {found}")]
    BadLength { expected: usize, found: usize },
}

macro_rules! fixed_bytes {
    ($(#[$m:meta])* $name:ident, $len:expr) => {
        $(#[$m])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn from_slice(bytes: &[u8]) -> Result<Self, EnvelopeError> {
                let arr: [u8; $len] = bytes.try_into().map_err(|_| EnvelopeError::BadLength {
                    expected: $len,
                    found: bytes.len(),
                })?;
                Ok(Self(arr))
            }

            pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
                let mut b = [0u8; $len];
                rng.fill(&mut b[..]);
                Self(b)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, EnvelopeError> {
                let v = hex::decode(s).map_err(|_| EnvelopeError::Malformed("hex"))?;
                Self::from_slice(&v)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

fixed_bytes!(
    /// Survey-scoped pre-shared key held by the system operator and the
    /// operators it admitted.
    PreSharedKey,
    PSK_LEN
);
fixed_bytes!(Nonce, NONCE_LEN);
fixed_bytes!(
    /// One half of the escrowed key material.
    Secret,
    SECRET_LEN
);
fixed_bytes!(SessionKey, 32);
fixed_bytes!(Digest, DIGEST_LEN);
fixed_bytes!(CipherNonce, CIPHER_NONCE_LEN);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);
}

/// AES-256-GCM output. `body` is the encrypted payload followed by the tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub cipher_nonce: CipherNonce,
    pub body: Vec<u8>,
}

impl Ciphertext {
    /// `cipher_nonce || body`; the bytes a commitment is taken over.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIPHER_NONCE_LEN + self.body.len());
        out.extend_from_slice(&self.cipher_nonce.0);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() < CIPHER_NONCE_LEN + TAG_LEN {
            return Err(EnvelopeError::Malformed("ciphertext shorter than nonce and tag"));
        }
        let (nonce, body) = bytes.split_at(CIPHER_NONCE_LEN);
        Ok(Self {
            cipher_nonce: CipherNonce::from_slice(nonce)?,
            body: body.to_vec(),
        })
    }

    /// `H(C_R)`.
    pub fn commitment(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

/// HMAC-SHA-256 with an arbitrary-length key.
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

pub fn hmac_derive(psk: &PreSharedKey, nonce: &Nonce) -> Secret {
    Secret(hmac_sha256(&psk.0, &nonce.0))
}

/// `sk = H(s1 || s2)`; argument order matters.
pub fn derive_session_key(s1: &Secret, s2: &Secret) -> SessionKey {
    let mut h = Sha256::new();
    h.update(s1.0);
    h.update(s2.0);
    SessionKey(h.finalize().into())
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

pub fn encrypt(sk: &SessionKey, plaintext: &[u8], cipher_nonce: CipherNonce) -> Ciphertext {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&sk.0));
    let body = cipher
        .encrypt(GcmNonce::from_slice(&cipher_nonce.0), plaintext)
        .expect("AES-GCM encryption of in-memory buffers does not fail");
    Ciphertext { cipher_nonce, body }
}

pub fn decrypt(sk: &SessionKey, c: &Ciphertext) -> Result<Vec<u8>, EnvelopeError> {
    if c.body.len() < TAG_LEN {
        return Err(EnvelopeError::Malformed("body shorter than tag"));
    }
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&sk.0));
    cipher
        .decrypt(GcmNonce::from_slice(&c.cipher_nonce.0), c.body.as_slice())
        .map_err(|_| EnvelopeError::Authentication)
}

/// Packs a bit vector: 4-byte big-endian length, then the bits MSB-first.
pub fn encode_bits(bits: &[bool]) -> Vec<u8> {
    let n = bits.len();
    let mut out = Vec::with_capacity(4 + n.div_ceil(8));
    out.extend_from_slice(&(n as u32).to_be_bytes());
    let start = out.len();
    out.resize(start + n.div_ceil(8), 0);
    for (j, &b) in bits.iter().enumerate() {
        if b {
            out[start + j / 8] |= 0x80 >> (j % 8);
        }
    }
    out
}

/// Decodes one packed bit vector from the front of `bytes`, returning it and
/// the number of bytes consumed.
pub fn decode_bits_prefix(bytes: &[u8]) -> Result<(Vec<bool>, usize), EnvelopeError> {
    if bytes.len() < 4 {
        return Err(EnvelopeError::Malformed("missing length header"));
    }
    let n = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let packed = n.div_ceil(8);
    let body = bytes
        .get(4..4 + packed)
        .ok_or(EnvelopeError::Malformed("length header exceeds payload"))?;
    let bits: Vec<bool> = (0..n).map(|j| body[j / 8] & (0x80 >> (j % 8)) != 0).collect();
    // Padding bits must be clear so that every vector has exactly one encoding.
    if !n.is_multiple_of(8) && body[packed - 1] & (0xFF >> (n % 8)) != 0 {
        return Err(EnvelopeError::Malformed("non-zero padding bits"));
    }
    Ok((bits, 4 + packed))
}

pub fn decode_bits(bytes: &[u8]) -> Result<Vec<bool>, EnvelopeError> {
    let (bits, used) = decode_bits_prefix(bytes)?;
    if used != bytes.len() {
        return Err(EnvelopeError::Malformed("trailing bytes"));
    }
    Ok(bits)
}

pub fn encode_response(rv: &ResponseVector) -> Vec<u8> {
    encode_bits(rv.bits())
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseVector, EnvelopeError> {
    decode_bits(bytes).map(ResponseVector::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn unhex(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    #[test]
    fn rfc4231_case_1() {
        let mac = hmac_sha256(&[0x0b; 20], b"Hi There");
        assert_eq!(
            hex::encode(mac),
            "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
        );
    }

    #[test]
    fn sha256_vectors() {
        assert_eq!(
            digest(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            digest(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn session_key_of_zero_secrets() {
        let z = Secret([0; 32]);
        assert_eq!(
            derive_session_key(&z, &z).to_hex(),
            "f5a5fd42d16a20302798ef6ed309979b43003d2320d9f0e8ea9831a92759fb4b"
        );
    }

    #[test]
    fn gcm_known_answer() {
        // McGrew & Viega GCM test case 15 (AES-256, no AAD).
        let sk = SessionKey::from_slice(&unhex(
            "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308",
        ))
        .unwrap();
        let nonce = CipherNonce::from_slice(&unhex("cafebabefacedbaddecaf888")).unwrap();
        let pt = unhex(
            "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
             1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255",
        );
        let c = encrypt(&sk, &pt, nonce);
        assert_eq!(
            hex::encode(&c.body),
            "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa\
             8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662898015ad\
             b094dac5d93471bdec1a502270e3cc6c"
        );
        assert_eq!(decrypt(&sk, &c).unwrap(), pt);
    }

    #[test]
    fn hmac_derive_is_deterministic_and_nonce_sensitive() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..64 {
            let psk = PreSharedKey::random(&mut rng);
            let n1 = Nonce::random(&mut rng);
            let n2 = Nonce::random(&mut rng);
            assert_eq!(hmac_derive(&psk, &n1), hmac_derive(&psk, &n1));
            assert_ne!(hmac_derive(&psk, &n1), hmac_derive(&psk, &n2));
        }
    }

    #[test]
    fn session_key_is_order_sensitive() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..64 {
            let a = Secret::random(&mut rng);
            let b = Secret::random(&mut rng);
            assert_ne!(derive_session_key(&a, &b), derive_session_key(&b, &a));
            assert_eq!(derive_session_key(&a, &b), derive_session_key(&a, &b));
        }
    }

    #[test]
    fn nonce_changes_ciphertext() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sk = SessionKey::random(&mut rng);
        let m = b"response";
        let a = encrypt(&sk, m, CipherNonce::random(&mut rng));
        let b = encrypt(&sk, m, CipherNonce::random(&mut rng));
        assert_ne!(a.body, b.body);
    }

    #[test]
    fn tampering_and_wrong_keys_fail() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let sk = SessionKey::random(&mut rng);
        let c = encrypt(&sk, b"0123456789", CipherNonce::random(&mut rng));
        assert_eq!(decrypt(&sk, &c).unwrap(), b"0123456789");

        let mut bad_key = sk;
        bad_key.0[5] ^= 0x01;
        assert_eq!(decrypt(&bad_key, &c), Err(EnvelopeError::Authentication));

        for i in 0..c.body.len() {
            let mut t = c.clone();
            t.body[i] ^= 0x40;
            assert_eq!(decrypt(&sk, &t), Err(EnvelopeError::Authentication));
        }
        let mut t = c.clone();
        t.cipher_nonce.0[0] ^= 1;
        assert_eq!(decrypt(&sk, &t), Err(EnvelopeError::Authentication));

        let short = Ciphertext {
            cipher_nonce: c.cipher_nonce,
            body: vec![0; 3],
        };
        assert!(matches!(decrypt(&sk, &short), Err(EnvelopeError::Malformed(_))));
    }

    #[test]
    fn escrow_needs_the_second_secret() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let psk = PreSharedKey::random(&mut rng);
        let s1 = hmac_derive(&psk, &Nonce::random(&mut rng));
        let s2 = hmac_derive(&psk, &Nonce::random(&mut rng));
        let sk = derive_session_key(&s1, &s2);
        let c = encrypt(&sk, b"\x00\x00\x00\x03\xa0", CipherNonce::random(&mut rng));
        for _ in 0..10_000 {
            let guess = derive_session_key(&s1, &Secret::random(&mut rng));
            assert_eq!(decrypt(&guess, &c), Err(EnvelopeError::Authentication));
        }
    }

    #[test]
    fn response_encoding_layout() {
        let rv = ResponseVector::from_bits(vec![true, false, true]);
        assert_eq!(encode_response(&rv), vec![0, 0, 0, 3, 0xA0]);
        let zeros = ResponseVector::from_bits(vec![false; 8]);
        assert_eq!(encode_response(&zeros), vec![0, 0, 0, 8, 0x00]);
    }

    #[test]
    fn response_decoding_rejects_bad_input() {
        assert!(decode_response(&[0, 0, 0, 3, 0xA0, 0x00]).is_err());
        assert!(decode_response(&[0, 0, 0, 9, 0xFF]).is_err());
        assert!(decode_response(&[0, 0, 0, 3, 0xA1]).is_err());
        assert!(decode_response(&[0, 0]).is_err());
    }

    #[test]
    fn ciphertext_bytes_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let c = encrypt(&SessionKey::random(&mut rng), b"x", CipherNonce::random(&mut rng));
        assert_eq!(Ciphertext::from_bytes(&c.to_bytes()).unwrap(), c);
        assert!(Ciphertext::from_bytes(&[0; 20]).is_err());
    }

    proptest! {
        #[test]
        fn response_encoding_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let rv = ResponseVector::from_bits(bits);
            prop_assert_eq!(decode_response(&encode_response(&rv)).unwrap(), rv);
        }

        #[test]
        fn seal_open_round_trips(msg in proptest::collection::vec(any::<u8>(), 0..4096), seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sk = SessionKey::random(&mut rng);
            let c = encrypt(&sk, &msg, CipherNonce::random(&mut rng));
            prop_assert_eq!(c.body.len(), msg.len() + TAG_LEN);
            prop_assert_eq!(decrypt(&sk, &c).unwrap(), msg);
        }
    }
}
