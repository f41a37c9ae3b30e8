//! Symmetric primitives and XOR key algebra shared by every protocol flow.
//!
//! Encryption is AES-GCM with a random 96-bit nonce prepended to the sealed
//! bytes; the hash is SHA-2 and the keyed hash is HMAC over the same function.
//! All key algebra is plain XOR over [`KeyMaterial`].

use std::collections::BTreeSet;
use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes128Gcm, Aes256Gcm};
use hmac::{Hmac, Mac};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256, Sha512};

use crate::graph::NodeId;

/// Length of the random AEAD nonce prepended to every ciphertext.
pub const AEAD_NONCE_LEN: usize = 12;
/// Length of the AEAD integrity tag.
pub const AEAD_TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("cannot combine an empty list of keys")]
    EmptyCombine,
    #[error("key width mismatch: expected {expected} bytes, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("unsupported key width {0} bytes (16 or 32 supported)")]
    UnsupportedWidth(usize),
    #[error("ciphertext failed integrity verification")]
    IntegrityFailure,
    #[error("nonce successor overflows at u64::MAX")]
    NonceOverflow,
    #[error("nonce space exhausted for issuer {0}")]
    NonceExhausted(NodeId),
}

/// Fixed-width secret bitstring. Shares, subkeys, session keys, local and
/// global keys, and master keys are all values of this type.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyMaterial(Vec<u8>);

impl KeyMaterial {
    pub fn zero(width: usize) -> Self {
        KeyMaterial(vec![0; width])
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        KeyMaterial(bytes.to_vec())
    }

    pub fn random<R: RngCore + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut bytes = vec![0; width];
        rng.fill_bytes(&mut bytes);
        KeyMaterial(bytes)
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    pub fn xor(&self, other: &KeyMaterial) -> Result<KeyMaterial, CryptoError> {
        if self.width() != other.width() {
            return Err(CryptoError::WidthMismatch {
                expected: self.width(),
                actual: other.width(),
            });
        }
        Ok(KeyMaterial(
            self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect(),
        ))
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// XOR-fold a non-empty list of equal-width keys.
pub fn xor_combine(parts: &[KeyMaterial]) -> Result<KeyMaterial, CryptoError> {
    let (first, rest) = parts.split_first().ok_or(CryptoError::EmptyCombine)?;
    rest.iter().try_fold(first.clone(), |acc, k| acc.xor(k))
}

/// Protocol nonce: a 64-bit random value tagged with its issuer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce {
    pub value: u64,
    pub issuer: NodeId,
}

impl Nonce {
    /// The "nonce + 1" reply value.
    pub fn succ(&self) -> Result<u64, CryptoError> {
        succ(self.value)
    }
}

pub fn succ(value: u64) -> Result<u64, CryptoError> {
    value.checked_add(1).ok_or(CryptoError::NonceOverflow)
}

/// Per-node nonce generator. Never issues the same value twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceSource {
    issuer: NodeId,
    rng: ChaCha8Rng,
    used: BTreeSet<u64>,
}

impl NonceSource {
    pub fn new(issuer: NodeId, seed: u64) -> Self {
        NonceSource {
            issuer,
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: BTreeSet::new(),
        }
    }

    /// Draws a value in `[0, u64::MAX)` so that its successor always exists.
    pub fn fresh(&mut self) -> Result<Nonce, CryptoError> {
        if self.used.len() as u64 >= u64::MAX - 1 {
            return Err(CryptoError::NonceExhausted(self.issuer));
        }
        loop {
            let value = self.rng.random_range(0..u64::MAX);
            if self.used.insert(value) {
                return Ok(Nonce {
                    value,
                    issuer: self.issuer,
                });
            }
        }
    }

    pub fn issued(&self) -> usize {
        self.used.len()
    }
}

/// Sealed bytes: `aead_nonce || ciphertext || tag`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(pub Vec<u8>);

impl Ciphertext {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.0.len())
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub Vec<u8>);

impl Digest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest(")?;
        for b in self.0.iter().take(8) {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HashAlg {
    #[default]
    Sha256,
    Sha512,
}

impl HashAlg {
    pub fn output_len(self) -> usize {
        match self {
            HashAlg::Sha256 => 32,
            HashAlg::Sha512 => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HashAlg::Sha256 => "sha256",
            HashAlg::Sha512 => "sha512",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sha256" => Some(HashAlg::Sha256),
            "sha512" => Some(HashAlg::Sha512),
            _ => None,
        }
    }
}

/// Scenario-wide primitive selection: key width plus hash function.
/// The cipher is AES-GCM keyed at the configured width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Suite {
    key_width: usize,
    hash: HashAlg,
}

impl Default for Suite {
    fn default() -> Self {
        Suite {
            key_width: 16,
            hash: HashAlg::Sha256,
        }
    }
}

impl Suite {
    pub fn new(key_width: usize, hash: HashAlg) -> Result<Self, CryptoError> {
        match key_width {
            16 | 32 => Ok(Suite { key_width, hash }),
            w => Err(CryptoError::UnsupportedWidth(w)),
        }
    }

    pub fn key_width(&self) -> usize {
        self.key_width
    }

    pub fn hash_alg(&self) -> HashAlg {
        self.hash
    }

    pub fn digest_len(&self) -> usize {
        self.hash.output_len()
    }

    pub fn random_key<R: RngCore + ?Sized>(&self, rng: &mut R) -> KeyMaterial {
        KeyMaterial::random(self.key_width, rng)
    }

    fn check_width(&self, key: &KeyMaterial) -> Result<(), CryptoError> {
        if key.width() != self.key_width {
            return Err(CryptoError::WidthMismatch {
                expected: self.key_width,
                actual: key.width(),
            });
        }
        Ok(())
    }

    pub fn encrypt<R: RngCore + ?Sized>(
        &self,
        key: &KeyMaterial,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        self.check_width(key)?;
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        Ok(Ciphertext(seal_with_nonce(key, &nonce, plaintext)?))
    }

    pub fn decrypt(&self, key: &KeyMaterial, ct: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
        self.check_width(key)?;
        open(key, ct.as_bytes())
    }

    pub fn hash(&self, data: &[u8]) -> Digest {
        match self.hash {
            HashAlg::Sha256 => Digest(Sha256::digest(data).to_vec()),
            HashAlg::Sha512 => Digest(Sha512::digest(data).to_vec()),
        }
    }

    pub fn keyed_hash(&self, key: &KeyMaterial, data: &[u8]) -> Digest {
        match self.hash {
            HashAlg::Sha256 => {
                let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key.as_bytes())
                    .expect("HMAC accepts any key length");
                mac.update(data);
                Digest(mac.finalize().into_bytes().to_vec())
            }
            HashAlg::Sha512 => {
                let mut mac = <Hmac<Sha512> as Mac>::new_from_slice(key.as_bytes())
                    .expect("HMAC accepts any key length");
                mac.update(data);
                Digest(mac.finalize().into_bytes().to_vec())
            }
        }
    }

    /// Constant-time comparison of a received digest against `keyed_hash(key, data)`.
    pub fn verify(&self, key: &KeyMaterial, data: &[u8], tag: &Digest) -> bool {
        match self.hash {
            HashAlg::Sha256 => {
                let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key.as_bytes())
                    .expect("HMAC accepts any key length");
                mac.update(data);
                mac.verify_slice(tag.as_bytes()).is_ok()
            }
            HashAlg::Sha512 => {
                let mut mac = <Hmac<Sha512> as Mac>::new_from_slice(key.as_bytes())
                    .expect("HMAC accepts any key length");
                mac.update(data);
                mac.verify_slice(tag.as_bytes()).is_ok()
            }
        }
    }

    /// Hash-derived key of the suite's width (truncating the digest).
    pub fn derive_key(&self, parts: &[&[u8]]) -> KeyMaterial {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&(p.len() as u32).to_be_bytes());
            data.extend_from_slice(p);
        }
        let d = self.hash(&data);
        KeyMaterial::from_bytes(&d.as_bytes()[..self.key_width])
    }
}

fn seal_with_nonce(
    key: &KeyMaterial,
    nonce: &[u8; AEAD_NONCE_LEN],
    plaintext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let n = aes_gcm::Nonce::from_slice(nonce);
    let sealed = match key.width() {
        16 => Aes128Gcm::new_from_slice(key.as_bytes())
            .map_err(|_| CryptoError::UnsupportedWidth(16))?
            .encrypt(n, plaintext),
        32 => Aes256Gcm::new_from_slice(key.as_bytes())
            .map_err(|_| CryptoError::UnsupportedWidth(32))?
            .encrypt(n, plaintext),
        w => return Err(CryptoError::UnsupportedWidth(w)),
    }
    .map_err(|_| CryptoError::IntegrityFailure)?;
    let mut out = Vec::with_capacity(AEAD_NONCE_LEN + sealed.len());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&sealed);
    Ok(out)
}

fn open(key: &KeyMaterial, bytes: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if bytes.len() < AEAD_NONCE_LEN + AEAD_TAG_LEN {
        return Err(CryptoError::IntegrityFailure);
    }
    let (nonce, body) = bytes.split_at(AEAD_NONCE_LEN);
    let n = aes_gcm::Nonce::from_slice(nonce);
    match key.width() {
        16 => Aes128Gcm::new_from_slice(key.as_bytes())
            .map_err(|_| CryptoError::UnsupportedWidth(16))?
            .decrypt(n, body),
        32 => Aes256Gcm::new_from_slice(key.as_bytes())
            .map_err(|_| CryptoError::UnsupportedWidth(32))?
            .decrypt(n, body),
        w => return Err(CryptoError::UnsupportedWidth(w)),
    }
    .map_err(|_| CryptoError::IntegrityFailure)
}

/// Deterministic encryption under a caller-chosen AEAD nonce. Only used for
/// known-answer checks.
#[doc(hidden)]
pub fn encrypt_with_nonce(
    key: &KeyMaterial,
    nonce: &[u8; AEAD_NONCE_LEN],
    plaintext: &[u8],
) -> Result<Ciphertext, CryptoError> {
    Ok(Ciphertext(seal_with_nonce(key, nonce, plaintext)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn xor_single_is_identity() {
        let k = Suite::default().random_key(&mut rng(1));
        assert_eq!(xor_combine(std::slice::from_ref(&k)).unwrap(), k);
    }

    #[test]
    fn xor_self_is_zero() {
        let k = Suite::default().random_key(&mut rng(2));
        assert!(xor_combine(&[k.clone(), k]).unwrap().is_zero());
    }

    #[test]
    fn xor_errors() {
        assert_eq!(xor_combine(&[]), Err(CryptoError::EmptyCombine));
        let a = KeyMaterial::zero(16);
        let b = KeyMaterial::zero(32);
        assert!(matches!(
            xor_combine(&[a, b]),
            Err(CryptoError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn xor_of_17_is_order_independent() {
        let mut r = rng(3);
        let parts: Vec<_> = (0..17).map(|_| Suite::default().random_key(&mut r)).collect();
        let reference = xor_combine(&parts).unwrap();
        // every pairwise swap
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                let mut p = parts.clone();
                p.swap(i, j);
                assert_eq!(xor_combine(&p).unwrap(), reference);
            }
        }
        for _ in 0..50 {
            let mut p = parts.clone();
            p.shuffle(&mut r);
            assert_eq!(xor_combine(&p).unwrap(), reference);
        }
    }

    #[test]
    fn round_trip_and_wrong_key() {
        let s = Suite::default();
        let mut r = rng(4);
        let k = s.random_key(&mut r);
        let k2 = s.random_key(&mut r);
        let ct = s.encrypt(&k, b"hello group", &mut r).unwrap();
        assert_eq!(s.decrypt(&k, &ct).unwrap(), b"hello group");
        assert_eq!(s.decrypt(&k2, &ct), Err(CryptoError::IntegrityFailure));
    }

    #[test]
    fn identical_plaintexts_give_distinct_ciphertexts() {
        let s = Suite::default();
        let mut r = rng(5);
        let k = s.random_key(&mut r);
        let a = s.encrypt(&k, b"same", &mut r).unwrap();
        let b = s.encrypt(&k, b"same", &mut r).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encrypt_rejects_wrong_width() {
        let s = Suite::default();
        let k = KeyMaterial::zero(32);
        assert!(matches!(
            s.encrypt(&k, b"x", &mut rng(0)),
            Err(CryptoError::WidthMismatch { .. })
        ));
    }

    // NIST GCM test case 2 (AES-128, zero key, zero IV, one zero block),
    // confirmed against the Python `cryptography` AESGCM implementation.
    #[test]
    fn aes128_gcm_known_answer() {
        let key = KeyMaterial::zero(16);
        let ct = encrypt_with_nonce(&key, &[0u8; 12], &[0u8; 16]).unwrap();
        assert_eq!(
            hex::encode(&ct.as_bytes()[12..]),
            "0388dace60b6a392f328c2b971b2fe78ab6e47d42cec13bdf53a67b21257bddf"
        );
    }

    #[test]
    fn sha256_known_answers() {
        let s = Suite::default();
        assert_eq!(
            hex::encode(s.hash(b"").as_bytes()),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hex::encode(s.hash(b"abc").as_bytes()),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(s.hash(b"abc"), s.hash(b"abc"));
    }

    // RFC 4231 test case 2.
    #[test]
    fn hmac_sha256_known_answer() {
        let s = Suite::default();
        let key = KeyMaterial::from_bytes(b"Jefe");
        assert_eq!(
            hex::encode(s.keyed_hash(&key, b"what do ya want for nothing?").as_bytes()),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn keyed_hash_distinct_keys_never_collide() {
        let s = Suite::default();
        let mut r = rng(6);
        let data = b"map bytes";
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            let k = s.random_key(&mut r);
            let tag = s.keyed_hash(&k, data);
            assert!(s.verify(&k, data, &tag));
            assert!(seen.insert(tag));
        }
    }

    #[test]
    fn nonces_are_fresh_and_deterministic() {
        let id = NodeId(7);
        let mut a = NonceSource::new(id, 99);
        let mut b = NonceSource::new(id, 99);
        let x = a.fresh().unwrap();
        let y = a.fresh().unwrap();
        assert_ne!(x, y);
        assert_eq!(b.fresh().unwrap(), x);
        assert_eq!(b.fresh().unwrap(), y);
    }

    #[test]
    fn hundred_thousand_nonces_have_no_duplicates() {
        let mut src = NonceSource::new(NodeId(1), 1234);
        let mut values: Vec<u64> = (0..100_000).map(|_| src.fresh().unwrap().value).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 100_000);
        assert_eq!(src.issued(), 100_000);
    }

    #[test]
    fn succ_overflow_is_an_error() {
        assert_eq!(succ(u64::MAX), Err(CryptoError::NonceOverflow));
        assert_eq!(succ(41), Ok(42));
    }

    proptest! {
        #[test]
        fn xor_is_associative_commutative(a in any::<[u8; 16]>(), b in any::<[u8; 16]>(), c in any::<[u8; 16]>()) {
            let (a, b, c) = (KeyMaterial::from_bytes(&a), KeyMaterial::from_bytes(&b), KeyMaterial::from_bytes(&c));
            let left = a.xor(&b).unwrap().xor(&c).unwrap();
            let right = a.xor(&b.xor(&c).unwrap()).unwrap();
            prop_assert_eq!(&left, &right);
            prop_assert_eq!(xor_combine(&[c.clone(), a.clone(), b.clone()]).unwrap(), left);
            prop_assert!(a.xor(&a).unwrap().is_zero());
        }

        #[test]
        fn encrypt_round_trips(key in any::<[u8; 16]>(), msg in proptest::collection::vec(any::<u8>(), 0..200), seed in any::<u64>()) {
            let s = Suite::default();
            let k = KeyMaterial::from_bytes(&key);
            let ct = s.encrypt(&k, &msg, &mut rng(seed)).unwrap();
            prop_assert_eq!(s.decrypt(&k, &ct).unwrap(), msg);
        }

        #[test]
        fn any_bit_flip_fails_integrity(key in any::<[u8; 16]>(), msg in proptest::collection::vec(any::<u8>(), 1..64), bit in any::<usize>(), seed in any::<u64>()) {
            let s = Suite::default();
            let k = KeyMaterial::from_bytes(&key);
            let mut ct = s.encrypt(&k, &msg, &mut rng(seed)).unwrap();
            let bit = bit % (ct.0.len() * 8);
            ct.0[bit / 8] ^= 1 << (bit % 8);
            prop_assert_eq!(s.decrypt(&k, &ct), Err(CryptoError::IntegrityFailure));
        }

        #[test]
        fn keyed_hash_rejects_other_key_or_data(k1 in any::<[u8; 16]>(), k2 in any::<[u8; 16]>(), d1 in proptest::collection::vec(any::<u8>(), 0..64), d2 in proptest::collection::vec(any::<u8>(), 0..64)) {
            let s = Suite::default();
            let (k1, k2) = (KeyMaterial::from_bytes(&k1), KeyMaterial::from_bytes(&k2));
            let tag = s.keyed_hash(&k1, &d1);
            prop_assert_eq!(s.verify(&k2, &d1, &tag), k1 == k2);
            prop_assert_eq!(s.verify(&k1, &d2, &tag), d1 == d2);
        }
    }
}
