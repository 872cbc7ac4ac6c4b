// Licensed under the Apache-2.0 license

//! Hashing, signing and public-key encryption primitives.
//!
//! Every key in the system is one of two kinds: a signing key or a
//! decryption key. The kinds never mix: a signing key refuses to decrypt and
//! a decryption key refuses to sign. Private halves have no serializer; the
//! only way to obtain their bytes is the crate-private snapshot path used by
//! the TPM export.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};
use zeroize::Zeroizing;

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

const ENVELOPE_INFO: &[u8] = b"stb-envelope-v1";
const EPHEMERAL_LEN: usize = 32;
const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key usage violation: {0:?} key used for the other purpose")]
    UsageViolation(KeyUsage),
    #[error("decryption failed")]
    DecryptFailure,
}

/// Signature and encryption scheme backing every key pair.
///
/// Attestation identity keys were historically 1024-bit RSA; that label is
/// carried for compatibility reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyScheme {
    /// Ed25519 signatures, X25519 + ChaCha20-Poly1305 encryption.
    Ed25519X25519,
}

impl KeyScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ed25519X25519 => "ed25519/x25519-chacha20poly1305",
        }
    }

    pub fn compat_label(self) -> &'static str {
        "rsa-1024"
    }

    pub fn security_bits(self) -> u32 {
        match self {
            Self::Ed25519X25519 => 128,
        }
    }
}

pub const DEFAULT_SCHEME: KeyScheme = KeyScheme::Ed25519X25519;

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Digest)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hex::decode(s).ok().and_then(|b| Self::from_slice(&b))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyUsage {
    Sign,
    Decrypt,
}

impl KeyUsage {
    pub fn tag(self) -> u8 {
        match self {
            Self::Sign => 1,
            Self::Decrypt => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Self::Sign),
            2 => Some(Self::Decrypt),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey {
    pub usage: KeyUsage,
    pub bytes: [u8; PUBLIC_KEY_LEN],
}

impl PublicKey {
    /// Usage tag followed by the raw key bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + PUBLIC_KEY_LEN);
        out.push(self.usage.tag());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let (&tag, rest) = bytes.split_first()?;
        Some(PublicKey {
            usage: KeyUsage::from_tag(tag)?,
            bytes: rest.try_into().ok()?,
        })
    }

    pub fn fingerprint(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({:?}, {})", self.usage, hex::encode(&self.bytes[..8]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    /// Placeholder used while a message body is assembled before signing.
    pub const EMPTY: Signature = Signature([0u8; SIGNATURE_LEN]);

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext(pub Vec<u8>);

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.0.len())
    }
}

#[derive(Clone)]
enum Secret {
    Sign(SigningKey),
    Decrypt(StaticSecret),
}

/// Public key plus its private handle. Not serializable.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    secret: Secret,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .field("secret", &"<redacted>")
            .finish()
    }
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(usage: KeyUsage, rng: &mut R) -> Self {
        let mut seed = Zeroizing::new([0u8; 32]);
        rng.fill_bytes(seed.as_mut());
        Self::from_secret_bytes(usage, &seed)
    }

    pub(crate) fn from_secret_bytes(usage: KeyUsage, seed: &[u8; 32]) -> Self {
        match usage {
            KeyUsage::Sign => {
                let sk = SigningKey::from_bytes(seed);
                let public = PublicKey {
                    usage,
                    bytes: sk.verifying_key().to_bytes(),
                };
                KeyPair {
                    public,
                    secret: Secret::Sign(sk),
                }
            }
            KeyUsage::Decrypt => {
                let sk = StaticSecret::from(*seed);
                let public = PublicKey {
                    usage,
                    bytes: XPublic::from(&sk).to_bytes(),
                };
                KeyPair {
                    public,
                    secret: Secret::Decrypt(sk),
                }
            }
        }
    }

    pub(crate) fn secret_bytes(&self) -> Zeroizing<[u8; 32]> {
        match &self.secret {
            Secret::Sign(sk) => Zeroizing::new(sk.to_bytes()),
            Secret::Decrypt(sk) => Zeroizing::new(sk.to_bytes()),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn usage(&self) -> KeyUsage {
        self.public.usage
    }
}

pub fn sign(key: &KeyPair, data: &[u8]) -> Result<Signature, CryptoError> {
    match &key.secret {
        Secret::Sign(sk) => Ok(Signature(sk.sign(data).to_bytes())),
        Secret::Decrypt(_) => Err(CryptoError::UsageViolation(KeyUsage::Decrypt)),
    }
}

/// Strict Ed25519 verification. Returns false for decryption keys.
pub fn verify(public: &PublicKey, data: &[u8], sig: &Signature) -> bool {
    if public.usage != KeyUsage::Sign {
        return false;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&public.bytes) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(data, &sig).is_ok()
}

fn envelope_cipher(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> (ChaCha20Poly1305, [u8; 12]) {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = Zeroizing::new([0u8; 44]);
    hk.expand(ENVELOPE_INFO, okm.as_mut())
        .expect("44 bytes is a valid HKDF-SHA256 output length");
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&okm[..32]));
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&okm[32..]);
    (cipher, nonce)
}

/// Encrypt `data` to a decryption public key.
///
/// Layout: ephemeral X25519 public key (32) || ChaCha20-Poly1305 ciphertext.
pub fn encrypt_to<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    data: &[u8],
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    if recipient.usage != KeyUsage::Decrypt {
        return Err(CryptoError::UsageViolation(KeyUsage::Sign));
    }
    let eph = StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = XPublic::from(&eph).to_bytes();
    let shared = Zeroizing::new(eph.diffie_hellman(&XPublic::from(recipient.bytes)).to_bytes());
    let (cipher, nonce) = envelope_cipher(&shared, &eph_pub, &recipient.bytes);
    let body = cipher
        .encrypt(AeadNonce::from_slice(&nonce), data)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(EPHEMERAL_LEN + body.len());
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&body);
    Ok(Ciphertext(out))
}

pub fn decrypt(key: &KeyPair, ct: &Ciphertext) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
    let sk = match &key.secret {
        Secret::Decrypt(sk) => sk,
        Secret::Sign(_) => return Err(CryptoError::UsageViolation(KeyUsage::Sign)),
    };
    if ct.0.len() < EPHEMERAL_LEN + TAG_LEN {
        return Err(CryptoError::DecryptFailure);
    }
    let (eph, body) = ct.0.split_at(EPHEMERAL_LEN);
    let eph: [u8; 32] = eph.try_into().expect("split at 32");
    let shared = sk.diffie_hellman(&XPublic::from(eph));
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptFailure);
    }
    let shared = Zeroizing::new(shared.to_bytes());
    let (cipher, nonce) = envelope_cipher(&shared, &eph, &key.public.bytes);
    cipher
        .decrypt(AeadNonce::from_slice(&nonce), body)
        .map(Zeroizing::new)
        .map_err(|_| CryptoError::DecryptFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0xC0FFEE)
    }

    #[test]
    fn hash_is_deterministic_and_fixed_length() {
        assert_eq!(hash(b"abc"), hash(b"abc"));
        assert_eq!(hash(&[]).as_bytes().len(), 32);
        assert_eq!(hash_parts(&[b"ab", b"c"]), hash(b"abc"));
    }

    #[test]
    fn hash_separates_zero_suffix() {
        let mut r = rng();
        for _ in 0..1000 {
            let len = r.gen_range(0..64);
            let mut b = vec![0u8; len];
            r.fill_bytes(&mut b);
            let mut ext = b.clone();
            ext.push(0);
            assert_ne!(hash(&b), hash(&ext));
        }
    }

    #[test]
    fn sign_verify_round_trip_and_bit_flips() {
        let mut r = rng();
        let k = KeyPair::generate(KeyUsage::Sign, &mut r);
        let data = b"deposit increment".to_vec();
        let sig = sign(&k, &data).unwrap();
        assert!(verify(&k.public(), &data, &sig));

        for bit in 0..data.len() * 8 {
            let mut d = data.clone();
            d[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&k.public(), &d, &sig));
        }
        for bit in 0..SIGNATURE_LEN * 8 {
            let mut s = sig;
            s.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&k.public(), &data, &s));
        }
    }

    #[test]
    fn verify_rejects_fresh_wrong_keys() {
        let mut r = rng();
        let k = KeyPair::generate(KeyUsage::Sign, &mut r);
        let sig = sign(&k, b"m").unwrap();
        for _ in 0..100 {
            let other = KeyPair::generate(KeyUsage::Sign, &mut r);
            assert!(!verify(&other.public(), b"m", &sig));
        }
    }

    #[test]
    fn usage_separation() {
        let mut r = rng();
        let dk = KeyPair::generate(KeyUsage::Decrypt, &mut r);
        let sk = KeyPair::generate(KeyUsage::Sign, &mut r);
        assert_eq!(sign(&dk, b"x"), Err(CryptoError::UsageViolation(KeyUsage::Decrypt)));
        assert!(encrypt_to(&sk.public(), b"x", &mut r).is_err());
        let ct = encrypt_to(&dk.public(), b"x", &mut r).unwrap();
        assert!(decrypt(&sk, &ct).is_err());
    }

    #[test]
    fn encryption_round_trip_and_wrong_key() {
        let mut r = rng();
        let k = KeyPair::generate(KeyUsage::Decrypt, &mut r);
        let cw = [1u8, 2, 3, 0x10, 0x20, 0x30];
        let ct = encrypt_to(&k.public(), &cw, &mut r).unwrap();
        assert_eq!(decrypt(&k, &ct).unwrap().as_slice(), &cw);

        let other = KeyPair::generate(KeyUsage::Decrypt, &mut r);
        assert_eq!(decrypt(&other, &ct).unwrap_err(), CryptoError::DecryptFailure);
    }

    #[test]
    fn every_single_byte_tamper_fails() {
        let mut r = rng();
        let k = KeyPair::generate(KeyUsage::Decrypt, &mut r);
        // 16 plaintext bytes + 32 ephemeral + 16 tag = 64-byte ciphertext
        let ct = encrypt_to(&k.public(), &[0xAB; 16], &mut r).unwrap();
        assert_eq!(ct.0.len(), 64);
        for i in 0..ct.0.len() {
            let mut t = ct.clone();
            t.0[i] ^= 0x01;
            assert_eq!(decrypt(&k, &t).unwrap_err(), CryptoError::DecryptFailure, "byte {i}");
        }
    }

    #[test]
    fn secret_bytes_reconstruct_keys() {
        let mut r = rng();
        for usage in [KeyUsage::Sign, KeyUsage::Decrypt] {
            let k = KeyPair::generate(usage, &mut r);
            let k2 = KeyPair::from_secret_bytes(usage, &k.secret_bytes());
            assert_eq!(k.public(), k2.public());
        }
        assert_eq!(DEFAULT_SCHEME.compat_label(), "rsa-1024");
        assert!(DEFAULT_SCHEME.security_bits() >= 112);
    }

    #[test]
    fn public_key_bytes_round_trip() {
        let mut r = rng();
        let k = KeyPair::generate(KeyUsage::Decrypt, &mut r);
        let b = k.public().to_bytes();
        assert_eq!(PublicKey::from_bytes(&b), Some(k.public()));
        assert_eq!(PublicKey::from_bytes(&b[..10]), None);
    }
}
