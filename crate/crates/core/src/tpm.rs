// Licensed under the Apache-2.0 license

//! Software trusted platform module.
//!
//! One `TpmState` is one device. It owns the endorsement key pair (a signing
//! key plus a companion decryption key used only to receive activation
//! blobs and enrollment challenges), an optional 160-bit owner secret, a
//! bank of 16 SHA-256 PCRs, attestation identity keys, bind keys, a storage
//! key used for sealing, and the replay nonce cache. Private halves stay in
//! this struct; callers get public keys, signatures and ciphertexts.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{
    self, hash, hash_parts, Ciphertext, CryptoError, Digest, KeyPair, KeyUsage, PublicKey, Signature,
};
use crate::pca::AikCredential;
use crate::wire::{FieldReader, FieldWriter, MsgType, Signed, WireCodec, WireError};
use crate::{signed_by_field, wire_struct};

pub const PCR_COUNT: usize = 16;
pub const OWNER_AUTH_LEN: usize = 20;

pub type OwnerAuth = [u8; OWNER_AUTH_LEN];
pub type Nonce = [u8; 32];

const ENROLL_RESPONSE_DOMAIN: &[u8] = b"stb-enroll-response-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TpmError {
    #[error("TPM already has an owner")]
    AlreadyOwned,
    #[error("owner authorization must be 20 bytes, got {0}")]
    AuthLengthInvalid(usize),
    #[error("owner authorization mismatch")]
    AuthMismatch,
    #[error("key label already in use: {0}")]
    DuplicateLabel(String),
    #[error("unknown key label: {0}")]
    UnknownLabel(String),
    #[error("decryption failed")]
    DecryptFailure,
    #[error("PCR index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("attestation identity key {0} is not activated")]
    InactiveAik(String),
    #[error("PCR {0} does not match the sealed state")]
    StateMismatch(u8),
    #[error("blob was sealed by a different TPM")]
    ForeignBlob,
    #[error("sealed blob is corrupt")]
    CorruptBlob,
    #[error("activation credential does not name this key")]
    CredentialMismatch,
    #[error("PCRs are not at their reset values")]
    NotAtReset,
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl TpmError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::AlreadyOwned => "AlreadyOwned",
            Self::AuthLengthInvalid(_) => "AuthLengthInvalid",
            Self::AuthMismatch => "AuthMismatch",
            Self::DuplicateLabel(_) => "DuplicateLabel",
            Self::UnknownLabel(_) => "UnknownLabel",
            Self::DecryptFailure => "DecryptFailure",
            Self::IndexOutOfRange(_) => "IndexOutOfRange",
            Self::InactiveAik(_) => "InactiveAik",
            Self::StateMismatch(_) => "StateMismatch",
            Self::ForeignBlob => "ForeignBlob",
            Self::CorruptBlob => "CorruptBlob",
            Self::CredentialMismatch => "CredentialMismatch",
            Self::NotAtReset => "NotAtReset",
            Self::Wire(e) => e.code(),
        }
    }
}

impl From<CryptoError> for TpmError {
    fn from(_: CryptoError) -> Self {
        TpmError::DecryptFailure
    }
}

/// Sorted, duplicate-free list of `(register, value)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PcrValues(Vec<(u8, Digest)>);

impl PcrValues {
    pub fn new(entries: impl IntoIterator<Item = (u8, Digest)>) -> Result<Self, TpmError> {
        let map: BTreeMap<u8, Digest> = entries.into_iter().collect();
        if let Some((&i, _)) = map.iter().find(|(&i, _)| i as usize >= PCR_COUNT) {
            return Err(TpmError::IndexOutOfRange(i as usize));
        }
        Ok(Self(map.into_iter().collect()))
    }

    pub fn entries(&self) -> &[(u8, Digest)] {
        &self.0
    }

    pub fn indices(&self) -> Vec<u8> {
        self.0.iter().map(|(i, _)| *i).collect()
    }

    pub fn get(&self, index: u8) -> Option<&Digest> {
        self.0.iter().find(|(i, _)| *i == index).map(|(_, d)| d)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 33-byte records: index followed by the register value.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() * 33);
        for (i, d) in &self.0 {
            out.push(*i);
            out.extend_from_slice(d.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if !bytes.len().is_multiple_of(33) {
            return Err(WireError::InvalidField("pcr values"));
        }
        let entries: Vec<(u8, Digest)> = bytes
            .chunks(33)
            .map(|c| (c[0], Digest::from_slice(&c[1..]).expect("32 bytes")))
            .collect();
        let strictly_sorted = entries.windows(2).all(|w| w[0].0 < w[1].0);
        if !strictly_sorted || entries.iter().any(|(i, _)| *i as usize >= PCR_COUNT) {
            return Err(WireError::InvalidField("pcr values"));
        }
        Ok(Self(entries))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EkCredential {
    pub ek_pub: PublicKey,
    /// Companion decryption key that receives activation blobs.
    pub ek_encryption_pub: PublicKey,
    pub manufacturer_id: String,
    pub signature: Signature,
}
wire_struct!(EkCredential, EkCredential, {
    ek_pub: public_key, ek_encryption_pub: public_key, manufacturer_id: string, signature: signature,
});
signed_by_field!(EkCredential);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformCredential {
    pub manufacturer_id: String,
    pub model: String,
    pub ek_digest: Digest,
    pub signature: Signature,
}
wire_struct!(PlatformCredential, PlatformCredential, {
    manufacturer_id: string, model: string, ek_digest: digest, signature: signature,
});
signed_by_field!(PlatformCredential);

/// Self-signature made by a fresh AIK over its public key and the EK it
/// lives under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityBinding {
    pub label: String,
    pub aik_pub: PublicKey,
    pub ek_digest: Digest,
    pub signature: Signature,
}
wire_struct!(IdentityBinding, IdentityBinding, {
    label: string, aik_pub: public_key, ek_digest: digest, signature: signature,
});
signed_by_field!(IdentityBinding);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub pcr_values: PcrValues,
    pub external_nonce: Nonce,
    pub signature: Signature,
}

impl WireCodec for Quote {
    const MSG_TYPE: MsgType = MsgType::Quote;
    fn write_fields(&self, w: &mut FieldWriter) {
        w.bytes(&self.pcr_values.to_bytes())
            .bytes(&self.external_nonce)
            .signature(&self.signature);
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            pcr_values: PcrValues::from_bytes(r.bytes()?)?,
            external_nonce: r.array("nonce")?,
            signature: r.signature()?,
        })
    }
}
signed_by_field!(Quote);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    /// Fingerprint of the storage key of the sealing TPM.
    pub srk_id: Digest,
    pub target: PcrValues,
    pub ciphertext: Ciphertext,
    pub integrity_tag: Digest,
}

impl WireCodec for SealedBlob {
    const MSG_TYPE: MsgType = MsgType::SealedBlob;
    fn write_fields(&self, w: &mut FieldWriter) {
        w.digest(&self.srk_id)
            .bytes(&self.target.to_bytes())
            .ciphertext(&self.ciphertext)
            .digest(&self.integrity_tag);
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            srk_id: r.digest()?,
            target: PcrValues::from_bytes(r.bytes()?)?,
            ciphertext: r.ciphertext()?,
            integrity_tag: r.digest()?,
        })
    }
}

struct SealedPayload {
    target: PcrValues,
    payload: Vec<u8>,
}

impl WireCodec for SealedPayload {
    const MSG_TYPE: MsgType = MsgType::SealedPayload;
    fn write_fields(&self, w: &mut FieldWriter) {
        w.bytes(&self.target.to_bytes()).bytes(&self.payload);
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            target: PcrValues::from_bytes(r.bytes()?)?,
            payload: r.vec()?,
        })
    }
}

/// AIK signature over a TPM-resident bind key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindKeyCertificate {
    pub bind_pub: PublicKey,
    pub identity_label: String,
    pub signature: Signature,
}
wire_struct!(BindKeyCertificate, BindKeyCertificate, {
    bind_pub: public_key, identity_label: string, signature: signature,
});
signed_by_field!(BindKeyCertificate);

/// Plaintext of an activation blob: which local key the credential is for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPayload {
    pub key_label: String,
    pub credential: AikCredential,
}
wire_struct!(ActivationPayload, ActivationPayload, {
    key_label: string, credential: nested,
});

/// Bytes an AIK signs to answer an enrollment challenge.
pub fn enroll_response_input(session: &Digest, nonce: &Nonce) -> Vec<u8> {
    let mut v = ENROLL_RESPONSE_DOMAIN.to_vec();
    v.extend_from_slice(session.as_bytes());
    v.extend_from_slice(nonce);
    v
}

/// A TPM vendor: holds the root that signs EK and platform credentials.
#[derive(Debug, Clone)]
pub struct Manufacturer {
    id: String,
    root: KeyPair,
}

impl Manufacturer {
    pub fn new<R: RngCore + CryptoRng>(id: impl Into<String>, rng: &mut R) -> Self {
        Self {
            id: id.into(),
            root: KeyPair::generate(KeyUsage::Sign, rng),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root_public(&self) -> PublicKey {
        self.root.public()
    }

    pub fn manufacture<R: RngCore + CryptoRng>(&self, model: &str, rng: &mut R) -> TpmState {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let mut tpm_rng = ChaCha20Rng::from_seed(seed);
        let ek = KeyPair::generate(KeyUsage::Sign, &mut tpm_rng);
        let ek_decrypt = KeyPair::generate(KeyUsage::Decrypt, &mut tpm_rng);
        let srk = KeyPair::generate(KeyUsage::Decrypt, &mut tpm_rng);

        let mut ek_credential = EkCredential {
            ek_pub: ek.public(),
            ek_encryption_pub: ek_decrypt.public(),
            manufacturer_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        ek_credential.sign_with(&self.root).expect("manufacturer root is a signing key");
        let mut platform_credential = PlatformCredential {
            manufacturer_id: self.id.clone(),
            model: model.to_string(),
            ek_digest: ek.public().fingerprint(),
            signature: Signature::EMPTY,
        };
        platform_credential.sign_with(&self.root).expect("manufacturer root is a signing key");

        TpmState {
            ek,
            ek_decrypt,
            ek_credential,
            platform_credential,
            srk,
            owner_auth: None,
            pcrs: [Digest::ZERO; PCR_COUNT],
            aiks: BTreeMap::new(),
            bind_keys: BTreeMap::new(),
            nonce_cache: BTreeSet::new(),
            persist_nonces: true,
            rng: tpm_rng,
        }
    }
}

#[derive(Debug, Clone)]
struct AikSlot {
    key: KeyPair,
    credential: Option<AikCredential>,
}

#[derive(Debug, Clone)]
pub struct TpmState {
    ek: KeyPair,
    ek_decrypt: KeyPair,
    ek_credential: EkCredential,
    platform_credential: PlatformCredential,
    srk: KeyPair,
    owner_auth: Option<Zeroizing<OwnerAuth>>,
    pcrs: [Digest; PCR_COUNT],
    aiks: BTreeMap<String, AikSlot>,
    bind_keys: BTreeMap<String, KeyPair>,
    nonce_cache: BTreeSet<Nonce>,
    persist_nonces: bool,
    rng: ChaCha20Rng,
}

fn auth_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl TpmState {
    pub fn ek_credential(&self) -> &EkCredential {
        &self.ek_credential
    }

    pub fn platform_credential(&self) -> &PlatformCredential {
        &self.platform_credential
    }

    pub fn is_owned(&self) -> bool {
        self.owner_auth.is_some()
    }

    /// Whether the replay cache survives [`TpmState::reboot`].
    pub fn set_persist_nonces(&mut self, persist: bool) {
        self.persist_nonces = persist;
    }

    pub fn random_bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.fill_bytes(&mut out);
        out
    }

    /// RNG for operations the host performs with TPM-supplied randomness.
    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn take_ownership(&mut self, auth: &[u8]) -> Result<(), TpmError> {
        if self.owner_auth.is_some() {
            return Err(TpmError::AlreadyOwned);
        }
        let auth: OwnerAuth = auth
            .try_into()
            .map_err(|_| TpmError::AuthLengthInvalid(auth.len()))?;
        self.owner_auth = Some(Zeroizing::new(auth));
        Ok(())
    }

    fn check_auth(&self, auth: &[u8]) -> Result<(), TpmError> {
        match &self.owner_auth {
            Some(owner) if auth_eq(owner.as_ref(), auth) => Ok(()),
            _ => Err(TpmError::AuthMismatch),
        }
    }

    pub fn make_identity(
        &mut self,
        auth: &[u8],
        label: &str,
    ) -> Result<(PublicKey, IdentityBinding), TpmError> {
        self.check_auth(auth)?;
        if self.aiks.contains_key(label) {
            return Err(TpmError::DuplicateLabel(label.to_string()));
        }
        let key = KeyPair::generate(KeyUsage::Sign, &mut self.rng);
        let mut binding = IdentityBinding {
            label: label.to_string(),
            aik_pub: key.public(),
            ek_digest: self.ek.public().fingerprint(),
            signature: Signature::EMPTY,
        };
        binding.sign_with(&key)?;
        self.aiks.insert(label.to_string(), AikSlot { key, credential: None });
        Ok((binding.aik_pub, binding))
    }

    /// Decrypt a PCA challenge with the EK companion key and sign it with the
    /// (not yet activated) AIK, proving both live in this TPM.
    pub fn respond_challenge(
        &mut self,
        auth: &[u8],
        label: &str,
        session: &Digest,
        challenge: &Ciphertext,
    ) -> Result<Signature, TpmError> {
        self.check_auth(auth)?;
        let slot = self
            .aiks
            .get(label)
            .ok_or_else(|| TpmError::UnknownLabel(label.to_string()))?;
        let nonce = crypto::decrypt(&self.ek_decrypt, challenge)?;
        let nonce: Nonce = nonce.as_slice().try_into().map_err(|_| TpmError::DecryptFailure)?;
        Ok(crypto::sign(&slot.key, &enroll_response_input(session, &nonce))?)
    }

    pub fn activate_identity(
        &mut self,
        auth: &[u8],
        label: &str,
        activation_blob: &Ciphertext,
    ) -> Result<AikCredential, TpmError> {
        self.check_auth(auth)?;
        let plain = crypto::decrypt(&self.ek_decrypt, activation_blob)?;
        let payload = ActivationPayload::decode(&plain)?;
        if payload.key_label != label {
            return Err(TpmError::UnknownLabel(payload.key_label));
        }
        let slot = self
            .aiks
            .get_mut(label)
            .ok_or_else(|| TpmError::UnknownLabel(label.to_string()))?;
        if payload.credential.aik_pub != slot.key.public() {
            return Err(TpmError::CredentialMismatch);
        }
        slot.credential = Some(payload.credential.clone());
        Ok(payload.credential)
    }

    fn active_aik(&self, label: &str) -> Result<&AikSlot, TpmError> {
        match self.aiks.get(label) {
            Some(slot) if slot.credential.is_some() => Ok(slot),
            _ => Err(TpmError::InactiveAik(label.to_string())),
        }
    }

    pub fn aik_credential(&self, label: &str) -> Option<&AikCredential> {
        self.aiks.get(label).and_then(|s| s.credential.as_ref())
    }

    /// Sign an arbitrary message with an activated AIK.
    pub fn aik_sign<T: Signed>(&self, label: &str, msg: &mut T) -> Result<(), TpmError> {
        let slot = self.active_aik(label)?;
        msg.sign_with(&slot.key)?;
        Ok(())
    }

    pub fn pcr_extend(&mut self, index: usize, measurement: &Digest) -> Result<Digest, TpmError> {
        let reg = self.pcrs.get_mut(index).ok_or(TpmError::IndexOutOfRange(index))?;
        *reg = hash_parts(&[reg.as_bytes(), measurement.as_bytes()]);
        Ok(*reg)
    }

    pub fn pcr_read(&self, index: usize) -> Result<Digest, TpmError> {
        self.pcrs.get(index).copied().ok_or(TpmError::IndexOutOfRange(index))
    }

    pub fn pcrs(&self) -> &[Digest; PCR_COUNT] {
        &self.pcrs
    }

    pub fn read_selection(&self, selection: &[u8]) -> Result<PcrValues, TpmError> {
        let mut entries = Vec::with_capacity(selection.len());
        for &i in selection {
            entries.push((i, self.pcr_read(i as usize)?));
        }
        PcrValues::new(entries)
    }

    pub fn pcrs_at_reset(&self) -> bool {
        self.pcrs.iter().all(|d| *d == Digest::ZERO)
    }

    /// Power cycle: PCRs return to zero. The nonce cache survives unless
    /// persistence was switched off.
    pub fn reboot(&mut self) {
        self.pcrs = [Digest::ZERO; PCR_COUNT];
        if !self.persist_nonces {
            self.nonce_cache.clear();
        }
    }

    pub fn quote(&self, aik_label: &str, selection: &[u8], nonce: &Nonce) -> Result<Quote, TpmError> {
        let slot = self.active_aik(aik_label)?;
        let mut quote = Quote {
            pcr_values: self.read_selection(selection)?,
            external_nonce: *nonce,
            signature: Signature::EMPTY,
        };
        quote.sign_with(&slot.key)?;
        Ok(quote)
    }

    pub fn seal(&mut self, payload: &[u8], target: PcrValues) -> Result<SealedBlob, TpmError> {
        let inner = SealedPayload {
            target: target.clone(),
            payload: payload.to_vec(),
        };
        let encoded = Zeroizing::new(inner.encode());
        let ciphertext = crypto::encrypt_to(&self.srk.public(), &encoded, &mut self.rng)
            .expect("storage key is a decryption key");
        Ok(SealedBlob {
            srk_id: self.srk.public().fingerprint(),
            target,
            ciphertext,
            integrity_tag: hash(payload),
        })
    }

    /// Seal to the current values of `selection`.
    pub fn seal_current(&mut self, payload: &[u8], selection: &[u8]) -> Result<SealedBlob, TpmError> {
        let target = self.read_selection(selection)?;
        self.seal(payload, target)
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Zeroizing<Vec<u8>>, TpmError> {
        if blob.srk_id != self.srk.public().fingerprint() {
            return Err(TpmError::ForeignBlob);
        }
        let plain = crypto::decrypt(&self.srk, &blob.ciphertext).map_err(|_| TpmError::ForeignBlob)?;
        let inner = SealedPayload::decode(&plain).map_err(|_| TpmError::CorruptBlob)?;
        let payload = Zeroizing::new(inner.payload);
        if inner.target != blob.target || hash(&payload) != blob.integrity_tag {
            return Err(TpmError::CorruptBlob);
        }
        for (i, expected) in inner.target.entries() {
            if self.pcrs[*i as usize] != *expected {
                return Err(TpmError::StateMismatch(*i));
            }
        }
        Ok(payload)
    }

    pub fn bind_key_create(&mut self, auth: &[u8], label: &str) -> Result<PublicKey, TpmError> {
        self.check_auth(auth)?;
        if self.bind_keys.contains_key(label) {
            return Err(TpmError::DuplicateLabel(label.to_string()));
        }
        let key = KeyPair::generate(KeyUsage::Decrypt, &mut self.rng);
        let public = key.public();
        self.bind_keys.insert(label.to_string(), key);
        Ok(public)
    }

    pub fn bind_key_public(&self, label: &str) -> Option<PublicKey> {
        self.bind_keys.get(label).map(KeyPair::public)
    }

    pub fn unbind(&self, auth: &[u8], label: &str, ct: &Ciphertext) -> Result<Zeroizing<Vec<u8>>, TpmError> {
        self.check_auth(auth)?;
        let key = self
            .bind_keys
            .get(label)
            .ok_or_else(|| TpmError::UnknownLabel(label.to_string()))?;
        Ok(crypto::decrypt(key, ct)?)
    }

    /// Certify a bind key with an activated AIK.
    pub fn certify_key(&self, aik_label: &str, bind_label: &str) -> Result<BindKeyCertificate, TpmError> {
        let slot = self.active_aik(aik_label)?;
        let bind_pub = self
            .bind_key_public(bind_label)
            .ok_or_else(|| TpmError::UnknownLabel(bind_label.to_string()))?;
        let identity_label = slot
            .credential
            .as_ref()
            .map(|c| c.identity_label.clone())
            .expect("active AIK has a credential");
        let mut cert = BindKeyCertificate {
            bind_pub,
            identity_label,
            signature: Signature::EMPTY,
        };
        cert.sign_with(&slot.key)?;
        Ok(cert)
    }

    /// Records `nonce`; false if it was already seen.
    pub fn consume_nonce(&mut self, nonce: &Nonce) -> bool {
        self.nonce_cache.insert(*nonce)
    }

    pub fn nonce_cache_len(&self) -> usize {
        self.nonce_cache.len()
    }

    /// Every private byte string held by this TPM, for leak scanning.
    pub fn audit_secrets(&self) -> Vec<Vec<u8>> {
        let mut out = vec![
            self.ek.secret_bytes().to_vec(),
            self.ek_decrypt.secret_bytes().to_vec(),
            self.srk.secret_bytes().to_vec(),
        ];
        if let Some(auth) = &self.owner_auth {
            out.push(auth.to_vec());
        }
        out.extend(self.aiks.values().map(|s| s.key.secret_bytes().to_vec()));
        out.extend(self.bind_keys.values().map(|k| k.secret_bytes().to_vec()));
        out
    }

    /// Full state including private material, as a `TpmSnapshot` message.
    /// Snapshots are fixture files; the type is flagged private and never
    /// transmitted.
    pub fn export_snapshot(&self) -> Zeroizing<Vec<u8>> {
        let mut w = FieldWriter::default();
        w.bytes(self.ek.secret_bytes().as_ref())
            .bytes(self.ek_decrypt.secret_bytes().as_ref())
            .bytes(self.srk.secret_bytes().as_ref())
            .nested(&self.ek_credential)
            .nested(&self.platform_credential)
            .bytes(self.owner_auth.as_ref().map(|a| a.as_slice()).unwrap_or(&[]));
        let pcrs: Vec<Vec<u8>> = self.pcrs.iter().map(|d| d.0.to_vec()).collect();
        w.byte_list(&pcrs);
        let aiks: Vec<Vec<u8>> = self
            .aiks
            .iter()
            .map(|(label, slot)| {
                let mut e = FieldWriter::default();
                e.str(label)
                    .bytes(slot.key.secret_bytes().as_ref())
                    .opt_nested(slot.credential.as_ref());
                crate::wire::encode_list(&e.into_fields())
            })
            .collect();
        w.byte_list(&aiks);
        let binds: Vec<Vec<u8>> = self
            .bind_keys
            .iter()
            .map(|(label, key)| {
                let mut e = FieldWriter::default();
                e.str(label).bytes(key.secret_bytes().as_ref());
                crate::wire::encode_list(&e.into_fields())
            })
            .collect();
        w.byte_list(&binds);
        let nonces: Vec<Vec<u8>> = self.nonce_cache.iter().map(|n| n.to_vec()).collect();
        w.byte_list(&nonces)
            .bool(self.persist_nonces)
            .bytes(&self.rng.get_seed())
            .bytes(&self.rng.get_word_pos().to_be_bytes());
        Zeroizing::new(crate::wire::WireMessage::new(MsgType::TpmSnapshot, w.into_fields()).encode())
    }

    pub fn import_snapshot(bytes: &[u8]) -> Result<Self, TpmError> {
        let msg = crate::wire::WireMessage::decode(bytes)?;
        if msg.msg_type != MsgType::TpmSnapshot {
            return Err(WireError::UnexpectedType {
                expected: MsgType::TpmSnapshot,
                found: msg.msg_type,
            }
            .into());
        }
        let mut r = FieldReader::new(&msg.fields);
        let ek = KeyPair::from_secret_bytes(KeyUsage::Sign, &r.array("ek")?);
        let ek_decrypt = KeyPair::from_secret_bytes(KeyUsage::Decrypt, &r.array("ek decrypt")?);
        let srk = KeyPair::from_secret_bytes(KeyUsage::Decrypt, &r.array("srk")?);
        let ek_credential: EkCredential = r.nested()?;
        let platform_credential: PlatformCredential = r.nested()?;
        let owner_auth = match r.bytes()? {
            [] => None,
            a => Some(Zeroizing::new(
                OwnerAuth::try_from(a).map_err(|_| WireError::InvalidField("owner auth"))?,
            )),
        };
        let pcr_list = r.byte_list()?;
        if pcr_list.len() != PCR_COUNT {
            return Err(WireError::InvalidField("pcr bank").into());
        }
        let mut pcrs = [Digest::ZERO; PCR_COUNT];
        for (slot, b) in pcrs.iter_mut().zip(&pcr_list) {
            *slot = Digest::from_slice(b).ok_or(WireError::InvalidField("pcr"))?;
        }
        let mut aiks = BTreeMap::new();
        for entry in r.byte_list()? {
            let fields = crate::wire::decode_list(&entry)?;
            let mut e = FieldReader::new(&fields);
            let label = e.string()?;
            let key = KeyPair::from_secret_bytes(KeyUsage::Sign, &e.array("aik")?);
            let credential = e.opt_nested()?;
            e.finish()?;
            aiks.insert(label, AikSlot { key, credential });
        }
        let mut bind_keys = BTreeMap::new();
        for entry in r.byte_list()? {
            let fields = crate::wire::decode_list(&entry)?;
            let mut e = FieldReader::new(&fields);
            let label = e.string()?;
            let key = KeyPair::from_secret_bytes(KeyUsage::Decrypt, &e.array("bind key")?);
            e.finish()?;
            bind_keys.insert(label, key);
        }
        let nonce_cache = r
            .byte_list()?
            .iter()
            .map(|n| Nonce::try_from(n.as_slice()).map_err(|_| WireError::InvalidField("nonce")))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let persist_nonces = r.bool()?;
        let mut rng = ChaCha20Rng::from_seed(r.array("rng seed")?);
        rng.set_word_pos(u128::from_be_bytes(r.array("rng position")?));
        r.finish()?;
        if ek_credential.ek_pub != ek.public() || ek_credential.ek_encryption_pub != ek_decrypt.public() {
            return Err(WireError::InvalidField("ek credential").into());
        }
        Ok(Self {
            ek,
            ek_decrypt,
            ek_credential,
            platform_credential,
            srk,
            owner_auth,
            pcrs,
            aiks,
            bind_keys,
            nonce_cache,
            persist_nonces,
            rng,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::pca::AikCredential;
    use rand::Rng;

    pub(crate) const AUTH: OwnerAuth = [7u8; OWNER_AUTH_LEN];

    pub(crate) fn fresh_tpm(seed: u64) -> (Manufacturer, TpmState) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = Manufacturer::new("acme-tpm", &mut rng);
        let tpm = m.manufacture("stb-3000", &mut rng);
        (m, tpm)
    }

    /// Activate an AIK without a PCA round trip by wrapping a self-made
    /// credential to the EK companion key.
    pub(crate) fn owned_with_active_aik(seed: u64) -> TpmState {
        let (_, mut tpm) = fresh_tpm(seed);
        tpm.take_ownership(&AUTH).unwrap();
        let (aik_pub, _) = tpm.make_identity(&AUTH, "aik").unwrap();
        let cred = AikCredential {
            identity_label: "pid-test".into(),
            aik_pub,
            manufacturer_id: "acme-tpm".into(),
            model: "stb-3000".into(),
            issued_at: 0,
            pca_id: "pca".into(),
            signature: Signature::EMPTY,
        };
        let payload = ActivationPayload {
            key_label: "aik".into(),
            credential: cred,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
        let blob = crypto::encrypt_to(&tpm.ek_credential().ek_encryption_pub, &payload.encode(), &mut rng).unwrap();
        tpm.activate_identity(&AUTH, "aik", &blob).unwrap();
        tpm
    }

    #[test]
    fn take_ownership_rules() {
        let (_, mut tpm) = fresh_tpm(1);
        assert_eq!(tpm.take_ownership(&[0u8; 16]), Err(TpmError::AuthLengthInvalid(16)));
        tpm.take_ownership(&AUTH).unwrap();
        assert!(tpm.is_owned());
        assert_eq!(tpm.take_ownership(&AUTH), Err(TpmError::AlreadyOwned));
    }

    #[test]
    fn make_identity_requires_owner() {
        let (_, mut tpm) = fresh_tpm(2);
        assert_eq!(tpm.make_identity(&AUTH, "aik").unwrap_err(), TpmError::AuthMismatch);
        tpm.take_ownership(&AUTH).unwrap();
        assert_eq!(tpm.make_identity(&[1u8; 20], "aik").unwrap_err(), TpmError::AuthMismatch);
        let (aik_pub, binding) = tpm.make_identity(&AUTH, "aik").unwrap();
        assert!(binding.verify_with(&aik_pub));
        assert_eq!(binding.ek_digest, tpm.ek_credential().ek_pub.fingerprint());
        assert_eq!(
            tpm.make_identity(&AUTH, "aik").unwrap_err(),
            TpmError::DuplicateLabel("aik".into())
        );
        // the AIK private half is not among the exported public artefacts
        let secrets = tpm.audit_secrets();
        assert!(!binding.encode().windows(32).any(|w| secrets.iter().any(|s| s == w)));
    }

    #[test]
    fn activation_for_other_tpm_fails() {
        let a = owned_with_active_aik(3);
        let (_, mut b) = fresh_tpm(4);
        b.take_ownership(&AUTH).unwrap();
        b.make_identity(&AUTH, "aik").unwrap();
        let cred = a.aik_credential("aik").unwrap().clone();
        let payload = ActivationPayload {
            key_label: "aik".into(),
            credential: cred,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let blob = crypto::encrypt_to(&a.ek_credential().ek_encryption_pub, &payload.encode(), &mut rng).unwrap();
        assert_eq!(b.activate_identity(&AUTH, "aik", &blob).unwrap_err(), TpmError::DecryptFailure);
    }

    #[test]
    fn cross_wired_activation_blobs_fail() {
        // Two enrollments in flight on one TPM; each blob delivered to the
        // other activation call.
        let (_, mut tpm) = fresh_tpm(5);
        tpm.take_ownership(&AUTH).unwrap();
        let mut blobs = Vec::new();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        for label in ["aik-a", "aik-b"] {
            let (aik_pub, _) = tpm.make_identity(&AUTH, label).unwrap();
            let payload = ActivationPayload {
                key_label: label.into(),
                credential: AikCredential {
                    identity_label: format!("pid-{label}"),
                    aik_pub,
                    manufacturer_id: "acme-tpm".into(),
                    model: "stb-3000".into(),
                    issued_at: 0,
                    pca_id: "pca".into(),
                    signature: Signature::EMPTY,
                },
            };
            blobs.push(crypto::encrypt_to(&tpm.ek_credential().ek_encryption_pub, &payload.encode(), &mut rng).unwrap());
        }
        assert!(matches!(
            tpm.activate_identity(&AUTH, "aik-a", &blobs[1]),
            Err(TpmError::UnknownLabel(_))
        ));
        assert!(matches!(
            tpm.activate_identity(&AUTH, "aik-b", &blobs[0]),
            Err(TpmError::UnknownLabel(_))
        ));
        assert!(tpm.aik_credential("aik-a").is_none());
        assert!(tpm.aik_credential("aik-b").is_none());
    }

    #[test]
    fn pcr_extend_chaining() {
        let (_, mut tpm) = fresh_tpm(6);
        let m = hash(b"bios");
        let v = tpm.pcr_extend(0, &m).unwrap();
        let mut expected = vec![0u8; 32];
        expected.extend_from_slice(m.as_bytes());
        assert_eq!(v, hash(&expected));
        assert_eq!(tpm.pcr_extend(16, &m), Err(TpmError::IndexOutOfRange(16)));
    }

    #[test]
    fn pcr_extend_is_order_sensitive() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = Digest(rng.gen());
            let b = Digest(rng.gen());
            if a == b {
                continue;
            }
            let (_, mut t1) = fresh_tpm(7);
            let mut t2 = t1.clone();
            t1.pcr_extend(3, &a).unwrap();
            t1.pcr_extend(3, &b).unwrap();
            t2.pcr_extend(3, &b).unwrap();
            t2.pcr_extend(3, &a).unwrap();
            assert_ne!(t1.pcr_read(3).unwrap(), t2.pcr_read(3).unwrap());
        }
    }

    #[test]
    fn quote_requires_active_aik_and_verifies() {
        let (_, mut unowned) = fresh_tpm(8);
        unowned.take_ownership(&AUTH).unwrap();
        unowned.make_identity(&AUTH, "aik").unwrap();
        assert!(matches!(unowned.quote("aik", &[0], &[0; 32]), Err(TpmError::InactiveAik(_))));

        let mut tpm = owned_with_active_aik(8);
        tpm.pcr_extend(0, &hash(b"x")).unwrap();
        let q = tpm.quote("aik", &[0, 1], &[5; 32]).unwrap();
        let aik_pub = tpm.aik_credential("aik").unwrap().aik_pub;
        assert!(q.verify_with(&aik_pub));
        assert_eq!(q.pcr_values.get(0), Some(&tpm.pcr_read(0).unwrap()));
        assert_eq!(Quote::decode(&q.encode()).unwrap(), q);
    }

    #[test]
    fn seal_unseal_state_binding() {
        let mut tpm = owned_with_active_aik(12);
        for i in 0..5 {
            tpm.pcr_extend(i, &hash(&[i as u8])).unwrap();
        }
        let sel = [0u8, 1, 2, 3, 4];
        let blob = tpm.seal_current(b"entitlement", &sel).unwrap();
        assert_eq!(tpm.unseal(&blob).unwrap().as_slice(), b"entitlement");

        // every single-register perturbation of the selection fails
        for &i in &sel {
            let mut t = tpm.clone();
            t.pcr_extend(i as usize, &hash(b"evil")).unwrap();
            assert_eq!(t.unseal(&blob).unwrap_err(), TpmError::StateMismatch(i));
        }
        // registers outside the selection do not matter
        let mut t = tpm.clone();
        t.pcr_extend(9, &hash(b"other")).unwrap();
        assert!(t.unseal(&blob).is_ok());

        let other = owned_with_active_aik(13);
        assert_eq!(other.unseal(&blob).unwrap_err(), TpmError::ForeignBlob);

        let mut forged = blob.clone();
        forged.target = PcrValues::new([(0, Digest::ZERO)]).unwrap();
        assert_eq!(tpm.unseal(&forged).unwrap_err(), TpmError::CorruptBlob);
    }

    #[test]
    fn bind_unbind() {
        let mut tpm = owned_with_active_aik(14);
        let pub_a = tpm.bind_key_create(&AUTH, "a").unwrap();
        let pub_b = tpm.bind_key_create(&AUTH, "b").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ct = crypto::encrypt_to(&pub_a, b"voucher", &mut rng).unwrap();
        assert_eq!(tpm.unbind(&AUTH, "a", &ct).unwrap().as_slice(), b"voucher");
        assert_eq!(tpm.unbind(&AUTH, "b", &ct).unwrap_err(), TpmError::DecryptFailure);
        assert_eq!(tpm.unbind(&[0u8; 20], "a", &ct).unwrap_err(), TpmError::AuthMismatch);
        assert!(matches!(tpm.unbind(&AUTH, "zzz", &ct), Err(TpmError::UnknownLabel(_))));
        let ct_b = crypto::encrypt_to(&pub_b, b"x", &mut rng).unwrap();
        assert!(tpm.unbind(&AUTH, "b", &ct_b).is_ok());

        let cert = tpm.certify_key("aik", "a").unwrap();
        let aik_pub = tpm.aik_credential("aik").unwrap().aik_pub;
        assert!(cert.verify_with(&aik_pub));
        let mut swapped = cert.clone();
        swapped.bind_pub = pub_b;
        assert!(!swapped.verify_with(&aik_pub));
    }

    #[test]
    fn nonce_cache_replay() {
        let (_, mut tpm) = fresh_tpm(15);
        let n = [9u8; 32];
        assert!(tpm.consume_nonce(&n));
        assert!(!tpm.consume_nonce(&n));
        tpm.reboot();
        assert!(!tpm.consume_nonce(&n), "persisted across reboot by default");
        tpm.set_persist_nonces(false);
        tpm.reboot();
        assert!(tpm.consume_nonce(&n));

        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let (_, mut t) = fresh_tpm(16);
        let nonces: BTreeSet<Nonce> = (0..10_000).map(|_| rng.gen()).collect();
        assert!(nonces.iter().all(|n| t.consume_nonce(n)));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut tpm = owned_with_active_aik(17);
        tpm.bind_key_create(&AUTH, "bind").unwrap();
        tpm.pcr_extend(2, &hash(b"k")).unwrap();
        tpm.consume_nonce(&[1; 32]);
        let snap = tpm.export_snapshot();
        let mut back = TpmState::import_snapshot(&snap).unwrap();
        assert_eq!(back.pcrs(), tpm.pcrs());
        assert_eq!(back.audit_secrets(), tpm.audit_secrets());
        assert!(!back.consume_nonce(&[1; 32]));
        assert_eq!(back.random_bytes::<16>(), tpm.random_bytes::<16>());
        assert!(MsgType::TpmSnapshot.is_private());
    }
}
