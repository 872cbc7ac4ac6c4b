// Licensed under the Apache-2.0 license

//! Privacy CA.
//!
//! Enrollment is two rounds. The box sends an [`EnrollEnvelope`] (the
//! request encrypted to the PCA), the PCA checks the EK and platform
//! credentials and the AIK self-binding and answers with a nonce encrypted
//! to the EK companion key. The box returns that nonce signed by the AIK.
//! Only then is the [`AikCredential`] issued, wrapped in an activation blob
//! that the same EK companion key must open.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{self, hash_parts, Ciphertext, Digest, KeyPair, KeyUsage, PublicKey, Signature};
use crate::tpm::{
    enroll_response_input, ActivationPayload, EkCredential, IdentityBinding, Nonce, PlatformCredential,
};
use crate::wire::{Signed, WireCodec, WireError};
use crate::{signed_by_field, wire_struct};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcaError {
    #[error("enrollment request could not be opened")]
    Undecryptable,
    #[error("EK or platform credential does not verify")]
    BadEkCredential,
    #[error("AIK binding does not verify")]
    BadAikBinding,
    #[error("challenge response does not verify")]
    ChallengeFailed,
    #[error("unknown enrollment session")]
    UnknownSession,
    #[error("reveal request is not authorized")]
    Unauthorized,
    #[error("unknown identity label: {0}")]
    Unknown(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl PcaError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Undecryptable => "Undecryptable",
            Self::BadEkCredential => "BadEkCredential",
            Self::BadAikBinding => "BadAikBinding",
            Self::ChallengeFailed => "ChallengeFailed",
            Self::UnknownSession => "UnknownSession",
            Self::Unauthorized => "Unauthorized",
            Self::Unknown(_) => "Unknown",
            Self::Wire(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AikCredential {
    pub identity_label: String,
    pub aik_pub: PublicKey,
    pub manufacturer_id: String,
    pub model: String,
    pub issued_at: u64,
    pub pca_id: String,
    pub signature: Signature,
}
wire_struct!(AikCredential, AikCredential, {
    identity_label: string, aik_pub: public_key, manufacturer_id: string, model: string,
    issued_at: u64, pca_id: string, signature: signature,
});
signed_by_field!(AikCredential);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollRequest {
    pub ek_credential: EkCredential,
    pub platform_credential: PlatformCredential,
    pub aik_pub: PublicKey,
    pub binding: IdentityBinding,
    /// Bonded subscriber identity, escrowed and never passed on.
    pub customer_id: String,
}
wire_struct!(EnrollRequest, EnrollRequest, {
    ek_credential: nested, platform_credential: nested, aik_pub: public_key, binding: nested,
    customer_id: string,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollEnvelope {
    pub pca_id: String,
    pub ciphertext: Ciphertext,
}
wire_struct!(EnrollEnvelope, EnrollEnvelope, { pca_id: string, ciphertext: ciphertext });

impl EnrollEnvelope {
    pub fn seal<R: RngCore + CryptoRng>(
        pca_id: &str,
        pca_encryption_pub: &PublicKey,
        request: &EnrollRequest,
        rng: &mut R,
    ) -> Result<Self, crypto::CryptoError> {
        Ok(Self {
            pca_id: pca_id.to_string(),
            ciphertext: crypto::encrypt_to(pca_encryption_pub, &request.encode(), rng)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollChallenge {
    pub session: Digest,
    /// 32-byte nonce encrypted to the EK companion key.
    pub challenge: Ciphertext,
}
wire_struct!(EnrollChallenge, EnrollChallenge, { session: digest, challenge: ciphertext });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeResponse {
    pub session: Digest,
    /// AIK signature over the session and the decrypted nonce.
    pub signature: Signature,
}
wire_struct!(ChallengeResponse, ChallengeResponse, { session: digest, signature: signature });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationBlob {
    pub session: Digest,
    pub blob: Ciphertext,
}
wire_struct!(ActivationBlob, ActivationBlob, { session: digest, blob: ciphertext });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityStatus {
    Good,
    Revoked,
    Unknown,
}

impl ValidityStatus {
    fn to_u8(self) -> u8 {
        match self {
            Self::Good => 1,
            Self::Revoked => 2,
            Self::Unknown => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            1 => Ok(Self::Good),
            2 => Ok(Self::Revoked),
            3 => Ok(Self::Unknown),
            _ => Err(WireError::InvalidField("validity status")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityQuery {
    pub identity_label: String,
    pub nonce: Nonce,
}
wire_struct!(ValidityQuery, ValidityQuery, { identity_label: string, nonce: nonce });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityResponse {
    pub identity_label: String,
    pub status: ValidityStatus,
    pub nonce: Nonce,
    pub pca_id: String,
    pub signature: Signature,
}

impl WireCodec for ValidityResponse {
    const MSG_TYPE: crate::wire::MsgType = crate::wire::MsgType::ValidityResponse;
    fn write_fields(&self, w: &mut crate::wire::FieldWriter) {
        w.str(&self.identity_label)
            .u8(self.status.to_u8())
            .bytes(&self.nonce)
            .str(&self.pca_id)
            .signature(&self.signature);
    }
    fn read_fields(r: &mut crate::wire::FieldReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            identity_label: r.string()?,
            status: ValidityStatus::from_u8(r.u8()?)?,
            nonce: r.array("nonce")?,
            pca_id: r.string()?,
            signature: r.signature()?,
        })
    }
}
signed_by_field!(ValidityResponse);

/// Auditor-signed authorization to de-pseudonymize one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FraudClaim {
    pub identity_label: String,
    pub reason: String,
    pub issued_at: u64,
    pub signature: Signature,
}
wire_struct!(FraudClaim, FraudClaim, {
    identity_label: string, reason: string, issued_at: u64, signature: signature,
});
signed_by_field!(FraudClaim);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealRequest {
    pub identity_label: String,
    pub claim: Option<FraudClaim>,
}
wire_struct!(RevealRequest, RevealRequest, { identity_label: string, claim: opt_nested });

/// Customer identity encrypted to the auditor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealResponse {
    pub identity_label: String,
    pub sealed_customer_id: Ciphertext,
}
wire_struct!(RevealResponse, RevealResponse, { identity_label: string, sealed_customer_id: ciphertext });

/// PCA/MNO statement that a provider key is authentic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderVouch {
    pub provider_id: String,
    pub provider_pub: PublicKey,
    pub pca_id: String,
    pub signature: Signature,
}
wire_struct!(ProviderVouch, ProviderVouch, {
    provider_id: string, provider_pub: public_key, pca_id: string, signature: signature,
});
signed_by_field!(ProviderVouch);

/// Pseudonym derived from the AIK public key.
pub fn identity_label_for(aik_pub: &PublicKey) -> String {
    format!("pid-{}", hex::encode(&aik_pub.fingerprint().as_bytes()[..8]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowRecord {
    pub ek_digest: Digest,
    pub customer_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub at: u64,
    pub identity_label: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
struct PendingEnrollment {
    request: EnrollRequest,
    nonce: Nonce,
}

#[derive(Debug, Clone)]
pub struct PrivacyCa {
    id: String,
    signing: KeyPair,
    decrypt: KeyPair,
    manufacturers: BTreeMap<String, PublicKey>,
    auditor: Option<PublicKey>,
    auditor_encryption: Option<PublicKey>,
    pending: BTreeMap<Digest, PendingEnrollment>,
    status: BTreeMap<String, ValidityStatus>,
    escrow: BTreeMap<String, EscrowRecord>,
    audit_log: Vec<AuditEntry>,
    issued: usize,
    rng: ChaCha20Rng,
}

impl PrivacyCa {
    pub fn new<R: RngCore + CryptoRng>(id: impl Into<String>, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let mut rng = ChaCha20Rng::from_seed(seed);
        Self {
            id: id.into(),
            signing: KeyPair::generate(KeyUsage::Sign, &mut rng),
            decrypt: KeyPair::generate(KeyUsage::Decrypt, &mut rng),
            manufacturers: BTreeMap::new(),
            auditor: None,
            auditor_encryption: None,
            pending: BTreeMap::new(),
            status: BTreeMap::new(),
            escrow: BTreeMap::new(),
            audit_log: Vec::new(),
            issued: 0,
            rng,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicKey {
        self.signing.public()
    }

    pub fn encryption_public(&self) -> PublicKey {
        self.decrypt.public()
    }

    pub fn trust_manufacturer(&mut self, id: impl Into<String>, root: PublicKey) {
        self.manufacturers.insert(id.into(), root);
    }

    pub fn set_auditor(&mut self, signing: PublicKey, encryption: PublicKey) {
        self.auditor = Some(signing);
        self.auditor_encryption = Some(encryption);
    }

    pub fn issued_count(&self) -> usize {
        self.issued
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit_log
    }

    /// Round one: open the request, check credentials, issue a challenge.
    pub fn begin_enrollment(&mut self, envelope: &EnrollEnvelope) -> Result<EnrollChallenge, PcaError> {
        let plain = crypto::decrypt(&self.decrypt, &envelope.ciphertext).map_err(|_| PcaError::Undecryptable)?;
        let request = EnrollRequest::decode(&plain)?;

        let ek = &request.ek_credential;
        let root = self
            .manufacturers
            .get(&ek.manufacturer_id)
            .ok_or(PcaError::BadEkCredential)?;
        let platform = &request.platform_credential;
        if !ek.verify_with(root)
            || !platform.verify_with(root)
            || platform.manufacturer_id != ek.manufacturer_id
            || platform.ek_digest != ek.ek_pub.fingerprint()
        {
            return Err(PcaError::BadEkCredential);
        }

        let binding = &request.binding;
        if binding.aik_pub != request.aik_pub
            || binding.ek_digest != ek.ek_pub.fingerprint()
            || !binding.verify_with(&request.aik_pub)
        {
            return Err(PcaError::BadAikBinding);
        }

        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let mut salt = [0u8; 32];
        self.rng.fill_bytes(&mut salt);
        let session = hash_parts(&[b"stb-enroll-session", &binding.encode(), &salt]);
        let challenge = crypto::encrypt_to(&ek.ek_encryption_pub, &nonce, &mut self.rng)
            .map_err(|_| PcaError::BadEkCredential)?;
        self.pending.insert(session, PendingEnrollment { request, nonce });
        Ok(EnrollChallenge { session, challenge })
    }

    /// Round two: check the AIK-signed nonce, issue and wrap the credential.
    pub fn complete_enrollment(&mut self, response: &ChallengeResponse, now: u64) -> Result<ActivationBlob, PcaError> {
        let pending = self.pending.remove(&response.session).ok_or(PcaError::UnknownSession)?;
        let input = enroll_response_input(&response.session, &pending.nonce);
        if !crypto::verify(&pending.request.aik_pub, &input, &response.signature) {
            return Err(PcaError::ChallengeFailed);
        }
        let request = pending.request;
        let identity_label = identity_label_for(&request.aik_pub);
        let mut credential = AikCredential {
            identity_label: identity_label.clone(),
            aik_pub: request.aik_pub,
            manufacturer_id: request.platform_credential.manufacturer_id.clone(),
            model: request.platform_credential.model.clone(),
            issued_at: now,
            pca_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        credential.sign_with(&self.signing).expect("PCA signing key");
        let payload = ActivationPayload {
            key_label: request.binding.label.clone(),
            credential,
        };
        let blob = crypto::encrypt_to(&request.ek_credential.ek_encryption_pub, &payload.encode(), &mut self.rng)
            .map_err(|_| PcaError::BadEkCredential)?;
        self.escrow.insert(
            identity_label.clone(),
            EscrowRecord {
                ek_digest: request.ek_credential.ek_pub.fingerprint(),
                customer_id: request.customer_id,
            },
        );
        self.status.insert(identity_label, ValidityStatus::Good);
        self.issued += 1;
        Ok(ActivationBlob {
            session: response.session,
            blob,
        })
    }

    pub fn status(&self, identity_label: &str) -> ValidityStatus {
        self.status.get(identity_label).copied().unwrap_or(ValidityStatus::Unknown)
    }

    pub fn check_validity(&self, query: &ValidityQuery) -> ValidityResponse {
        let mut resp = ValidityResponse {
            identity_label: query.identity_label.clone(),
            status: self.status(&query.identity_label),
            nonce: query.nonce,
            pca_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        resp.sign_with(&self.signing).expect("PCA signing key");
        resp
    }

    pub fn revoke(&mut self, identity_label: &str) -> Result<(), PcaError> {
        match self.status.get_mut(identity_label) {
            Some(s) => {
                *s = ValidityStatus::Revoked;
                Ok(())
            }
            None => Err(PcaError::Unknown(identity_label.to_string())),
        }
    }

    pub fn vouch_for_provider(&self, provider_id: &str, provider_pub: PublicKey) -> ProviderVouch {
        let mut v = ProviderVouch {
            provider_id: provider_id.to_string(),
            provider_pub,
            pca_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        v.sign_with(&self.signing).expect("PCA signing key");
        v
    }

    pub fn reveal_identity(
        &mut self,
        identity_label: &str,
        claim: Option<&FraudClaim>,
        now: u64,
    ) -> Result<String, PcaError> {
        let claim = claim.ok_or(PcaError::Unauthorized)?;
        let auditor = self.auditor.as_ref().ok_or(PcaError::Unauthorized)?;
        if claim.identity_label != identity_label || !claim.verify_with(auditor) {
            return Err(PcaError::Unauthorized);
        }
        let record = self
            .escrow
            .get(identity_label)
            .ok_or_else(|| PcaError::Unknown(identity_label.to_string()))?;
        self.audit_log.push(AuditEntry {
            at: now,
            identity_label: identity_label.to_string(),
            reason: claim.reason.clone(),
        });
        Ok(record.customer_id.clone())
    }

    /// Network form of [`PrivacyCa::reveal_identity`]; the answer is
    /// readable only by the auditor.
    pub fn handle_reveal(&mut self, req: &RevealRequest, now: u64) -> Result<RevealResponse, PcaError> {
        let customer = self.reveal_identity(&req.identity_label, req.claim.as_ref(), now)?;
        let to = self.auditor_encryption.ok_or(PcaError::Unauthorized)?;
        Ok(RevealResponse {
            identity_label: req.identity_label.clone(),
            sealed_customer_id: crypto::encrypt_to(&to, customer.as_bytes(), &mut self.rng)
                .map_err(|_| PcaError::Unauthorized)?,
        })
    }
}

/// Holder of the fraud-claim signing key.
#[derive(Debug, Clone)]
pub struct Auditor {
    signing: KeyPair,
    decrypt: KeyPair,
}

impl Auditor {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            signing: KeyPair::generate(KeyUsage::Sign, rng),
            decrypt: KeyPair::generate(KeyUsage::Decrypt, rng),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.signing.public()
    }

    pub fn encryption_public(&self) -> PublicKey {
        self.decrypt.public()
    }

    pub fn claim(&self, identity_label: &str, reason: &str, now: u64) -> FraudClaim {
        let mut c = FraudClaim {
            identity_label: identity_label.to_string(),
            reason: reason.to_string(),
            issued_at: now,
            signature: Signature::EMPTY,
        };
        c.sign_with(&self.signing).expect("auditor signing key");
        c
    }

    pub fn open(&self, resp: &RevealResponse) -> Option<String> {
        let plain = crypto::decrypt(&self.decrypt, &resp.sealed_customer_id).ok()?;
        String::from_utf8(plain.to_vec()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::tests::AUTH;
    use crate::tpm::{Manufacturer, TpmState};

    struct Fixture {
        rng: ChaCha20Rng,
        maker: Manufacturer,
        pca: PrivacyCa,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let maker = Manufacturer::new("acme-tpm", &mut rng);
        let mut pca = PrivacyCa::new("pca", &mut rng);
        pca.trust_manufacturer(maker.id(), maker.root_public());
        Fixture { rng, maker, pca }
    }

    fn request(tpm: &mut TpmState, label: &str, customer: &str) -> EnrollRequest {
        let (aik_pub, binding) = tpm.make_identity(&AUTH, label).unwrap();
        EnrollRequest {
            ek_credential: tpm.ek_credential().clone(),
            platform_credential: tpm.platform_credential().clone(),
            aik_pub,
            binding,
            customer_id: customer.into(),
        }
    }

    fn enroll(f: &mut Fixture, tpm: &mut TpmState, label: &str) -> Result<AikCredential, PcaError> {
        let req = request(tpm, label, "alice@example");
        let env = EnrollEnvelope::seal("pca", &f.pca.encryption_public(), &req, &mut f.rng).unwrap();
        let ch = f.pca.begin_enrollment(&env)?;
        let sig = tpm.respond_challenge(&AUTH, label, &ch.session, &ch.challenge).unwrap();
        let blob = f.pca.complete_enrollment(&ChallengeResponse { session: ch.session, signature: sig }, 10)?;
        Ok(tpm.activate_identity(&AUTH, label, &blob.blob).unwrap())
    }

    fn owned_tpm(f: &mut Fixture) -> TpmState {
        let mut t = f.maker.manufacture("stb-3000", &mut f.rng);
        t.take_ownership(&AUTH).unwrap();
        t
    }

    #[test]
    fn genuine_enrollment_activates() {
        let mut f = fixture(1);
        let mut tpm = owned_tpm(&mut f);
        let cred = enroll(&mut f, &mut tpm, "aik").unwrap();
        assert!(cred.verify_with(&f.pca.public()));
        assert_eq!(tpm.aik_credential("aik"), Some(&cred));
        let enc = cred.encode();
        let ek = tpm.ek_credential().ek_pub.to_bytes();
        assert!(!enc.windows(ek.len()).any(|w| w == ek.as_slice()));
        assert!(!enc.windows(13).any(|w| w == b"alice@example"));
        assert_eq!(f.pca.issued_count(), 1);
    }

    #[test]
    fn unknown_manufacturer_is_rejected() {
        let mut f = fixture(2);
        let rogue = Manufacturer::new("acme-tpm", &mut f.rng);
        let mut tpm = rogue.manufacture("stb-3000", &mut f.rng);
        tpm.take_ownership(&AUTH).unwrap();
        assert_eq!(enroll(&mut f, &mut tpm, "aik").unwrap_err(), PcaError::BadEkCredential);
    }

    #[test]
    fn replayed_aik_with_own_ek_fails_binding() {
        let mut f = fixture(3);
        let mut victim = owned_tpm(&mut f);
        let mut attacker = owned_tpm(&mut f);
        let victim_req = request(&mut victim, "aik", "victim");
        let mut req = request(&mut attacker, "aik", "mallory");
        req.aik_pub = victim_req.aik_pub;
        req.binding = victim_req.binding;
        let env = EnrollEnvelope::seal("pca", &f.pca.encryption_public(), &req, &mut f.rng).unwrap();
        assert_eq!(f.pca.begin_enrollment(&env).unwrap_err(), PcaError::BadAikBinding);
    }

    #[test]
    fn stolen_ek_credential_fails_challenge() {
        let mut f = fixture(4);
        let victim = owned_tpm(&mut f);
        let mut attacker = owned_tpm(&mut f);
        // attacker presents the victim's public EK credential with its own AIK,
        // re-signing the binding with that AIK over the victim EK digest
        let (aik_pub, mut binding) = attacker.make_identity(&AUTH, "aik").unwrap();
        binding.ek_digest = victim.ek_credential().ek_pub.fingerprint();
        let req = EnrollRequest {
            ek_credential: victim.ek_credential().clone(),
            platform_credential: victim.platform_credential().clone(),
            aik_pub,
            binding,
            customer_id: "mallory".into(),
        };
        let env = EnrollEnvelope::seal("pca", &f.pca.encryption_public(), &req, &mut f.rng).unwrap();
        // the attacker cannot re-sign without access to the TPM-held AIK, so the
        // altered binding already fails
        assert_eq!(f.pca.begin_enrollment(&env).unwrap_err(), PcaError::BadAikBinding);

        // with a host-held key the binding passes but the challenge cannot be read
        let rogue = KeyPair::generate(KeyUsage::Sign, &mut f.rng);
        let mut binding = IdentityBinding {
            label: "aik".into(),
            aik_pub: rogue.public(),
            ek_digest: victim.ek_credential().ek_pub.fingerprint(),
            signature: Signature::EMPTY,
        };
        binding.sign_with(&rogue).unwrap();
        let req = EnrollRequest {
            ek_credential: victim.ek_credential().clone(),
            platform_credential: victim.platform_credential().clone(),
            aik_pub: rogue.public(),
            binding,
            customer_id: "mallory".into(),
        };
        let env = EnrollEnvelope::seal("pca", &f.pca.encryption_public(), &req, &mut f.rng).unwrap();
        let ch = f.pca.begin_enrollment(&env).unwrap();
        let guess = [0u8; 32];
        let sig = crypto::sign(&rogue, &enroll_response_input(&ch.session, &guess)).unwrap();
        let resp = ChallengeResponse { session: ch.session, signature: sig };
        assert_eq!(f.pca.complete_enrollment(&resp, 0).unwrap_err(), PcaError::ChallengeFailed);
        assert_eq!(f.pca.issued_count(), 0);
    }

    #[test]
    fn validity_lifecycle() {
        let mut f = fixture(5);
        let mut tpm = owned_tpm(&mut f);
        let cred = enroll(&mut f, &mut tpm, "aik").unwrap();
        let q = ValidityQuery { identity_label: cred.identity_label.clone(), nonce: [1; 32] };
        let r = f.pca.check_validity(&q);
        assert_eq!(r.status, ValidityStatus::Good);
        assert!(r.verify_with(&f.pca.public()));
        f.pca.revoke(&cred.identity_label).unwrap();
        assert_eq!(f.pca.check_validity(&q).status, ValidityStatus::Revoked);
        let unknown = ValidityQuery { identity_label: "pid-none".into(), nonce: [2; 32] };
        assert_eq!(f.pca.check_validity(&unknown).status, ValidityStatus::Unknown);
        assert_eq!(ValidityResponse::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn reveal_requires_auditor() {
        let mut f = fixture(6);
        let auditor = Auditor::new(&mut f.rng);
        f.pca.set_auditor(auditor.public(), auditor.encryption_public());
        let mut tpm = owned_tpm(&mut f);
        let cred = enroll(&mut f, &mut tpm, "aik").unwrap();
        let label = cred.identity_label.as_str();
        assert_eq!(f.pca.reveal_identity(label, None, 0), Err(PcaError::Unauthorized));

        let provider = KeyPair::generate(KeyUsage::Sign, &mut f.rng);
        let mut forged = FraudClaim {
            identity_label: label.into(),
            reason: "x".into(),
            issued_at: 0,
            signature: Signature::EMPTY,
        };
        forged.sign_with(&provider).unwrap();
        assert_eq!(f.pca.reveal_identity(label, Some(&forged), 0), Err(PcaError::Unauthorized));

        let claim = auditor.claim(label, "chargeback", 5);
        assert_eq!(f.pca.reveal_identity(label, Some(&claim), 5).unwrap(), "alice@example");
        assert_eq!(f.pca.audit_log().len(), 1);

        let resp = f
            .pca
            .handle_reveal(&RevealRequest { identity_label: label.into(), claim: Some(claim) }, 6)
            .unwrap();
        assert_eq!(auditor.open(&resp).as_deref(), Some("alice@example"));

        let other = auditor.claim("pid-none", "x", 0);
        assert!(matches!(f.pca.reveal_identity("pid-none", Some(&other), 0), Err(PcaError::Unknown(_))));
    }
}
