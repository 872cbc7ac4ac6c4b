// Licensed under the Apache-2.0 license

//! Service provider: offers, registration, entitlements, permits and the
//! scrambling head-end.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::{seeded, AttestationChallenge, ChallengeBook};
use crate::boot::{BootLog, ReferenceTable, UntrustedReason, Verdict};
use crate::cas::{CasError, EntitlementGrant, OnlinePermit, PermitRequest, UsageConstraints};
use crate::crypto::{self, KeyPair, KeyUsage, PublicKey, Signature};
use crate::pca::{AikCredential, ProviderVouch, ValidityQuery, ValidityResponse, ValidityStatus};
use crate::scrambler::{packetize, scramble_stream, EntitlementSecret, TransportPacket, SECRET_LEN};
use crate::tpm::{BindKeyCertificate, Nonce, Quote};
use crate::wire::{FieldReader, FieldWriter, MsgType, Signed, WireCodec, WireError};
use crate::{signed_by_field, wire_struct};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChargingModel {
    Prepaid,
    Postpaid,
    ConstrainedKey,
}

impl ChargingModel {
    pub fn code(self) -> u8 {
        match self {
            Self::Prepaid => 1,
            Self::Postpaid => 2,
            Self::ConstrainedKey => 3,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Prepaid),
            2 => Some(Self::Postpaid),
            3 => Some(Self::ConstrainedKey),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Prepaid => "prepaid",
            Self::Postpaid => "postpaid",
            Self::ConstrainedKey => "constrained-key",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Prepaid, Self::Postpaid, Self::ConstrainedKey]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceEntry {
    pub stream_id: u16,
    pub cas_id: String,
    pub description: String,
    /// Units charged per crypto period.
    pub tariff: u32,
    pub online_gated: bool,
}
wire_struct!(ServiceEntry, ServiceEntry, {
    stream_id: u16, cas_id: string, description: string, tariff: u32, online_gated: bool,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceOffer {
    pub provider_id: String,
    pub offer_id: String,
    pub services: Vec<ServiceEntry>,
    pub charging_models: Vec<ChargingModel>,
    /// Nonce the registration quote must echo.
    pub attestation_nonce: Nonce,
    pub vouch: Option<ProviderVouch>,
    pub signature: Signature,
}

impl WireCodec for ServiceOffer {
    const MSG_TYPE: MsgType = MsgType::ServiceOffer;
    fn write_fields(&self, w: &mut FieldWriter) {
        let models: Vec<u8> = self.charging_models.iter().map(|m| m.code()).collect();
        w.str(&self.provider_id)
            .str(&self.offer_id)
            .list(&self.services)
            .bytes(&models)
            .bytes(&self.attestation_nonce)
            .opt_nested(self.vouch.as_ref())
            .signature(&self.signature);
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        let provider_id = r.string()?;
        let offer_id = r.string()?;
        let services = r.list()?;
        let charging_models = r
            .bytes()?
            .iter()
            .map(|c| ChargingModel::from_code(*c).ok_or(WireError::InvalidField("charging model")))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            provider_id,
            offer_id,
            services,
            charging_models,
            attestation_nonce: r.array("nonce")?,
            vouch: r.opt_nested()?,
            signature: r.signature()?,
        })
    }
}
signed_by_field!(ServiceOffer);

impl ServiceOffer {
    /// Check the offer under a pre-installed provider root or, failing
    /// that, under a key vouched for by the PCA.
    pub fn authenticate(&self, provider_root: Option<&PublicKey>, pca_pub: &PublicKey) -> bool {
        if provider_root.is_some_and(|root| self.verify_with(root)) {
            return true;
        }
        match &self.vouch {
            Some(v) => v.provider_id == self.provider_id && v.verify_with(pca_pub) && self.verify_with(&v.provider_pub),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OfferRequest {
    pub provider_id: String,
}
wire_struct!(OfferRequest, OfferRequest, { provider_id: string });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionSelection {
    pub offer_id: String,
    pub identity_label: String,
    pub stream_id: u16,
    pub charging_model: u8,
    pub signature: Signature,
}
wire_struct!(SubscriptionSelection, SubscriptionSelection, {
    offer_id: string, identity_label: string, stream_id: u16, charging_model: u8, signature: signature,
});
signed_by_field!(SubscriptionSelection);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationRequest {
    pub credential: AikCredential,
    pub quote: Quote,
    pub boot_log: BootLog,
    pub selection: SubscriptionSelection,
    pub bind_certificate: BindKeyCertificate,
}
wire_struct!(RegistrationRequest, RegistrationRequest, {
    credential: nested, quote: nested, boot_log: nested, selection: nested, bind_certificate: nested,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationReceipt {
    pub provider_id: String,
    pub identity_label: String,
    pub offer_id: String,
    pub stream_id: u16,
    pub charging_model: u8,
    pub tariff: u32,
    pub registered_at: u64,
    pub grant: Option<EntitlementGrant>,
    pub signature: Signature,
}
wire_struct!(RegistrationReceipt, RegistrationReceipt, {
    provider_id: string, identity_label: string, offer_id: string, stream_id: u16, charging_model: u8,
    tariff: u32, registered_at: u64, grant: opt_nested, signature: signature,
});
signed_by_field!(RegistrationReceipt);

/// Request for a usage-constrained entitlement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRequest {
    pub identity_label: String,
    pub stream_id: u16,
    pub constraints: UsageConstraints,
    pub quote: Quote,
    pub boot_log: BootLog,
    pub signature: Signature,
}
wire_struct!(KeyRequest, KeyRequest, {
    identity_label: string, stream_id: u16, constraints: nested, quote: nested, boot_log: nested,
    signature: signature,
});
signed_by_field!(KeyRequest);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("AIK credential does not verify")]
    BadCredential,
    #[error("validity response does not verify or does not match a query")]
    BadValidityResponse,
    #[error("credential revoked")]
    RevokedCredential,
    #[error("attestation failed: {}", .0.code())]
    Untrusted(UntrustedReason),
    #[error("selection signature does not verify")]
    BadSelectionSignature,
    #[error("unknown offer")]
    UnknownOffer,
    #[error("service {0} not offered")]
    UnknownService(u16),
    #[error("charging model not offered")]
    UnsupportedChargingModel,
    #[error("bind key certificate does not verify")]
    BadBindCertificate,
    #[error("unknown subscriber")]
    UnknownSubscriber,
    #[error("request signature does not verify")]
    BadRequestSignature,
    #[error("malformed usage constraints")]
    MalformedConstraints,
    #[error("pseudonym not on the access control list")]
    NotOnAcl,
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadCredential => "BadCredential",
            Self::BadValidityResponse => "BadValidityResponse",
            Self::RevokedCredential => "RevokedCredential",
            Self::Untrusted(_) => "Untrusted",
            Self::BadSelectionSignature => "BadSelectionSignature",
            Self::UnknownOffer => "UnknownOffer",
            Self::UnknownService(_) => "UnknownService",
            Self::UnsupportedChargingModel => "UnsupportedChargingModel",
            Self::BadBindCertificate => "BadBindCertificate",
            Self::UnknownSubscriber => "UnknownSubscriber",
            Self::BadRequestSignature => "BadRequestSignature",
            Self::MalformedConstraints => "MalformedConstraints",
            Self::NotOnAcl => "NotOnAcl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscriber {
    pub aik_pub: PublicKey,
    pub bind_pub: PublicKey,
    pub stream_id: u16,
    pub charging_model: ChargingModel,
    pub registered_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedKey {
    pub identity_label: String,
    pub stream_id: u16,
    pub constraints: UsageConstraints,
    pub issued_at: u64,
}

#[derive(Debug, Clone)]
struct Service {
    entry: ServiceEntry,
    secret: EntitlementSecret,
}

#[derive(Debug, Clone)]
pub struct ServiceProvider {
    id: String,
    key: KeyPair,
    pca_pub: PublicKey,
    reference: ReferenceTable,
    services: BTreeMap<u16, Service>,
    models: Vec<ChargingModel>,
    vouch: Option<ProviderVouch>,
    offers: BTreeSet<String>,
    challenges: ChallengeBook,
    validity_nonces: BTreeSet<Nonce>,
    subscribers: BTreeMap<String, Subscriber>,
    acl: BTreeMap<u16, BTreeSet<String>>,
    key_registry: Vec<IssuedKey>,
    entitlement_lifetime: u64,
    permit_span: u32,
    rng: ChaCha20Rng,
}

pub const DEFAULT_ENTITLEMENT_LIFETIME: u64 = 30 * 86_400;
pub const DEFAULT_PERMIT_SPAN: u32 = 10;

impl ServiceProvider {
    pub fn new<R: RngCore + CryptoRng>(
        id: impl Into<String>,
        pca_pub: PublicKey,
        reference: ReferenceTable,
        rng: &mut R,
    ) -> Self {
        let mut rng = seeded(rng);
        Self {
            id: id.into(),
            key: KeyPair::generate(KeyUsage::Sign, &mut rng),
            pca_pub,
            reference,
            services: BTreeMap::new(),
            models: vec![ChargingModel::Prepaid, ChargingModel::Postpaid, ChargingModel::ConstrainedKey],
            vouch: None,
            offers: BTreeSet::new(),
            challenges: ChallengeBook::default(),
            validity_nonces: BTreeSet::new(),
            subscribers: BTreeMap::new(),
            acl: BTreeMap::new(),
            key_registry: Vec::new(),
            entitlement_lifetime: DEFAULT_ENTITLEMENT_LIFETIME,
            permit_span: DEFAULT_PERMIT_SPAN,
            rng,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn add_service(&mut self, entry: ServiceEntry) {
        let mut secret = [0u8; SECRET_LEN];
        self.rng.fill_bytes(&mut secret);
        self.services.insert(
            entry.stream_id,
            Service {
                entry,
                secret: EntitlementSecret::new(secret),
            },
        );
    }

    pub fn service(&self, stream_id: u16) -> Option<&ServiceEntry> {
        self.services.get(&stream_id).map(|s| &s.entry)
    }

    pub fn set_charging_models(&mut self, models: Vec<ChargingModel>) {
        self.models = models;
    }

    pub fn set_vouch(&mut self, vouch: ProviderVouch) {
        self.vouch = Some(vouch);
    }

    pub fn set_reference(&mut self, reference: ReferenceTable) {
        self.reference = reference;
    }

    pub fn set_entitlement_lifetime(&mut self, seconds: u64) {
        self.entitlement_lifetime = seconds;
    }

    pub fn set_permit_span(&mut self, periods: u32) {
        self.permit_span = periods.max(1);
    }

    pub fn allow(&mut self, stream_id: u16, identity_label: impl Into<String>) {
        self.acl.entry(stream_id).or_default().insert(identity_label.into());
    }

    pub fn subscriber(&self, identity_label: &str) -> Option<&Subscriber> {
        self.subscribers.get(identity_label)
    }

    pub fn subscribers(&self) -> impl Iterator<Item = (&String, &Subscriber)> {
        self.subscribers.iter()
    }

    pub fn key_registry(&self) -> &[IssuedKey] {
        &self.key_registry
    }

    pub fn make_offer(&mut self) -> ServiceOffer {
        let offer_id = format!("{}-offer-{}", self.id, self.offers.len() + 1);
        self.offers.insert(offer_id.clone());
        let mut offer = ServiceOffer {
            provider_id: self.id.clone(),
            offer_id,
            services: self.services.values().map(|s| s.entry.clone()).collect(),
            charging_models: self.models.clone(),
            attestation_nonce: self.challenges.issue(&mut self.rng),
            vouch: self.vouch.clone(),
            signature: Signature::EMPTY,
        };
        offer.sign_with(&self.key).expect("provider signing key");
        offer
    }

    pub fn challenge(&mut self, purpose: &str) -> AttestationChallenge {
        AttestationChallenge {
            purpose: purpose.to_string(),
            nonce: self.challenges.issue(&mut self.rng),
        }
    }

    pub fn validity_query(&mut self, identity_label: &str) -> ValidityQuery {
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        self.validity_nonces.insert(nonce);
        ValidityQuery {
            identity_label: identity_label.to_string(),
            nonce,
        }
    }

    fn check_validity(&mut self, label: &str, validity: &ValidityResponse) -> Result<(), ProviderError> {
        if validity.identity_label != label
            || !self.validity_nonces.remove(&validity.nonce)
            || !validity.verify_with(&self.pca_pub)
        {
            return Err(ProviderError::BadValidityResponse);
        }
        match validity.status {
            ValidityStatus::Good => Ok(()),
            ValidityStatus::Revoked => Err(ProviderError::RevokedCredential),
            ValidityStatus::Unknown => Err(ProviderError::BadCredential),
        }
    }

    fn attest(&mut self, log: &BootLog, quote: &Quote, aik_pub: &PublicKey) -> Result<(), ProviderError> {
        match self.challenges.attest(log, &self.reference, quote, aik_pub) {
            Verdict::Trusted { .. } => Ok(()),
            Verdict::Untrusted(r) => Err(ProviderError::Untrusted(r)),
        }
    }

    fn grant(
        &mut self,
        identity_label: &str,
        bind_pub: &PublicKey,
        stream_id: u16,
        constraints: UsageConstraints,
        now: u64,
    ) -> Result<EntitlementGrant, ProviderError> {
        let service = self.services.get(&stream_id).ok_or(ProviderError::UnknownService(stream_id))?;
        let wrapped_secret = crypto::encrypt_to(bind_pub, service.secret.as_bytes(), &mut self.rng)
            .map_err(|_| ProviderError::BadBindCertificate)?;
        let mut g = EntitlementGrant {
            cas_id: service.entry.cas_id.clone(),
            stream_id,
            identity_label: identity_label.to_string(),
            wrapped_secret,
            constraints,
            online_gated: service.entry.online_gated,
            issued_at: now,
            issuer_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        g.sign_with(&self.key).expect("provider signing key");
        self.key_registry.push(IssuedKey {
            identity_label: identity_label.to_string(),
            stream_id,
            constraints,
            issued_at: now,
        });
        Ok(g)
    }

    pub fn register(
        &mut self,
        req: &RegistrationRequest,
        validity: &ValidityResponse,
        now: u64,
    ) -> Result<RegistrationReceipt, ProviderError> {
        let cred = &req.credential;
        if !cred.verify_with(&self.pca_pub) {
            return Err(ProviderError::BadCredential);
        }
        let label = cred.identity_label.clone();
        self.check_validity(&label, validity)?;
        self.attest(&req.boot_log, &req.quote, &cred.aik_pub)?;

        let sel = &req.selection;
        if sel.identity_label != label || !sel.verify_with(&cred.aik_pub) {
            return Err(ProviderError::BadSelectionSignature);
        }
        if !self.offers.contains(&sel.offer_id) {
            return Err(ProviderError::UnknownOffer);
        }
        let tariff = self
            .service(sel.stream_id)
            .ok_or(ProviderError::UnknownService(sel.stream_id))?
            .tariff;
        let model = ChargingModel::from_code(sel.charging_model)
            .filter(|m| self.models.contains(m))
            .ok_or(ProviderError::UnsupportedChargingModel)?;
        let cert = &req.bind_certificate;
        if cert.identity_label != label || !cert.verify_with(&cred.aik_pub) {
            return Err(ProviderError::BadBindCertificate);
        }

        self.subscribers.insert(
            label.clone(),
            Subscriber {
                aik_pub: cred.aik_pub,
                bind_pub: cert.bind_pub,
                stream_id: sel.stream_id,
                charging_model: model,
                registered_at: now,
            },
        );
        let grant = match model {
            ChargingModel::ConstrainedKey => None,
            _ => {
                let window = UsageConstraints::window(now, now + self.entitlement_lifetime);
                Some(self.grant(&label, &cert.bind_pub, sel.stream_id, window, now)?)
            }
        };
        let mut receipt = RegistrationReceipt {
            provider_id: self.id.clone(),
            identity_label: label,
            offer_id: sel.offer_id.clone(),
            stream_id: sel.stream_id,
            charging_model: model.code(),
            tariff,
            registered_at: now,
            grant,
            signature: Signature::EMPTY,
        };
        receipt.sign_with(&self.key).expect("provider signing key");
        Ok(receipt)
    }

    pub fn issue_constrained_key(&mut self, req: &KeyRequest, now: u64) -> Result<EntitlementGrant, ProviderError> {
        let sub = self
            .subscribers
            .get(&req.identity_label)
            .cloned()
            .ok_or(ProviderError::UnknownSubscriber)?;
        if !req.verify_with(&sub.aik_pub) {
            return Err(ProviderError::BadRequestSignature);
        }
        req.constraints
            .validate()
            .map_err(|_: CasError| ProviderError::MalformedConstraints)?;
        self.attest(&req.boot_log, &req.quote, &sub.aik_pub)?;
        self.grant(&req.identity_label, &sub.bind_pub, req.stream_id, req.constraints, now)
    }

    pub fn grant_online_permit(
        &mut self,
        req: &PermitRequest,
        validity: &ValidityResponse,
        now: u64,
    ) -> Result<OnlinePermit, ProviderError> {
        let sub = self
            .subscribers
            .get(&req.identity_label)
            .cloned()
            .ok_or(ProviderError::UnknownSubscriber)?;
        if !req.verify_with(&sub.aik_pub) {
            return Err(ProviderError::BadRequestSignature);
        }
        self.check_validity(&req.identity_label, validity)?;
        let on_acl = self
            .acl
            .get(&req.stream_id)
            .is_some_and(|labels| labels.contains(&req.identity_label));
        if !on_acl {
            return Err(ProviderError::NotOnAcl);
        }
        let cas_id = self
            .service(req.stream_id)
            .ok_or(ProviderError::UnknownService(req.stream_id))?
            .cas_id
            .clone();
        let period_until = req
            .period_until
            .min(req.period_from.saturating_add(self.permit_span - 1))
            .max(req.period_from);
        let mut permit = OnlinePermit {
            identity_label: req.identity_label.clone(),
            cas_id,
            stream_id: req.stream_id,
            period_from: req.period_from,
            period_until,
            nonce: req.nonce,
            issued_at: now,
            signature: Signature::EMPTY,
        };
        permit.sign_with(&self.key).expect("provider signing key");
        Ok(permit)
    }

    /// Scrambled broadcast of `content` on `stream_id`.
    pub fn broadcast(&self, stream_id: u16, content: &[u8], period_packets: u32) -> Option<Vec<TransportPacket>> {
        let service = self.services.get(&stream_id)?;
        let clear = packetize(stream_id, content, period_packets);
        Some(scramble_stream(&service.secret, &clear).expect("clear packets"))
    }
}
