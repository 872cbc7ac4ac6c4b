// Licensed under the Apache-2.0 license

//! Trusted set-top box.
//!
//! Every protocol step is split into "build the outgoing message" and
//! "handle the answer" so the same code runs in direct calls and behind a
//! simulated network. [`SetTopBox::take_ownership_online`] and
//! [`SetTopBox::watch`] chain the steps for direct use.

use std::collections::BTreeMap;

use thiserror::Error;
use zeroize::Zeroizing;

use crate::boot::{boot, BootImage, BootLog};
use crate::cas::{CasError, CasInstance, EntitlementGrant, OnlinePermit, PermitRequest, UsageConstraints};
use crate::crypto::{self, hash, hash_parts, Ciphertext, Digest, PublicKey, Signature};
use crate::pca::{
    ActivationBlob, AikCredential, ChallengeResponse, EnrollChallenge, EnrollEnvelope, EnrollRequest, PcaError,
    PrivacyCa,
};
use crate::scrambler::{descramble, TransportPacket, PAYLOAD_LEN};
use crate::services::charging::{
    ConsumptionBatch, ConsumptionRecord, DepositVoucher, PullRequest, SealedVoucher, SettlementAck, TopUpRequest,
};
use crate::services::timestamp::{TimeAuthority, TimestampRequest, TimestampToken};
use crate::services::update::{DeviceDescription, SealedUpdate, UpdatePackage};
use crate::services::vendor::{
    ChargingModel, KeyRequest, RegistrationReceipt, RegistrationRequest, ServiceOffer, SubscriptionSelection,
};
use crate::services::AttestationChallenge;
use crate::tpm::{BindKeyCertificate, Nonce, OwnerAuth, Quote, TpmError, TpmState};
use crate::wire::{Signed, WireCodec, WireError};

pub const AIK_LABEL: &str = "aik-1";
pub const BIND_LABEL: &str = "bind-1";
/// Component replaced by firmware updates.
pub const FIRMWARE_COMPONENT: &str = "cas-firmware";
pub const WATERMARK_LEN: usize = 16;
pub const WATERMARK_OFFSET: usize = PAYLOAD_LEN - WATERMARK_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoxError {
    #[error("TPM already has an owner")]
    AlreadyOwned,
    #[error("enrollment failed: {0}")]
    EnrollmentFailed(String),
    #[error("no activated AIK")]
    InactiveAik,
    #[error("no certified bind key")]
    NoBindKey,
    #[error("offer signature does not verify")]
    BadOfferSignature,
    #[error("offer does not carry stream {0} or charging model")]
    NotOffered(u16),
    #[error("receipt does not verify")]
    BadReceiptSignature,
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("not registered for stream {0}")]
    NotRegistered(u16),
    #[error("no CAS instance {0}")]
    UnknownCas(String),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error("deposit exhausted")]
    DepositExhausted,
    #[error("payload is not for this device")]
    NotForThisDevice,
    #[error("voucher signature does not verify")]
    BadChargingSignature,
    #[error("voucher replay detected")]
    ReplayDetected,
    #[error("pull request signature does not verify")]
    BadPullRequestSignature,
    #[error("settlement acknowledgement does not verify")]
    BadAckSignature,
    #[error("timestamp token does not verify")]
    BadTimestamp,
    #[error("update package signature does not verify")]
    BadUpdateSignature,
    #[error("nonce does not match an outstanding request")]
    NonceMismatch,
    #[error("permit does not verify")]
    BadPermit,
    #[error(transparent)]
    Tpm(#[from] TpmError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl BoxError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::AlreadyOwned => "AlreadyOwned",
            Self::EnrollmentFailed(_) => "EnrollmentFailed",
            Self::InactiveAik => "InactiveAik",
            Self::NoBindKey => "NoBindKey",
            Self::BadOfferSignature => "BadOfferSignature",
            Self::NotOffered(_) => "NotOffered",
            Self::BadReceiptSignature => "BadReceiptSignature",
            Self::UnknownProvider(_) => "UnknownProvider",
            Self::NotRegistered(_) => "NotRegistered",
            Self::UnknownCas(_) => "UnknownCas",
            Self::Cas(e) => e.code(),
            Self::DepositExhausted => "DepositExhausted",
            Self::NotForThisDevice => "NotForThisDevice",
            Self::BadChargingSignature => "BadChargingSignature",
            Self::ReplayDetected => "ReplayDetected",
            Self::BadPullRequestSignature => "BadPullRequestSignature",
            Self::BadAckSignature => "BadAckSignature",
            Self::BadTimestamp => "BadTimestamp",
            Self::BadUpdateSignature => "BadUpdateSignature",
            Self::NonceMismatch => "NonceMismatch",
            Self::BadPermit => "BadPermit",
            Self::Tpm(e) => e.code(),
            Self::Wire(e) => e.code(),
        }
    }
}

/// Replace the firmware component of a boot chain, appending it when
/// absent.
pub fn install_firmware(images: &mut Vec<BootImage>, firmware: &[u8]) {
    let mut replaced = false;
    for img in images.iter_mut().filter(|i| i.name == FIRMWARE_COMPONENT) {
        img.image = firmware.to_vec();
        replaced = true;
    }
    if !replaced {
        let pcr = images.last().map_or(0, |i| i.pcr_index);
        images.push(BootImage::new(pcr, FIRMWARE_COMPONENT, firmware.to_vec()));
    }
}

#[derive(Debug, Clone)]
pub struct BoxConfig {
    pub model: String,
    pub hw_revision: String,
    pub firmware_version: String,
    pub customer_id: String,
    pub owner_auth: OwnerAuth,
    pub boot_images: Vec<BootImage>,
    pub initial_deposit: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub stream_id: u16,
    pub tariff: u32,
    pub charging_model: ChargingModel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub ciphertext: Vec<u8>,
    pub units: u32,
    pub settled: bool,
}

/// Deposit movements, for conservation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DepositLedger {
    pub initial: u64,
    pub applied: u64,
    pub charged: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchMode {
    Prepaid,
    Postpaid,
    /// Key already paid for; no per-period charge.
    Unmetered,
}

impl From<ChargingModel> for WatchMode {
    fn from(m: ChargingModel) -> Self {
        match m {
            ChargingModel::Prepaid => WatchMode::Prepaid,
            ChargingModel::Postpaid => WatchMode::Postpaid,
            ChargingModel::ConstrainedKey => WatchMode::Unmetered,
        }
    }
}

/// What one period of playback produced.
#[derive(Debug, Clone)]
pub struct PeriodOutput {
    pub packets: Vec<TransportPacket>,
    pub timestamp_request: Option<TimestampRequest>,
}

#[derive(Debug, Clone)]
struct TrustAnchors {
    pca_id: String,
    pca_pub: PublicKey,
    pca_encryption: PublicKey,
    tsa: Option<PublicKey>,
    charging: Option<(String, PublicKey, PublicKey)>,
    update_service: BTreeMap<String, PublicKey>,
    providers: BTreeMap<String, PublicKey>,
}

#[derive(Debug, Clone)]
pub struct SetTopBox {
    name: String,
    tpm: TpmState,
    config: BoxConfig,
    owner_auth: Zeroizing<OwnerAuth>,
    trust: TrustAnchors,
    boot_log: BootLog,
    credential: Option<AikCredential>,
    bind_certificate: Option<BindKeyCertificate>,
    cas: BTreeMap<String, CasInstance>,
    registrations: BTreeMap<u16, Registration>,
    deposit: u64,
    ledger: DepositLedger,
    consumption_log: Vec<StoredRecord>,
    pending_records: BTreeMap<Digest, ConsumptionRecord>,
    metered_units: u64,
    permits: BTreeMap<(String, u16), OnlinePermit>,
    permit_nonces: BTreeMap<Nonce, (String, u16)>,
    update_nonce: Option<Nonce>,
    pull_seen: Vec<Nonce>,
}

impl SetTopBox {
    /// Power on a freshly delivered box and run the measured boot.
    pub fn new(
        name: impl Into<String>,
        mut tpm: TpmState,
        config: BoxConfig,
        pca_id: impl Into<String>,
        pca_pub: PublicKey,
        pca_encryption: PublicKey,
    ) -> Result<Self, BoxError> {
        tpm.reboot();
        let boot_log = boot(&mut tpm, &config.boot_images)?;
        Ok(Self {
            name: name.into(),
            tpm,
            owner_auth: Zeroizing::new(config.owner_auth),
            deposit: config.initial_deposit,
            ledger: DepositLedger {
                initial: config.initial_deposit,
                ..Default::default()
            },
            config,
            trust: TrustAnchors {
                pca_id: pca_id.into(),
                pca_pub,
                pca_encryption,
                tsa: None,
                charging: None,
                update_service: BTreeMap::new(),
                providers: BTreeMap::new(),
            },
            boot_log,
            credential: None,
            bind_certificate: None,
            cas: BTreeMap::new(),
            registrations: BTreeMap::new(),
            consumption_log: Vec::new(),
            pending_records: BTreeMap::new(),
            metered_units: 0,
            permits: BTreeMap::new(),
            permit_nonces: BTreeMap::new(),
            update_nonce: None,
            pull_seen: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trust_provider(&mut self, id: impl Into<String>, root: PublicKey) {
        self.trust.providers.insert(id.into(), root);
    }

    pub fn trust_time_authority(&mut self, key: PublicKey) {
        self.trust.tsa = Some(key);
    }

    pub fn trust_charging(&mut self, id: impl Into<String>, signing: PublicKey, encryption: PublicKey) {
        self.trust.charging = Some((id.into(), signing, encryption));
    }

    pub fn trust_update_service(&mut self, id: impl Into<String>, key: PublicKey) {
        self.trust.update_service.insert(id.into(), key);
    }

    /// Add a CAS instance that accepts entitlements signed by `issuer`.
    pub fn add_cas(&mut self, cas_id: &str, issuer: PublicKey) {
        self.cas
            .entry(cas_id.to_string())
            .or_insert_with(|| CasInstance::new(cas_id, issuer));
    }

    pub fn tpm(&self) -> &TpmState {
        &self.tpm
    }

    pub fn boot_log(&self) -> &BootLog {
        &self.boot_log
    }

    pub fn credential(&self) -> Option<&AikCredential> {
        self.credential.as_ref()
    }

    pub fn identity_label(&self) -> Option<&str> {
        self.credential.as_ref().map(|c| c.identity_label.as_str())
    }

    pub fn bind_certificate(&self) -> Option<&BindKeyCertificate> {
        self.bind_certificate.as_ref()
    }

    pub fn customer_id(&self) -> &str {
        &self.config.customer_id
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    pub fn firmware_version(&self) -> &str {
        &self.config.firmware_version
    }

    pub fn boot_images(&self) -> &[BootImage] {
        &self.config.boot_images
    }

    pub fn deposit(&self) -> u64 {
        self.deposit
    }

    pub fn deposit_ledger(&self) -> DepositLedger {
        self.ledger
    }

    pub fn metered_units(&self) -> u64 {
        self.metered_units
    }

    pub fn consumption_log(&self) -> &[StoredRecord] {
        &self.consumption_log
    }

    pub fn registration(&self, stream_id: u16) -> Option<&Registration> {
        self.registrations.get(&stream_id)
    }

    pub fn cas(&self, cas_id: &str) -> Option<&CasInstance> {
        self.cas.get(cas_id)
    }

    pub fn cas_instances(&self) -> impl Iterator<Item = &CasInstance> {
        self.cas.values()
    }

    /// Registers measured by the boot chain; used for quotes and sealing.
    pub fn selection(&self) -> Vec<u8> {
        self.boot_log.touched()
    }

    /// Every private byte string the box holds.
    pub fn audit_secrets(&self) -> Vec<Vec<u8>> {
        self.tpm.audit_secrets()
    }

    pub fn reboot(&mut self) -> Result<(), BoxError> {
        self.tpm.reboot();
        self.boot_log = boot(&mut self.tpm, &self.config.boot_images)?;
        Ok(())
    }

    /// Replace one boot component and reboot, as malware or a modder would.
    pub fn compromise_boot(&mut self, component: &str, image: &[u8]) -> Result<(), BoxError> {
        for img in self.config.boot_images.iter_mut().filter(|i| i.name == component) {
            img.image = image.to_vec();
        }
        self.reboot()
    }

    fn label(&self) -> Result<String, BoxError> {
        self.identity_label().map(str::to_string).ok_or(BoxError::InactiveAik)
    }

    /// Host software rewrites its stored measurement log without touching
    /// the TPM. Quotes still report the true registers.
    pub fn tamper_log(&mut self, f: impl FnOnce(&mut BootLog)) {
        f(&mut self.boot_log);
    }

    /// Ask one CAS instance for a control word and discard it.
    pub fn probe_cas(&mut self, cas_id: &str, stream_id: u16, period_index: u32, now: u64) -> Result<(), BoxError> {
        let cas = self.cas.get_mut(cas_id).ok_or_else(|| BoxError::UnknownCas(cas_id.to_string()))?;
        let permit = self.permits.get(&(cas_id.to_string(), stream_id));
        cas.request_cw(&self.tpm, stream_id, period_index, now, permit)?;
        Ok(())
    }

    // ---- take ownership and enrollment ----

    pub fn begin_enrollment(&mut self) -> Result<EnrollEnvelope, BoxError> {
        if self.tpm.is_owned() {
            return Err(BoxError::AlreadyOwned);
        }
        self.tpm.take_ownership(self.owner_auth.as_ref())?;
        let (aik_pub, binding) = self.tpm.make_identity(self.owner_auth.as_ref(), AIK_LABEL)?;
        let request = EnrollRequest {
            ek_credential: self.tpm.ek_credential().clone(),
            platform_credential: self.tpm.platform_credential().clone(),
            aik_pub,
            binding,
            customer_id: self.config.customer_id.clone(),
        };
        let pca_id = self.trust.pca_id.clone();
        let to = self.trust.pca_encryption;
        EnrollEnvelope::seal(&pca_id, &to, &request, self.tpm.rng())
            .map_err(|e| BoxError::EnrollmentFailed(e.to_string()))
    }

    pub fn answer_enrollment_challenge(&mut self, ch: &EnrollChallenge) -> Result<ChallengeResponse, BoxError> {
        let signature = self
            .tpm
            .respond_challenge(self.owner_auth.as_ref(), AIK_LABEL, &ch.session, &ch.challenge)
            .map_err(|e| BoxError::EnrollmentFailed(e.code().to_string()))?;
        Ok(ChallengeResponse {
            session: ch.session,
            signature,
        })
    }

    pub fn finish_enrollment(&mut self, blob: &ActivationBlob) -> Result<AikCredential, BoxError> {
        let cred = self
            .tpm
            .activate_identity(self.owner_auth.as_ref(), AIK_LABEL, &blob.blob)
            .map_err(|e| BoxError::EnrollmentFailed(e.code().to_string()))?;
        if !cred.verify_with(&self.trust.pca_pub) {
            return Err(BoxError::EnrollmentFailed("BadPcaSignature".into()));
        }
        self.credential = Some(cred.clone());
        Ok(cred)
    }

    /// Whole enrollment against a local PCA. Every message crosses `relay`
    /// in encoded form; a secondary device forwards them, a direct link
    /// passes them unchanged.
    pub fn take_ownership_online(
        &mut self,
        pca: &mut PrivacyCa,
        now: u64,
        mut relay: impl FnMut(Vec<u8>) -> Vec<u8>,
    ) -> Result<AikCredential, BoxError> {
        let fail = |e: PcaError| BoxError::EnrollmentFailed(e.code().to_string());
        let wire = |e: WireError| BoxError::EnrollmentFailed(e.code().to_string());
        let env = self.begin_enrollment()?;
        let env = EnrollEnvelope::decode(&relay(env.encode())).map_err(wire)?;
        let ch = pca.begin_enrollment(&env).map_err(fail)?;
        let ch = EnrollChallenge::decode(&relay(ch.encode())).map_err(wire)?;
        let resp = self.answer_enrollment_challenge(&ch)?;
        let resp = ChallengeResponse::decode(&relay(resp.encode())).map_err(wire)?;
        let blob = pca.complete_enrollment(&resp, now).map_err(fail)?;
        let blob = ActivationBlob::decode(&relay(blob.encode())).map_err(wire)?;
        self.finish_enrollment(&blob)
    }

    pub fn certify_bind_key(&mut self) -> Result<BindKeyCertificate, BoxError> {
        if self.credential.is_none() {
            return Err(BoxError::InactiveAik);
        }
        if self.tpm.bind_key_public(BIND_LABEL).is_none() {
            self.tpm.bind_key_create(self.owner_auth.as_ref(), BIND_LABEL)?;
        }
        let cert = self.tpm.certify_key(AIK_LABEL, BIND_LABEL)?;
        self.bind_certificate = Some(cert.clone());
        Ok(cert)
    }

    fn bind_cert(&self) -> Result<BindKeyCertificate, BoxError> {
        self.bind_certificate.clone().ok_or(BoxError::NoBindKey)
    }

    pub fn quote(&self, nonce: &Nonce) -> Result<Quote, BoxError> {
        self.tpm.quote(AIK_LABEL, &self.selection(), nonce).map_err(|e| match e {
            TpmError::InactiveAik(_) => BoxError::InactiveAik,
            e => e.into(),
        })
    }

    // ---- registration and entitlements ----

    pub fn registration_request(
        &mut self,
        offer: &ServiceOffer,
        stream_id: u16,
        model: ChargingModel,
    ) -> Result<RegistrationRequest, BoxError> {
        let root = self.trust.providers.get(&offer.provider_id);
        if !offer.authenticate(root, &self.trust.pca_pub) {
            return Err(BoxError::BadOfferSignature);
        }
        if root.is_none() {
            let vouched = offer.vouch.as_ref().map(|v| v.provider_pub).expect("authenticated by vouch");
            self.trust.providers.insert(offer.provider_id.clone(), vouched);
        }
        if !offer.services.iter().any(|s| s.stream_id == stream_id) || !offer.charging_models.contains(&model) {
            return Err(BoxError::NotOffered(stream_id));
        }
        let credential = self.credential.clone().ok_or(BoxError::InactiveAik)?;
        let bind_certificate = self.bind_cert()?;
        let mut selection = SubscriptionSelection {
            offer_id: offer.offer_id.clone(),
            identity_label: credential.identity_label.clone(),
            stream_id,
            charging_model: model.code(),
            signature: Signature::EMPTY,
        };
        self.tpm.aik_sign(AIK_LABEL, &mut selection)?;
        Ok(RegistrationRequest {
            quote: self.quote(&offer.attestation_nonce)?,
            credential,
            boot_log: self.boot_log.clone(),
            selection,
            bind_certificate,
        })
    }

    fn provider_key(&self, id: &str) -> Result<PublicKey, BoxError> {
        self.trust
            .providers
            .get(id)
            .copied()
            .ok_or_else(|| BoxError::UnknownProvider(id.to_string()))
    }

    pub fn handle_receipt(&mut self, receipt: &RegistrationReceipt) -> Result<(), BoxError> {
        let key = self.provider_key(&receipt.provider_id)?;
        let model = ChargingModel::from_code(receipt.charging_model);
        match model {
            Some(model) if receipt.verify_with(&key) && Some(receipt.identity_label.as_str()) == self.identity_label() => {
                self.registrations.insert(
                    receipt.stream_id,
                    Registration {
                        stream_id: receipt.stream_id,
                        tariff: receipt.tariff,
                        charging_model: model,
                    },
                );
            }
            _ => return Err(BoxError::BadReceiptSignature),
        }
        if let Some(grant) = &receipt.grant {
            self.install_grant(grant)?;
        }
        Ok(())
    }

    /// Install an entitlement, sealing its secret to the current state.
    pub fn install_grant(&mut self, grant: &EntitlementGrant) -> Result<(), BoxError> {
        let issuer = self.provider_key(&grant.issuer_id)?;
        let selection = self.selection();
        let cas = self
            .cas
            .entry(grant.cas_id.clone())
            .or_insert_with(|| CasInstance::new(grant.cas_id.clone(), issuer));
        cas.install_entitlement(&mut self.tpm, self.owner_auth.as_ref(), BIND_LABEL, grant, &selection)?;
        Ok(())
    }

    pub fn key_request(
        &mut self,
        challenge: &AttestationChallenge,
        stream_id: u16,
        constraints: UsageConstraints,
    ) -> Result<KeyRequest, BoxError> {
        let mut req = KeyRequest {
            identity_label: self.label()?,
            stream_id,
            constraints,
            quote: self.quote(&challenge.nonce)?,
            boot_log: self.boot_log.clone(),
            signature: Signature::EMPTY,
        };
        self.tpm.aik_sign(AIK_LABEL, &mut req)?;
        Ok(req)
    }

    pub fn permit_request(&mut self, cas_id: &str, stream_id: u16, period_from: u32, period_until: u32) -> Result<PermitRequest, BoxError> {
        let nonce = self.tpm.random_bytes::<32>();
        let mut req = PermitRequest {
            identity_label: self.label()?,
            cas_id: cas_id.to_string(),
            stream_id,
            period_from,
            period_until,
            nonce,
            signature: Signature::EMPTY,
        };
        self.tpm.aik_sign(AIK_LABEL, &mut req)?;
        self.permit_nonces.insert(nonce, (cas_id.to_string(), stream_id));
        Ok(req)
    }

    pub fn handle_permit(&mut self, permit: &OnlinePermit) -> Result<(), BoxError> {
        let key = (permit.cas_id.clone(), permit.stream_id);
        if self.permit_nonces.get(&permit.nonce) != Some(&key) {
            return Err(BoxError::NonceMismatch);
        }
        let cas = self.cas.get(&permit.cas_id).ok_or_else(|| BoxError::UnknownCas(permit.cas_id.clone()))?;
        if !permit.verify_with(cas.issuer()) {
            return Err(BoxError::BadPermit);
        }
        self.permit_nonces.remove(&permit.nonce);
        self.permits.insert(key, permit.clone());
        Ok(())
    }

    // ---- deposit ----

    pub fn top_up_request(&mut self, challenge: &AttestationChallenge, amount: u64) -> Result<TopUpRequest, BoxError> {
        let mut req = TopUpRequest {
            credential: self.credential.clone().ok_or(BoxError::InactiveAik)?,
            quote: self.quote(&challenge.nonce)?,
            boot_log: self.boot_log.clone(),
            bind_certificate: self.bind_cert()?,
            amount,
            signature: Signature::EMPTY,
        };
        self.tpm.aik_sign(AIK_LABEL, &mut req)?;
        Ok(req)
    }

    pub fn apply_top_up(&mut self, sealed: &SealedVoucher) -> Result<u64, BoxError> {
        let plain = self
            .tpm
            .unbind(self.owner_auth.as_ref(), BIND_LABEL, &sealed.ciphertext)
            .map_err(|_| BoxError::NotForThisDevice)?;
        let voucher = DepositVoucher::decode(&plain).map_err(|_| BoxError::NotForThisDevice)?;
        let charging_key = match &self.trust.charging {
            Some((id, key, _)) if *id == voucher.charging_id => *key,
            _ => return Err(BoxError::BadChargingSignature),
        };
        if !voucher.verify_with(&charging_key) {
            return Err(BoxError::BadChargingSignature);
        }
        if Some(voucher.beneficiary.as_str()) != self.identity_label() {
            return Err(BoxError::NotForThisDevice);
        }
        if !self.tpm.consume_nonce(&voucher.nonce) {
            return Err(BoxError::ReplayDetected);
        }
        self.deposit += voucher.amount;
        self.ledger.applied += voucher.amount;
        Ok(self.deposit)
    }

    // ---- playback ----

    /// Obtain the control word for one crypto period, charge or meter it,
    /// then descramble and watermark its packets.
    pub fn play_period(&mut self, packets: &[TransportPacket], now: u64) -> Result<PeriodOutput, BoxError> {
        let Some(first) = packets.first() else {
            return Ok(PeriodOutput {
                packets: Vec::new(),
                timestamp_request: None,
            });
        };
        let (stream_id, period) = (first.stream_id, first.period_index);
        let reg = *self.registrations.get(&stream_id).ok_or(BoxError::NotRegistered(stream_id))?;
        let mode = WatchMode::from(reg.charging_model);
        if mode == WatchMode::Prepaid && self.deposit < reg.tariff as u64 {
            return Err(BoxError::DepositExhausted);
        }
        let (cas_id, cas) = self
            .cas
            .iter_mut()
            .find(|(_, c)| c.entitlement(stream_id).is_some())
            .ok_or(BoxError::Cas(CasError::NoEntitlement(stream_id)))?;
        let permit = self.permits.get(&(cas_id.clone(), stream_id));
        let cw = cas.request_cw(&self.tpm, stream_id, period, now, permit)?;

        let mut out = Vec::with_capacity(packets.len());
        for p in packets {
            out.push(descramble(&cw, p).map_err(|_| BoxError::Cas(CasError::NoEntitlement(stream_id)))?);
        }
        drop(cw);
        self.watermark(&mut out)?;

        let timestamp_request = match mode {
            WatchMode::Prepaid => {
                self.deposit -= reg.tariff as u64;
                self.ledger.charged += reg.tariff as u64;
                None
            }
            WatchMode::Postpaid => Some(self.begin_record(stream_id, period, reg.tariff)?),
            WatchMode::Unmetered => None,
        };
        Ok(PeriodOutput {
            packets: out,
            timestamp_request,
        })
    }

    /// Play a whole stream with the local time authority; stops at the
    /// first failing period and returns what was produced so far.
    pub fn watch(
        &mut self,
        packets: &[TransportPacket],
        now: u64,
        mut tsa: Option<&mut TimeAuthority>,
    ) -> (Vec<TransportPacket>, Result<(), BoxError>) {
        let mut out = Vec::with_capacity(packets.len());
        for chunk in packets.chunk_by(|a, b| a.period_index == b.period_index) {
            match self.play_period(chunk, now) {
                Ok(p) => {
                    out.extend(p.packets);
                    if let Some(req) = p.timestamp_request {
                        let Some(tsa) = tsa.as_deref_mut() else {
                            return (out, Err(BoxError::BadTimestamp));
                        };
                        let token = tsa.timestamp(req.subject_digest, now);
                        if let Err(e) = self.complete_record(&token).map(drop) {
                            return (out, Err(e));
                        }
                    }
                }
                Err(e) => return (out, Err(e)),
            }
        }
        (out, Ok(()))
    }

    /// Pseudonymous per-stream tag.
    pub fn watermark_tag(&self, stream_id: u16) -> Result<[u8; WATERMARK_LEN], BoxError> {
        let label = self.label()?;
        let d = hash_parts(&[label.as_bytes(), &stream_id.to_be_bytes()]);
        let mut tag = [0u8; WATERMARK_LEN];
        tag.copy_from_slice(&d.as_bytes()[..WATERMARK_LEN]);
        Ok(tag)
    }

    pub fn watermark(&self, packets: &mut [TransportPacket]) -> Result<(), BoxError> {
        let mut tags: BTreeMap<u16, [u8; WATERMARK_LEN]> = BTreeMap::new();
        for p in packets.iter_mut() {
            let tag = match tags.get(&p.stream_id) {
                Some(t) => *t,
                None => {
                    let t = self.watermark_tag(p.stream_id)?;
                    tags.insert(p.stream_id, t);
                    t
                }
            };
            p.payload[WATERMARK_OFFSET..].copy_from_slice(&tag);
        }
        Ok(())
    }

    // ---- consumption records ----

    fn begin_record(&mut self, stream_id: u16, period_index: u32, units: u32) -> Result<TimestampRequest, BoxError> {
        let rec = ConsumptionRecord {
            record_nonce: self.tpm.random_bytes::<32>(),
            identity_label: self.label()?,
            stream_id,
            period_index,
            units,
            timestamp_token: None,
            signature: Signature::EMPTY,
        };
        let subject_digest = rec.subject_digest();
        self.metered_units += units as u64;
        self.pending_records.insert(subject_digest, rec);
        Ok(TimestampRequest { subject_digest })
    }

    /// Attach the token, sign with the AIK and encrypt to the charging
    /// provider.
    pub fn complete_record(&mut self, token: &TimestampToken) -> Result<ConsumptionRecord, BoxError> {
        let tsa = self.trust.tsa.ok_or(BoxError::BadTimestamp)?;
        if !token.verify_for(&tsa, &token.subject_digest) || !self.pending_records.contains_key(&token.subject_digest) {
            return Err(BoxError::BadTimestamp);
        }
        let mut rec = self.pending_records.remove(&token.subject_digest).expect("checked above");
        rec.timestamp_token = Some(token.clone());
        self.tpm.aik_sign(AIK_LABEL, &mut rec)?;
        let to = self.trust.charging.as_ref().map(|(_, _, enc)| *enc).ok_or(BoxError::NoBindKey)?;
        let ciphertext = crypto::encrypt_to(&to, &rec.encode(), self.tpm.rng()).expect("charging encryption key");
        self.consumption_log.push(StoredRecord {
            ciphertext: ciphertext.0,
            units: rec.units,
            settled: false,
        });
        Ok(rec)
    }

    pub fn pending_record_count(&self) -> usize {
        self.pending_records.len()
    }

    fn unsettled(&self) -> Vec<Vec<u8>> {
        self.consumption_log
            .iter()
            .filter(|r| !r.settled)
            .map(|r| r.ciphertext.clone())
            .collect()
    }

    pub fn push_batch(&self) -> ConsumptionBatch {
        ConsumptionBatch {
            request_nonce: [0u8; 32],
            records: self.unsettled(),
        }
    }

    pub fn answer_pull(&mut self, req: &PullRequest) -> Result<ConsumptionBatch, BoxError> {
        match &self.trust.charging {
            Some((id, key, _)) if *id == req.charging_id && req.verify_with(key) => {}
            _ => return Err(BoxError::BadPullRequestSignature),
        }
        self.pull_seen.push(req.nonce);
        Ok(ConsumptionBatch {
            request_nonce: req.nonce,
            records: self.unsettled(),
        })
    }

    /// Mark acknowledged records as settled; they are not sent again.
    pub fn handle_ack(&mut self, ack: &SettlementAck) -> Result<usize, BoxError> {
        match &self.trust.charging {
            Some((id, key, _)) if *id == ack.charging_id && ack.verify_with(key) => {}
            _ => return Err(BoxError::BadAckSignature),
        }
        let mut marked = 0;
        for rec in self.consumption_log.iter_mut().filter(|r| !r.settled) {
            let d = hash(&rec.ciphertext);
            if ack.settled.iter().any(|s| s.as_slice() == d.as_bytes()) {
                rec.settled = true;
                marked += 1;
            }
        }
        Ok(marked)
    }

    // ---- firmware update ----

    pub fn device_description(&mut self) -> Result<DeviceDescription, BoxError> {
        let nonce = self.tpm.random_bytes::<32>();
        let mut dddb = DeviceDescription {
            model: self.config.model.clone(),
            hw_revision: self.config.hw_revision.clone(),
            fw_version: self.config.firmware_version.clone(),
            nonce,
            credential: self.credential.clone().ok_or(BoxError::InactiveAik)?,
            bind_certificate: self.bind_cert()?,
            signature: Signature::EMPTY,
        };
        self.tpm.aik_sign(AIK_LABEL, &mut dddb)?;
        self.update_nonce = Some(nonce);
        Ok(dddb)
    }

    pub fn apply_update(&mut self, sealed: &SealedUpdate) -> Result<String, BoxError> {
        let plain = self
            .tpm
            .unbind(self.owner_auth.as_ref(), BIND_LABEL, &sealed.ciphertext)
            .map_err(|_| BoxError::NotForThisDevice)?;
        let pkg = UpdatePackage::decode(&plain).map_err(|_| BoxError::NotForThisDevice)?;
        let key = self
            .trust
            .update_service
            .get(&pkg.issuer_id)
            .ok_or(BoxError::BadUpdateSignature)?;
        if !pkg.verify_with(key) {
            return Err(BoxError::BadUpdateSignature);
        }
        if self.update_nonce != Some(pkg.device_nonce) {
            return Err(BoxError::NonceMismatch);
        }
        if pkg.model != self.config.model {
            return Err(BoxError::NotForThisDevice);
        }
        self.update_nonce = None;
        install_firmware(&mut self.config.boot_images, &pkg.firmware);
        self.config.firmware_version = pkg.version.clone();
        self.reboot()?;
        Ok(pkg.version)
    }

    pub fn export_record_ciphertexts(&self) -> Vec<Ciphertext> {
        self.consumption_log.iter().map(|r| Ciphertext(r.ciphertext.clone())).collect()
    }
}
