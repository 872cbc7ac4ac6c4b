// Licensed under the Apache-2.0 license

//! Network parties. Each handles one delivered message at a time and
//! answers through a [`Ctx`].

use std::collections::BTreeMap;

use stb_core::cas::UsageConstraints;
use stb_core::crypto::Signature;
use stb_core::pca::{
    ActivationBlob, AikCredential, Auditor, ChallengeResponse, EnrollChallenge, EnrollEnvelope, EnrollRequest,
    PrivacyCa, RevealRequest, RevealResponse, ValidityQuery, ValidityResponse,
};
use stb_core::cas::{EntitlementGrant, OnlinePermit, PermitRequest};
use stb_core::scrambler::TransportPacket;
use stb_core::services::charging::{ChargingProvider, ConsumptionBatch, ConsumptionRecord, PullRequest, SealedVoucher, SettlementAck, TopUpRequest};
use stb_core::services::timestamp::{TimeAuthority, TimestampRequest, TimestampToken};
use stb_core::services::update::{DeviceDescription, SealedUpdate, UpdateService};
use stb_core::services::vendor::{
    ChargingModel, KeyRequest, OfferRequest, RegistrationReceipt, RegistrationRequest, ServiceOffer, ServiceProvider,
};
use stb_core::services::{AttestationChallenge, AttestationHello, ProtocolError};
use stb_core::stb::{BoxError, SetTopBox};
use stb_core::tpm::{EkCredential, Nonce, PlatformCredential, TpmState};
use stb_core::wire::{MsgType, WireCodec, WireError, WireMessage};

use crate::network::Envelope;

/// An error observed by a party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorEvent {
    pub time: u64,
    pub endpoint: String,
    pub code: String,
    pub detail: String,
}

/// What a handler may touch: the clock, its outbox, and the error journal.
pub struct Ctx<'a> {
    pub now: u64,
    pub me: &'a str,
    pub out: Vec<Envelope>,
    pub errors: &'a mut Vec<ErrorEvent>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: u64, me: &'a str, errors: &'a mut Vec<ErrorEvent>) -> Self {
        Self {
            now,
            me,
            out: Vec::new(),
            errors,
        }
    }

    pub fn send<T: WireCodec>(&mut self, to: &str, msg: &T) {
        self.out.push(Envelope::new(self.me, to, msg.encode()));
    }

    pub fn error(&mut self, code: &str, detail: &str) {
        self.errors.push(ErrorEvent {
            time: self.now,
            endpoint: self.me.to_string(),
            code: code.to_string(),
            detail: detail.to_string(),
        });
    }

    /// Journal the error and tell the peer.
    pub fn fail(&mut self, to: &str, in_reply_to: MsgType, code: &str, detail: &str) {
        self.error(code, detail);
        self.send(
            to,
            &ProtocolError {
                code: code.to_string(),
                in_reply_to: in_reply_to as u8,
                detail: detail.to_string(),
            },
        );
    }

    fn malformed(&mut self, to: &str, t: MsgType, e: &WireError) {
        self.fail(to, t, e.code(), &e.to_string());
    }
}

fn box_detail(e: &BoxError) -> String {
    match e {
        BoxError::EnrollmentFailed(d) => d.clone(),
        e => e.to_string(),
    }
}

/// Decode `$msg` as `$ty` or report it malformed to the sender.
macro_rules! decode_or_fail {
    ($ctx:expr, $from:expr, $msg:expr, $ty:ty) => {
        match <$ty>::from_wire($msg) {
            Ok(v) => v,
            Err(e) => {
                $ctx.malformed($from, $msg.msg_type, &e);
                return;
            }
        }
    };
}

#[derive(Debug, Clone)]
pub struct PcaActor {
    pub pca: PrivacyCa,
}

impl PcaActor {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::EnrollEnvelope => {
                let env = decode_or_fail!(ctx, from, msg, EnrollEnvelope);
                match self.pca.begin_enrollment(&env) {
                    Ok(ch) => ctx.send(from, &ch),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &e.to_string()),
                }
            }
            MsgType::ChallengeResponse => {
                let resp = decode_or_fail!(ctx, from, msg, ChallengeResponse);
                match self.pca.complete_enrollment(&resp, ctx.now) {
                    Ok(blob) => ctx.send(from, &blob),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &e.to_string()),
                }
            }
            MsgType::ValidityQuery => {
                let q = decode_or_fail!(ctx, from, msg, ValidityQuery);
                let resp = self.pca.check_validity(&q);
                ctx.send(from, &resp);
            }
            MsgType::RevealRequest => {
                let req = decode_or_fail!(ctx, from, msg, RevealRequest);
                match self.pca.handle_reveal(&req, ctx.now) {
                    Ok(resp) => ctx.send(from, &resp),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &e.to_string()),
                }
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

#[derive(Debug, Clone)]
enum AwaitingValidity {
    Register(Box<RegistrationRequest>),
    Permit(Box<PermitRequest>),
}

#[derive(Debug, Clone)]
pub struct ProviderActor {
    pub sp: ServiceProvider,
    pub pca: String,
    pending: BTreeMap<Nonce, (String, AwaitingValidity)>,
}

impl ProviderActor {
    pub fn new(sp: ServiceProvider, pca: String) -> Self {
        Self {
            sp,
            pca,
            pending: BTreeMap::new(),
        }
    }

    fn ask_pca(&mut self, ctx: &mut Ctx, from: &str, label: &str, op: AwaitingValidity) {
        let q = self.sp.validity_query(label);
        self.pending.insert(q.nonce, (from.to_string(), op));
        let pca = self.pca.clone();
        ctx.send(&pca, &q);
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::OfferRequest => {
                decode_or_fail!(ctx, from, msg, OfferRequest);
                let offer = self.sp.make_offer();
                ctx.send(from, &offer);
            }
            MsgType::RegistrationRequest => {
                let req = decode_or_fail!(ctx, from, msg, RegistrationRequest);
                let label = req.credential.identity_label.clone();
                self.ask_pca(ctx, from, &label, AwaitingValidity::Register(Box::new(req)));
            }
            MsgType::PermitRequest => {
                let req = decode_or_fail!(ctx, from, msg, PermitRequest);
                let label = req.identity_label.clone();
                self.ask_pca(ctx, from, &label, AwaitingValidity::Permit(Box::new(req)));
            }
            MsgType::ValidityResponse => {
                let resp = decode_or_fail!(ctx, from, msg, ValidityResponse);
                let Some((client, op)) = self.pending.remove(&resp.nonce) else {
                    ctx.error("UnknownValidityNonce", "");
                    return;
                };
                match op {
                    AwaitingValidity::Register(req) => match self.sp.register(&req, &resp, ctx.now) {
                        Ok(receipt) => ctx.send(&client, &receipt),
                        Err(e) => ctx.fail(&client, MsgType::RegistrationRequest, e.code(), &provider_detail(&e)),
                    },
                    AwaitingValidity::Permit(req) => match self.sp.grant_online_permit(&req, &resp, ctx.now) {
                        Ok(permit) => ctx.send(&client, &permit),
                        Err(e) => ctx.fail(&client, MsgType::PermitRequest, e.code(), &provider_detail(&e)),
                    },
                }
            }
            MsgType::AttestationHello => {
                let hello = decode_or_fail!(ctx, from, msg, AttestationHello);
                let ch = self.sp.challenge(&hello.purpose);
                ctx.send(from, &ch);
            }
            MsgType::KeyRequest => {
                let req = decode_or_fail!(ctx, from, msg, KeyRequest);
                match self.sp.issue_constrained_key(&req, ctx.now) {
                    Ok(grant) => ctx.send(from, &grant),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &provider_detail(&e)),
                }
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

fn provider_detail(e: &stb_core::services::ProviderError) -> String {
    match e {
        stb_core::services::ProviderError::Untrusted(r) => r.code().to_string(),
        e => e.to_string(),
    }
}

fn charging_detail(e: &stb_core::services::ChargingError) -> String {
    match e {
        stb_core::services::ChargingError::Untrusted(r) => r.code().to_string(),
        e => e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct ChargingActor {
    pub cp: ChargingProvider,
}

impl ChargingActor {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::AikCredential => {
                let cred = decode_or_fail!(ctx, from, msg, AikCredential);
                if let Err(e) = self.cp.add_contract(&cred) {
                    ctx.fail(from, msg.msg_type, e.code(), &charging_detail(&e));
                }
            }
            MsgType::AttestationHello => {
                let hello = decode_or_fail!(ctx, from, msg, AttestationHello);
                let ch = self.cp.challenge(&hello.purpose);
                ctx.send(from, &ch);
            }
            MsgType::TopUpRequest => {
                let req = decode_or_fail!(ctx, from, msg, TopUpRequest);
                match self.cp.top_up(&req, ctx.now) {
                    Ok(v) => ctx.send(from, &v),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &charging_detail(&e)),
                }
            }
            MsgType::ConsumptionBatch => {
                let batch = decode_or_fail!(ctx, from, msg, ConsumptionBatch);
                let ack = self.cp.settle(&batch);
                ctx.send(from, &ack);
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsaActor {
    pub tsa: TimeAuthority,
}

impl TsaActor {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::TimestampRequest => {
                let req = decode_or_fail!(ctx, from, msg, TimestampRequest);
                let token = self.tsa.timestamp(req.subject_digest, ctx.now);
                ctx.send(from, &token);
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateActor {
    pub us: UpdateService,
}

impl UpdateActor {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::DeviceDescription => {
                let dddb = decode_or_fail!(ctx, from, msg, DeviceDescription);
                match self.us.build_update(&dddb) {
                    Ok(u) => ctx.send(from, &u),
                    Err(e) => ctx.fail(from, msg.msg_type, e.code(), &e.to_string()),
                }
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditorActor {
    pub auditor: Auditor,
    pub revealed: BTreeMap<String, String>,
}

impl AuditorActor {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::RevealResponse => {
                let resp = decode_or_fail!(ctx, from, msg, RevealResponse);
                match self.auditor.open(&resp) {
                    Some(customer) => {
                        self.revealed.insert(resp.identity_label.clone(), customer);
                    }
                    None => ctx.error("Undecryptable", "reveal response"),
                }
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

/// Secondary device forwarding enrollment traffic for a box without its
/// own uplink.
#[derive(Debug, Clone)]
pub struct RelayActor {
    pub upstream: String,
    downstream: Option<String>,
}

impl RelayActor {
    pub fn new(upstream: String) -> Self {
        Self {
            upstream,
            downstream: None,
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        let to = if from == self.upstream {
            match &self.downstream {
                Some(d) => d.clone(),
                None => return ctx.error("NoDownstream", msg.msg_type.name()),
            }
        } else {
            self.downstream = Some(from.to_string());
            self.upstream.clone()
        };
        ctx.out.push(Envelope::new(ctx.me, to, msg.encode()));
    }
}

/// Playback output and requests waiting on a reply.
#[derive(Debug, Clone)]
pub struct BoxActor {
    pub stb: SetTopBox,
    pub charging: Option<String>,
    pending_register: BTreeMap<String, (u16, ChargingModel)>,
    pending_key: BTreeMap<String, (u16, UsageConstraints)>,
    pending_topup: BTreeMap<String, u64>,
    /// Descrambled packets per stream, in playback order.
    pub outputs: BTreeMap<u16, Vec<TransportPacket>>,
    pub played: BTreeMap<u16, u64>,
    /// Plaintext of every record this box produced; kept only so the
    /// harness can scan transcripts for leaks.
    pub plain_records: Vec<ConsumptionRecord>,
}

impl BoxActor {
    pub fn new(stb: SetTopBox, charging: Option<String>) -> Self {
        Self {
            stb,
            charging,
            pending_register: BTreeMap::new(),
            pending_key: BTreeMap::new(),
            pending_topup: BTreeMap::new(),
            outputs: BTreeMap::new(),
            played: BTreeMap::new(),
            plain_records: Vec::new(),
        }
    }

    fn local<T>(ctx: &mut Ctx, r: Result<T, BoxError>) -> Option<T> {
        r.map_err(|e| ctx.error(e.code(), &box_detail(&e))).ok()
    }

    pub fn take_ownership(&mut self, ctx: &mut Ctx, to: &str) {
        if let Some(env) = Self::local(ctx, self.stb.begin_enrollment()) {
            ctx.send(to, &env);
        }
    }

    pub fn contract(&mut self, ctx: &mut Ctx, charging: &str) {
        match self.stb.credential().cloned() {
            Some(cred) => ctx.send(charging, &cred),
            None => ctx.error("InactiveAik", "contract"),
        }
    }

    pub fn register(&mut self, ctx: &mut Ctx, provider: &str, stream: u16, model: ChargingModel) {
        self.pending_register.insert(provider.to_string(), (stream, model));
        ctx.send(
            provider,
            &OfferRequest {
                provider_id: provider.to_string(),
            },
        );
    }

    fn hello(&self, ctx: &mut Ctx, to: &str, purpose: &str) {
        let hello = AttestationHello {
            identity_label: self.stb.identity_label().unwrap_or_default().to_string(),
            purpose: purpose.to_string(),
        };
        ctx.send(to, &hello);
    }

    pub fn request_key(&mut self, ctx: &mut Ctx, provider: &str, stream: u16, c: UsageConstraints) {
        self.pending_key.insert(provider.to_string(), (stream, c));
        self.hello(ctx, provider, "key");
    }

    pub fn top_up(&mut self, ctx: &mut Ctx, charging: &str, amount: u64) {
        self.pending_topup.insert(charging.to_string(), amount);
        self.hello(ctx, charging, "top-up");
    }

    pub fn permit(&mut self, ctx: &mut Ctx, provider: &str, cas: &str, stream: u16, from: u32, until: u32) {
        if let Some(req) = Self::local(ctx, self.stb.permit_request(cas, stream, from, until)) {
            ctx.send(provider, &req);
        }
    }

    /// Play `packets` period by period until the first failure.
    pub fn watch(&mut self, ctx: &mut Ctx, packets: &[TransportPacket], tsa: Option<&str>) {
        for chunk in packets.chunk_by(|a, b| a.period_index == b.period_index) {
            match self.stb.play_period(chunk, ctx.now) {
                Ok(out) => {
                    let stream = chunk[0].stream_id;
                    self.outputs.entry(stream).or_default().extend(out.packets);
                    *self.played.entry(stream).or_default() += 1;
                    if let Some(req) = out.timestamp_request {
                        match tsa {
                            Some(tsa) => ctx.send(tsa, &req),
                            None => ctx.error("BadTimestamp", "no time authority"),
                        }
                    }
                }
                Err(e) => {
                    ctx.error(e.code(), &box_detail(&e));
                    return;
                }
            }
        }
    }

    pub fn push(&mut self, ctx: &mut Ctx, charging: &str) {
        let batch = self.stb.push_batch();
        ctx.send(charging, &batch);
    }

    pub fn update(&mut self, ctx: &mut Ctx, service: &str) {
        if let Some(d) = Self::local(ctx, self.stb.device_description()) {
            ctx.send(service, &d);
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        let t = msg.msg_type;
        match t {
            MsgType::EnrollChallenge => {
                let ch = decode_or_fail!(ctx, from, msg, EnrollChallenge);
                match self.stb.answer_enrollment_challenge(&ch) {
                    Ok(r) => ctx.send(from, &r),
                    Err(e) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                }
            }
            MsgType::ActivationBlob => {
                let blob = decode_or_fail!(ctx, from, msg, ActivationBlob);
                match self.stb.finish_enrollment(&blob) {
                    Ok(_) => {
                        Self::local(ctx, self.stb.certify_bind_key());
                    }
                    Err(e) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                }
            }
            MsgType::ServiceOffer => {
                let offer = decode_or_fail!(ctx, from, msg, ServiceOffer);
                let Some((stream, model)) = self.pending_register.remove(from) else {
                    return ctx.error("UnsolicitedOffer", from);
                };
                match self.stb.registration_request(&offer, stream, model) {
                    Ok(req) => ctx.send(from, &req),
                    Err(e) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                }
            }
            MsgType::RegistrationReceipt => {
                let receipt = decode_or_fail!(ctx, from, msg, RegistrationReceipt);
                if let Err(e) = self.stb.handle_receipt(&receipt) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::AttestationChallenge => {
                let ch = decode_or_fail!(ctx, from, msg, AttestationChallenge);
                let req = match ch.purpose.as_str() {
                    "key" => self
                        .pending_key
                        .remove(from)
                        .map(|(s, c)| self.stb.key_request(&ch, s, c).map(|r| r.encode())),
                    "top-up" => self
                        .pending_topup
                        .remove(from)
                        .map(|a| self.stb.top_up_request(&ch, a).map(|r| r.encode())),
                    _ => None,
                };
                match req {
                    Some(Ok(bytes)) => ctx.out.push(Envelope::new(ctx.me, from, bytes)),
                    Some(Err(e)) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                    None => ctx.error("UnsolicitedChallenge", &ch.purpose),
                }
            }
            MsgType::EntitlementGrant => {
                let grant = decode_or_fail!(ctx, from, msg, EntitlementGrant);
                if let Err(e) = self.stb.install_grant(&grant) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::OnlinePermit => {
                let permit = decode_or_fail!(ctx, from, msg, OnlinePermit);
                if let Err(e) = self.stb.handle_permit(&permit) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::SealedVoucher => {
                let v = decode_or_fail!(ctx, from, msg, SealedVoucher);
                if let Err(e) = self.stb.apply_top_up(&v) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::TimestampToken => {
                let token = decode_or_fail!(ctx, from, msg, TimestampToken);
                match self.stb.complete_record(&token) {
                    Ok(rec) => self.plain_records.push(rec),
                    Err(e) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                }
            }
            MsgType::PullRequest => {
                let req = decode_or_fail!(ctx, from, msg, PullRequest);
                match self.stb.answer_pull(&req) {
                    Ok(batch) => ctx.send(from, &batch),
                    Err(e) => ctx.fail(from, t, e.code(), &box_detail(&e)),
                }
            }
            MsgType::SettlementAck => {
                let ack = decode_or_fail!(ctx, from, msg, SettlementAck);
                if let Err(e) = self.stb.handle_ack(&ack) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::SealedUpdate => {
                let u = decode_or_fail!(ctx, from, msg, SealedUpdate);
                if let Err(e) = self.stb.apply_update(&u) {
                    ctx.fail(from, t, e.code(), &box_detail(&e));
                }
            }
            MsgType::ProtocolError => {}
            t => ctx.fail(from, t, "UnexpectedMessage", t.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FakeVariant {
    /// EK credential signed by a root the PCA does not trust.
    RogueEk,
    /// Genuine EK credential copied from another device, no EK private key.
    StolenEk,
    /// A genuine box's enrollment envelope sent again.
    ReplayedAik,
}

impl FakeVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rogue-ek" => Some(Self::RogueEk),
            "stolen-ek" => Some(Self::StolenEk),
            "replayed-aik" => Some(Self::ReplayedAik),
            _ => None,
        }
    }
}

/// Endpoint posing as a set-top box without a genuine TPM.
#[derive(Debug, Clone)]
pub struct FakeBox {
    pub variant: FakeVariant,
    tpm: TpmState,
    stolen: Option<(EkCredential, PlatformCredential)>,
    customer_id: String,
    pca_id: String,
    pca_encryption: stb_core::crypto::PublicKey,
    pub credentials_obtained: usize,
}

pub const FAKE_AUTH: [u8; 20] = [0x66; 20];

impl FakeBox {
    pub fn new(
        variant: FakeVariant,
        tpm: TpmState,
        stolen: Option<(EkCredential, PlatformCredential)>,
        customer_id: String,
        pca_id: String,
        pca_encryption: stb_core::crypto::PublicKey,
    ) -> Self {
        Self {
            variant,
            tpm,
            stolen,
            customer_id,
            pca_id,
            pca_encryption,
            credentials_obtained: 0,
        }
    }

    /// First enrollment message; `captured` is the replayed envelope.
    pub fn take_ownership(&mut self, ctx: &mut Ctx, to: &str, captured: Option<Vec<u8>>) {
        if self.variant == FakeVariant::ReplayedAik {
            match captured {
                Some(bytes) => ctx.out.push(Envelope::new(ctx.me, to, bytes)),
                None => ctx.error("NothingToReplay", ""),
            }
            return;
        }
        if !self.tpm.is_owned() {
            let _ = self.tpm.take_ownership(&FAKE_AUTH);
        }
        let Ok((aik_pub, binding)) = self.tpm.make_identity(&FAKE_AUTH, "aik-fake") else {
            return ctx.error("DuplicateLabel", "fake identity");
        };
        let (ek_credential, platform_credential) = match &self.stolen {
            Some((ek, pf)) => (ek.clone(), pf.clone()),
            None => (self.tpm.ek_credential().clone(), self.tpm.platform_credential().clone()),
        };
        let req = EnrollRequest {
            ek_credential,
            platform_credential,
            aik_pub,
            binding,
            customer_id: self.customer_id.clone(),
        };
        let env = EnrollEnvelope::seal(&self.pca_id, &self.pca_encryption, &req, self.tpm.rng())
            .expect("PCA encryption key");
        ctx.send(to, &env);
    }

    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match msg.msg_type {
            MsgType::EnrollChallenge => {
                let ch = decode_or_fail!(ctx, from, msg, EnrollChallenge);
                // the challenge is readable only with the genuine EK; guess
                let resp = ChallengeResponse {
                    session: ch.session,
                    signature: Signature(self.tpm.random_bytes::<64>()),
                };
                ctx.send(from, &resp);
            }
            MsgType::ActivationBlob => self.credentials_obtained += 1,
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub enum Party {
    Pca(Box<PcaActor>),
    Provider(Box<ProviderActor>),
    Charging(Box<ChargingActor>),
    Tsa(TsaActor),
    Update(UpdateActor),
    Auditor(AuditorActor),
    Relay(RelayActor),
    Box(Box<BoxActor>),
    Fake(Box<FakeBox>),
}

impl Party {
    pub fn handle(&mut self, ctx: &mut Ctx, from: &str, msg: &WireMessage) {
        match self {
            Party::Pca(a) => a.handle(ctx, from, msg),
            Party::Provider(a) => a.handle(ctx, from, msg),
            Party::Charging(a) => a.handle(ctx, from, msg),
            Party::Tsa(a) => a.handle(ctx, from, msg),
            Party::Update(a) => a.handle(ctx, from, msg),
            Party::Auditor(a) => a.handle(ctx, from, msg),
            Party::Relay(a) => a.handle(ctx, from, msg),
            Party::Box(a) => a.handle(ctx, from, msg),
            Party::Fake(a) => a.handle(ctx, from, msg),
        }
    }
}
