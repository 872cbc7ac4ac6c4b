// Licensed under the Apache-2.0 license

//! Scenario execution and verdicts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use stb_core::cas::{UsageConstraints, SECONDS_PER_DAY};
use stb_core::crypto::{hash, Digest, PublicKey};
use stb_core::pca::{Auditor, PrivacyCa, RevealRequest};
use stb_core::scrambler::{packetize, synthetic_content};
use stb_core::services::charging::ChargingProvider;
use stb_core::services::timestamp::TimeAuthority;
use stb_core::services::update::{FirmwareRelease, UpdateService};
use stb_core::services::vendor::{ChargingModel, ServiceEntry, ServiceProvider};
use stb_core::services::ProtocolError;
use stb_core::stb::{BoxConfig, SetTopBox, WATERMARK_OFFSET};
use stb_core::tpm::{Manufacturer, OWNER_AUTH_LEN};
use stb_core::wire::{MsgType, WireCodec, WireMessage};

use crate::actors::{
    AuditorActor, BoxActor, ChargingActor, Ctx, ErrorEvent, FakeBox, FakeVariant, Party, PcaActor, ProviderActor,
    RelayActor, TsaActor, UpdateActor,
};
use crate::adversary::{flip_image_bit, Adversary};
use crate::network::{Broadcast, SimNetwork};
use crate::scenario::{AclEntry, Check, ConfigError, EndpointKind, Event, Scenario};

pub const MANUFACTURER_ID: &str = "acme-tpm";
const STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub results: Vec<AssertionResult>,
    pub errors: Vec<ErrorEvent>,
    pub deliveries: usize,
    pub transcript_digest: Digest,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} seed {}", self.scenario, self.seed);
        let _ = writeln!(s, "deliveries {} transcript {}", self.deliveries, self.transcript_digest.to_hex());
        for e in &self.errors {
            let _ = writeln!(s, "error t={} {} {} {}", e.time, e.endpoint, e.code, e.detail);
        }
        for r in &self.results {
            let _ = writeln!(s, "{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.check, r.detail);
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let _ = writeln!(s, "{passed}/{} assertions passed", self.results.len());
        s
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub transcript: String,
    pub sidecar: Vec<u8>,
}

pub struct Simulation {
    name: String,
    seed: u64,
    pub net: SimNetwork,
    pub parties: BTreeMap<String, Party>,
    kinds: BTreeMap<String, &'static str>,
    pub errors: Vec<ErrorEvent>,
    adversaries: Vec<Adversary>,
    pub eavesdropped: Vec<Vec<u8>>,
    period_packets: u32,
    start_time: u64,
    acl: Vec<AclEntry>,
    ek_publics: Vec<PublicKey>,
    customer_ids: BTreeMap<String, String>,
}

fn kind_rank(k: &EndpointKind) -> u8 {
    match k {
        EndpointKind::Auditor {} => 0,
        EndpointKind::Pca { .. } => 1,
        EndpointKind::Tsa {} => 2,
        EndpointKind::Provider { .. } => 3,
        EndpointKind::Charging { .. } => 4,
        EndpointKind::UpdateService { .. } => 5,
        EndpointKind::Relay { .. } => 6,
        EndpointKind::Box { .. } => 7,
    }
}

impl Simulation {
    pub fn build(scenario: &Scenario, seed: u64, extra: &[Adversary]) -> Result<Self, ConfigError> {
        let cfg = &scenario.config;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shuffle = cfg
            .scenario
            .shuffle
            .then(|| ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed));
        let mut adversaries = cfg
            .adversaries
            .iter()
            .map(Adversary::from_config)
            .collect::<Result<Vec<_>, _>>()?;
        adversaries.extend(extra.iter().cloned());

        let mut sim = Simulation {
            name: cfg.scenario.name.clone(),
            seed,
            net: SimNetwork::new(cfg.scenario.start_time, shuffle),
            parties: BTreeMap::new(),
            kinds: BTreeMap::new(),
            errors: Vec::new(),
            adversaries,
            eavesdropped: Vec::new(),
            period_packets: cfg.scenario.period_packets.max(1),
            start_time: cfg.scenario.start_time,
            acl: scenario.acl()?,
            ek_publics: Vec::new(),
            customer_ids: BTreeMap::new(),
        };
        for e in &cfg.endpoints {
            if sim.kinds.insert(e.name.clone(), e.kind.name()).is_some() {
                return Err(ConfigError::DuplicateEndpoint(e.name.clone()));
            }
        }

        let manufacturer = Manufacturer::new(MANUFACTURER_ID, &mut rng);
        let rogue = Manufacturer::new(MANUFACTURER_ID, &mut rng);
        let mut order: Vec<_> = cfg.endpoints.iter().collect();
        order.sort_by_key(|e| kind_rank(&e.kind));

        let mut auditors: BTreeMap<String, (PublicKey, PublicKey)> = BTreeMap::new();
        let mut pcas: BTreeMap<String, (PublicKey, PublicKey)> = BTreeMap::new();
        let mut tsas: BTreeMap<String, PublicKey> = BTreeMap::new();
        let mut providers: BTreeMap<String, (PublicKey, bool)> = BTreeMap::new();
        let mut chargings: BTreeMap<String, (PublicKey, PublicKey)> = BTreeMap::new();
        let mut updates: BTreeMap<String, PublicKey> = BTreeMap::new();

        for e in order {
            let name = e.name.clone();
            let party = match &e.kind {
                EndpointKind::Auditor {} => {
                    let a = Auditor::new(&mut rng);
                    auditors.insert(name.clone(), (a.public(), a.encryption_public()));
                    Party::Auditor(AuditorActor {
                        auditor: a,
                        revealed: BTreeMap::new(),
                    })
                }
                EndpointKind::Pca { auditor } => {
                    let mut pca = PrivacyCa::new(name.clone(), &mut rng);
                    pca.trust_manufacturer(MANUFACTURER_ID, manufacturer.root_public());
                    if let Some(a) = auditor {
                        let (s, enc) = auditors.get(a).ok_or_else(|| sim.wrong(a, "auditor"))?;
                        pca.set_auditor(*s, *enc);
                    }
                    pcas.insert(name.clone(), (pca.public(), pca.encryption_public()));
                    Party::Pca(Box::new(PcaActor { pca }))
                }
                EndpointKind::Tsa {} => {
                    let tsa = TimeAuthority::new(name.clone(), &mut rng);
                    tsas.insert(name.clone(), tsa.public());
                    Party::Tsa(TsaActor { tsa })
                }
                EndpointKind::Provider {
                    pca,
                    streams,
                    charging_models,
                    vouched,
                    entitlement_lifetime,
                    permit_span,
                } => {
                    let pca = sim.resolve("pca", pca.as_deref())?;
                    let pca_pub = pcas[&pca].0;
                    let mut sp = ServiceProvider::new(name.clone(), pca_pub, scenario.reference()?, &mut rng);
                    for s in streams {
                        sp.add_service(ServiceEntry {
                            stream_id: s.stream,
                            cas_id: s.cas.clone(),
                            description: s.description.clone(),
                            tariff: s.tariff,
                            online_gated: s.online_gated,
                        });
                    }
                    if let Some(models) = charging_models {
                        let models = models
                            .iter()
                            .map(|m| ChargingModel::from_name(m).ok_or_else(|| ConfigError::Invalid(format!("charging model {m}"))))
                            .collect::<Result<Vec<_>, _>>()?;
                        sp.set_charging_models(models);
                    }
                    if let Some(l) = entitlement_lifetime {
                        sp.set_entitlement_lifetime(*l);
                    }
                    if let Some(p) = permit_span {
                        sp.set_permit_span((*p).max(1));
                    }
                    if *vouched {
                        let Some(Party::Pca(p)) = sim.parties.get(&pca) else {
                            return Err(sim.wrong(&pca, "pca"));
                        };
                        sp.set_vouch(p.pca.vouch_for_provider(&name, sp.public()));
                    }
                    providers.insert(name.clone(), (sp.public(), *vouched));
                    Party::Provider(Box::new(ProviderActor::new(sp, pca)))
                }
                EndpointKind::Charging { pca, tsa } => {
                    let pca = sim.resolve("pca", pca.as_deref())?;
                    let tsa = sim.resolve("tsa", tsa.as_deref())?;
                    let cp = ChargingProvider::new(name.clone(), pcas[&pca].0, tsas[&tsa], scenario.reference()?, &mut rng);
                    chargings.insert(name.clone(), (cp.public(), cp.encryption_public()));
                    Party::Charging(Box::new(ChargingActor { cp }))
                }
                EndpointKind::UpdateService { pca } => {
                    let pca = sim.resolve("pca", pca.as_deref())?;
                    let mut us = UpdateService::new(name.clone(), pcas[&pca].0, &mut rng);
                    if scenario.config.fixtures.firmware.is_some() {
                        let fw = scenario.firmware()?;
                        us.publish(
                            fw.model,
                            FirmwareRelease {
                                version: fw.version,
                                image: fw.image.into_bytes(),
                            },
                        );
                    }
                    updates.insert(name.clone(), us.public());
                    Party::Update(UpdateActor { us })
                }
                EndpointKind::Relay { upstream } => {
                    let up = sim.resolve("pca", upstream.as_deref())?;
                    Party::Relay(RelayActor::new(up))
                }
                EndpointKind::Box {
                    profile,
                    customer_id,
                    deposit,
                    pca,
                    charging,
                } => {
                    let profiles = scenario.boxes()?;
                    let p = profiles
                        .get(profile)
                        .ok_or_else(|| ConfigError::FixtureMissing(format!("box profile {profile}")))?;
                    let pca = sim.resolve("pca", pca.as_deref())?;
                    let (pca_pub, pca_enc) = pcas[&pca];
                    sim.customer_ids.insert(name.clone(), customer_id.clone());
                    let fake = sim.adversaries.iter().find_map(|a| match a {
                        Adversary::FakeTpm { target, variant, .. } if *target == name => Some(*variant),
                        _ => None,
                    });
                    if let Some(variant) = fake {
                        let tpm = rogue.manufacture(&p.model, &mut rng);
                        let stolen = (variant == FakeVariant::StolenEk).then(|| {
                            let genuine = manufacturer.manufacture(&p.model, &mut rng);
                            (genuine.ek_credential().clone(), genuine.platform_credential().clone())
                        });
                        Party::Fake(Box::new(FakeBox::new(variant, tpm, stolen, customer_id.clone(), pca.clone(), pca_enc)))
                    } else {
                        let tpm = manufacturer.manufacture(&p.model, &mut rng);
                        sim.ek_publics.push(tpm.ek_credential().ek_pub);
                        sim.ek_publics.push(tpm.ek_credential().ek_encryption_pub);
                        let auth = hex::decode(&p.owner_auth)
                            .ok()
                            .and_then(|b| <[u8; OWNER_AUTH_LEN]>::try_from(b).ok())
                            .ok_or_else(|| ConfigError::Invalid(format!("owner_auth of profile {}", p.name)))?;
                        let config = BoxConfig {
                            model: p.model.clone(),
                            hw_revision: p.hw_revision.clone(),
                            firmware_version: p.firmware_version.clone(),
                            customer_id: customer_id.clone(),
                            owner_auth: auth,
                            boot_images: scenario.images()?,
                            initial_deposit: deposit.unwrap_or(p.initial_deposit),
                        };
                        let mut stb = SetTopBox::new(name.clone(), tpm, config, pca.clone(), pca_pub, pca_enc)
                            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                        let trusted = |n: &String| p.trusted.is_empty() || p.trusted.contains(n);
                        for (id, (key, vouched)) in &providers {
                            if !vouched && trusted(id) {
                                stb.trust_provider(id.clone(), *key);
                            }
                        }
                        if let Some((_, key)) = tsas.iter().find(|(n, _)| trusted(n)) {
                            stb.trust_time_authority(*key);
                        }
                        for (id, key) in updates.iter().filter(|(n, _)| trusted(n)) {
                            stb.trust_update_service(id.clone(), *key);
                        }
                        let charging = match charging {
                            Some(c) => Some(c.clone()),
                            None => sim.resolve("charging", None).ok(),
                        };
                        if let Some(c) = &charging {
                            let (s, enc) = chargings.get(c).ok_or_else(|| sim.wrong(c, "charging"))?;
                            stb.trust_charging(c.clone(), *s, *enc);
                        }
                        Party::Box(Box::new(BoxActor::new(stb, charging)))
                    }
                }
            };
            sim.parties.insert(name, party);
        }
        Ok(sim)
    }

    fn wrong(&self, name: &str, expected: &'static str) -> ConfigError {
        if self.kinds.contains_key(name) {
            ConfigError::WrongKind {
                name: name.to_string(),
                expected,
            }
        } else {
            ConfigError::UnknownEndpoint(name.to_string())
        }
    }

    /// Named endpoint of `kind`, or the only one when unnamed.
    fn resolve(&self, kind: &'static str, name: Option<&str>) -> Result<String, ConfigError> {
        match name {
            Some(n) if self.kinds.get(n) == Some(&kind) => Ok(n.to_string()),
            Some(n) => Err(self.wrong(n, kind)),
            None => {
                let mut it = self.kinds.iter().filter(|(_, k)| **k == kind);
                match (it.next(), it.next()) {
                    (Some((n, _)), None) => Ok(n.clone()),
                    _ => Err(ConfigError::Ambiguous(kind)),
                }
            }
        }
    }

    pub fn box_actor(&self, name: &str) -> Option<&BoxActor> {
        match self.parties.get(name) {
            Some(Party::Box(b)) => Some(b),
            _ => None,
        }
    }

    fn box_mut(&mut self, name: &str) -> Result<&mut BoxActor, ConfigError> {
        if !matches!(self.parties.get(name), Some(Party::Box(_))) {
            return Err(self.wrong(name, "box"));
        }
        match self.parties.get_mut(name) {
            Some(Party::Box(b)) => Ok(b),
            _ => unreachable!(),
        }
    }

    fn label_of(&self, stb: &str) -> Option<String> {
        self.box_actor(stb).and_then(|b| b.stb.identity_label().map(str::to_string))
    }

    /// Run `f` as endpoint `me` and queue what it sends.
    fn act<T>(&mut self, me: &str, f: impl FnOnce(&mut Party, &mut Ctx) -> T) -> Result<T, ConfigError> {
        let now = self.net.clock();
        let mut party = self
            .parties
            .remove(me)
            .ok_or_else(|| ConfigError::UnknownEndpoint(me.to_string()))?;
        let mut ctx = Ctx::new(now, me, &mut self.errors);
        let r = f(&mut party, &mut ctx);
        let out = std::mem::take(&mut ctx.out);
        self.parties.insert(me.to_string(), party);
        for env in out {
            self.net.send(env);
        }
        Ok(r)
    }

    fn act_box(&mut self, me: &str, f: impl FnOnce(&mut BoxActor, &mut Ctx)) -> Result<(), ConfigError> {
        self.box_mut(me)?;
        self.act(me, |p, ctx| {
            if let Party::Box(b) = p {
                f(b, ctx)
            }
        })
    }

    /// Deliver queued messages until none remain.
    pub fn run_until_quiet(&mut self) {
        let mut steps = 0u64;
        while let Some(mut env) = self.net.pop() {
            steps += 1;
            if steps > STEP_LIMIT {
                self.errors.push(ErrorEvent {
                    time: self.net.clock(),
                    endpoint: "network".into(),
                    code: "StepLimit".into(),
                    detail: String::new(),
                });
                return;
            }
            let mut extra = Vec::new();
            for a in &self.adversaries {
                extra.extend(a.intercept(&mut env));
                if *a == Adversary::Eavesdrop {
                    self.eavesdropped.push(env.bytes.clone());
                }
            }
            self.net.record(&env);
            for e in extra {
                self.net.send(e);
            }
            let receiver = env.receiver.clone();
            let sender = env.sender.clone();
            let msg = match WireMessage::decode(&env.bytes) {
                Ok(m) => m,
                Err(e) => {
                    let _ = self.act(&receiver, |_, ctx| ctx.error(e.code(), &e.to_string()));
                    continue;
                }
            };
            if self.act(&receiver, |p, ctx| p.handle(ctx, &sender, &msg)).is_err() {
                self.errors.push(ErrorEvent {
                    time: self.net.clock(),
                    endpoint: "network".into(),
                    code: "UnknownEndpoint".into(),
                    detail: receiver,
                });
            }
        }
    }

    fn resolve_acl(&mut self, stb: &str) {
        let Some(label) = self.label_of(stb) else { return };
        let member = format!("box:{stb}");
        for entry in self.acl.clone() {
            if entry.members.contains(&member) {
                if let Some(Party::Provider(p)) = self.parties.get_mut(&entry.provider) {
                    p.sp.allow(entry.stream, label.clone());
                }
            }
        }
    }

    fn last_envelope_from(&self, sender: &str, t: MsgType) -> Option<Vec<u8>> {
        self.net
            .transcript()
            .iter()
            .rev()
            .find(|d| d.sender == sender && d.msg_type == t.name())
            .map(|d| d.bytes.clone())
    }

    pub fn execute(&mut self, event: &Event) -> Result<(), ConfigError> {
        match event {
            Event::TakeOwnership { stb, pca, via } => {
                let pca = self.resolve("pca", pca.as_deref())?;
                let to = match via {
                    Some(r) => self.resolve("relay", Some(r))?,
                    None => pca,
                };
                match self.parties.get(stb) {
                    Some(Party::Fake(f)) => {
                        let captured = match f.variant {
                            FakeVariant::ReplayedAik => {
                                let victim = self
                                    .adversaries
                                    .iter()
                                    .find_map(|a| match a {
                                        Adversary::FakeTpm { target, victim, .. } if target == stb => victim.clone(),
                                        _ => None,
                                    })
                                    .ok_or_else(|| ConfigError::Invalid("replayed-aik needs a victim".into()))?;
                                self.last_envelope_from(&victim, MsgType::EnrollEnvelope)
                            }
                            _ => None,
                        };
                        self.act(stb, |p, ctx| {
                            if let Party::Fake(f) = p {
                                f.take_ownership(ctx, &to, captured)
                            }
                        })?;
                    }
                    _ => self.act_box(stb, |b, ctx| b.take_ownership(ctx, &to))?,
                }
                self.run_until_quiet();
                self.resolve_acl(stb);
            }
            Event::Contract { stb, charging } => {
                let c = self.resolve("charging", charging.as_deref())?;
                self.act_box(stb, |b, ctx| b.contract(ctx, &c))?;
            }
            Event::Register {
                stb,
                provider,
                stream,
                model,
            } => {
                let p = self.resolve("provider", provider.as_deref())?;
                let m = ChargingModel::from_name(model).ok_or_else(|| ConfigError::Invalid(format!("charging model {model}")))?;
                self.act_box(stb, |b, ctx| b.register(ctx, &p, *stream, m))?;
            }
            Event::RequestKey {
                stb,
                provider,
                stream,
                valid_from,
                valid_until,
                daily_max,
                hours,
            } => {
                let p = self.resolve("provider", provider.as_deref())?;
                let at = |off: i64| self.start_time.saturating_add_signed(off);
                let c = UsageConstraints {
                    valid_from: at(*valid_from),
                    valid_until: at(*valid_until),
                    daily_max: *daily_max,
                    allowed_hours: hours.as_ref().map(|h| UsageConstraints::hours_mask(h.iter().copied())),
                };
                self.act_box(stb, |b, ctx| b.request_key(ctx, &p, *stream, c))?;
            }
            Event::Permit {
                stb,
                provider,
                stream,
                from,
                until,
            } => {
                let p = self.resolve("provider", provider.as_deref())?;
                let cas = match self.parties.get(&p) {
                    Some(Party::Provider(a)) => a.sp.service(*stream).map(|s| s.cas_id.clone()),
                    _ => None,
                }
                .ok_or_else(|| ConfigError::Invalid(format!("provider {p} has no stream {stream}")))?;
                self.act_box(stb, |b, ctx| b.permit(ctx, &p, &cas, *stream, *from, *until))?;
            }
            Event::Broadcast {
                provider,
                stream,
                periods,
                content,
            } => {
                let p = self.resolve("provider", provider.as_deref())?;
                let label = content.clone().unwrap_or_else(|| format!("{p}/{stream}"));
                let data = synthetic_content(&label, (*periods * self.period_packets) as usize);
                let air = match self.parties.get(&p) {
                    Some(Party::Provider(a)) => a.sp.broadcast(*stream, &data, self.period_packets),
                    _ => None,
                }
                .ok_or_else(|| ConfigError::Invalid(format!("provider {p} has no stream {stream}")))?;
                let clear = packetize(*stream, &data, self.period_packets);
                self.net.put_broadcast(*stream, Broadcast { provider: p, air, clear });
            }
            Event::Watch {
                stb,
                stream,
                from_period,
                periods,
                tsa,
            } => {
                let tsa = match tsa {
                    Some(t) => Some(self.resolve("tsa", Some(t))?),
                    None => self.resolve("tsa", None).ok(),
                };
                let air = self
                    .net
                    .broadcast(*stream)
                    .ok_or_else(|| ConfigError::Invalid(format!("nothing broadcast on stream {stream}")))?;
                let until = periods.map_or(u32::MAX, |n| from_period.saturating_add(n));
                let packets: Vec<_> = air
                    .air
                    .iter()
                    .filter(|p| p.period_index >= *from_period && p.period_index < until)
                    .cloned()
                    .collect();
                self.act_box(stb, |b, ctx| b.watch(ctx, &packets, tsa.as_deref()))?;
            }
            Event::TopUp { stb, charging, amount } => {
                let c = self.resolve("charging", charging.as_deref())?;
                self.act_box(stb, |b, ctx| b.top_up(ctx, &c, *amount))?;
            }
            Event::Push { stb, charging } => {
                let c = self.resolve("charging", charging.as_deref())?;
                self.act_box(stb, |b, ctx| b.push(ctx, &c))?;
            }
            Event::Pull { stb, charging } => {
                let c = self.resolve("charging", charging.as_deref())?;
                self.send_pull(&c, stb)?;
            }
            Event::PushPull { stb, charging } => {
                let c = self.resolve("charging", charging.as_deref())?;
                self.act_box(stb, |b, ctx| b.push(ctx, &c))?;
                self.send_pull(&c, stb)?;
            }
            Event::Update { stb, service } => {
                let s = self.resolve("update-service", service.as_deref())?;
                self.act_box(stb, |b, ctx| b.update(ctx, &s))?;
            }
            Event::CompromiseBoot { stb, component, data } => {
                self.act_box(stb, |b, ctx| {
                    if let Err(e) = b.stb.compromise_boot(component, data.as_bytes()) {
                        ctx.error(e.code(), "compromise-boot");
                    }
                })?;
            }
            Event::LieAboutLog { stb, event } => {
                self.box_mut(stb)?.stb.tamper_log(|log| {
                    flip_image_bit(log, *event);
                });
            }
            Event::Reboot { stb } => {
                self.act_box(stb, |b, ctx| {
                    if let Err(e) = b.stb.reboot() {
                        ctx.error(e.code(), "reboot");
                    }
                })?;
            }
            Event::Advance { seconds } => self.net.advance_clock(*seconds),
            Event::AdvanceToMidnight { plus } => {
                let now = self.net.clock();
                let target = (now / SECONDS_PER_DAY + 1) * SECONDS_PER_DAY + plus;
                self.net.advance_clock(target - now);
            }
            Event::Revoke { pca, stb } => {
                let pca = self.resolve("pca", pca.as_deref())?;
                let label = self.label_of(stb).ok_or_else(|| ConfigError::Invalid(format!("{stb} has no identity")))?;
                self.act(&pca, |p, ctx| {
                    if let Party::Pca(a) = p {
                        if let Err(e) = a.pca.revoke(&label) {
                            ctx.error(e.code(), "revoke");
                        }
                    }
                })?;
            }
            Event::Reveal {
                auditor,
                pca,
                stb,
                reason,
            } => {
                let auditor = self.resolve("auditor", auditor.as_deref())?;
                let pca = self.resolve("pca", pca.as_deref())?;
                let label = self.label_of(stb).ok_or_else(|| ConfigError::Invalid(format!("{stb} has no identity")))?;
                self.act(&auditor, |p, ctx| {
                    if let Party::Auditor(a) = p {
                        let claim = a.auditor.claim(&label, reason, ctx.now);
                        ctx.send(
                            &pca,
                            &RevealRequest {
                                identity_label: label.clone(),
                                claim: Some(claim),
                            },
                        );
                    }
                })?;
            }
            Event::CrossRequest {
                stb,
                cas,
                stream,
                period,
            } => {
                self.act_box(stb, |b, ctx| {
                    if let Err(e) = b.stb.probe_cas(cas, *stream, *period, ctx.now) {
                        ctx.error(e.code(), &format!("{cas} stream {stream}"));
                    }
                })?;
            }
        }
        self.run_until_quiet();
        Ok(())
    }

    fn send_pull(&mut self, charging: &str, stb: &str) -> Result<(), ConfigError> {
        self.box_mut(stb)?;
        self.resolve("charging", Some(charging))?;
        self.act(charging, |p, ctx| {
            if let Party::Charging(c) = p {
                let req = c.cp.pull_request();
                ctx.send(stb, &req);
            }
        })
    }

    fn error_count(&self, code: &str, detail: Option<&str>, endpoint: Option<&str>) -> usize {
        self.errors
            .iter()
            .filter(|e| code == "*" || e.code == code)
            .filter(|e| detail.is_none_or(|d| e.detail == d))
            .filter(|e| endpoint.is_none_or(|n| e.endpoint == n))
            .count()
    }

    fn charging(&self, name: Option<&str>) -> Result<&ChargingProvider, ConfigError> {
        let n = self.resolve("charging", name)?;
        match self.parties.get(&n) {
            Some(Party::Charging(c)) => Ok(&c.cp),
            _ => Err(self.wrong(&n, "charging")),
        }
    }

    fn stb(&self, name: &str) -> Result<&BoxActor, ConfigError> {
        self.box_actor(name).ok_or_else(|| self.wrong(name, "box"))
    }

    fn invoice_and_meter(&self, stb: &str, charging: Option<&str>) -> Result<(u64, u64), ConfigError> {
        let b = self.stb(stb)?;
        let invoice = b
            .stb
            .identity_label()
            .map_or(0, |l| self.charging(charging).map_or(0, |c| c.invoice(l)));
        Ok((invoice, b.stb.metered_units()))
    }

    /// Secrets that must never appear in any delivered message.
    fn privacy_secrets(&self) -> Vec<(String, Vec<u8>)> {
        let mut secrets = Vec::new();
        for (name, c) in &self.customer_ids {
            secrets.push((format!("customer_id of {name}"), c.as_bytes().to_vec()));
        }
        for k in &self.ek_publics {
            secrets.push(("EK public key".into(), k.to_bytes().to_vec()));
        }
        for (name, p) in &self.parties {
            if let Party::Box(b) = p {
                for r in &b.plain_records {
                    secrets.push((format!("record nonce of {name}"), r.record_nonce.to_vec()));
                    secrets.push((format!("record signature of {name}"), r.signature.0.to_vec()));
                    secrets.push((format!("record plaintext of {name}"), r.encode()));
                }
            }
        }
        secrets
    }

    pub fn privacy_leaks(&self) -> (usize, usize, Vec<String>) {
        let secrets = self.privacy_secrets();
        let mut leaks = Vec::new();
        let views = self.net.transcript().iter().map(|d| &d.bytes).chain(self.eavesdropped.iter());
        let mut scanned = 0;
        for bytes in views {
            scanned += 1;
            for (what, s) in &secrets {
                if !s.is_empty() && bytes.windows(s.len()).any(|w| w == s.as_slice()) {
                    leaks.push(what.clone());
                }
            }
        }
        (scanned, secrets.len(), leaks)
    }

    pub fn judge(&self, check: &Check) -> Result<(bool, String), ConfigError> {
        Ok(match check {
            Check::Deposit { stb, equals } => {
                let d = self.stb(stb)?.stb.deposit();
                (d == *equals, format!("{stb} deposit {d}, expected {equals}"))
            }
            Check::DepositConserved { stb } => {
                let b = &self.stb(stb)?.stb;
                let l = b.deposit_ledger();
                let ok = l.initial + l.applied >= l.charged && l.initial + l.applied - l.charged == b.deposit();
                (
                    ok,
                    format!("{stb} {} + {} - {} vs {}", l.initial, l.applied, l.charged, b.deposit()),
                )
            }
            Check::FirmwareVersion { stb, equals } => {
                let v = self.stb(stb)?.stb.firmware_version().to_string();
                (v == *equals, format!("{stb} firmware {v}, expected {equals}"))
            }
            Check::Credential { stb, issued } => {
                let has = match self.parties.get(stb) {
                    Some(Party::Box(b)) => b.stb.credential().is_some(),
                    Some(Party::Fake(f)) => f.credentials_obtained > 0,
                    _ => return Err(self.wrong(stb, "box")),
                };
                (has == *issued, format!("{stb} credential {has}, expected {issued}"))
            }
            Check::PcaIssued { pca, equals } => {
                let n = self.resolve("pca", pca.as_deref())?;
                let Some(Party::Pca(p)) = self.parties.get(&n) else {
                    return Err(self.wrong(&n, "pca"));
                };
                let c = p.pca.issued_count();
                (c == *equals, format!("{n} issued {c}, expected {equals}"))
            }
            Check::Played { stb, stream, periods } => {
                let n = self.stb(stb)?.played.get(stream).copied().unwrap_or(0);
                (n == *periods, format!("{stb} played {n} periods of {stream}, expected {periods}"))
            }
            Check::Fidelity { stb, stream } => {
                let b = self.stb(stb)?;
                let out = b.outputs.get(stream).map(Vec::as_slice).unwrap_or_default();
                let Some(bc) = self.net.broadcast(*stream) else {
                    return Ok((false, format!("nothing broadcast on {stream}")));
                };
                let tag = b.stb.watermark_tag(*stream).ok();
                let bad = out
                    .iter()
                    .filter(|o| {
                        let orig = bc.clear.get(o.sequence as usize);
                        orig.is_none_or(|c| {
                            c.payload[..WATERMARK_OFFSET] != o.payload[..WATERMARK_OFFSET]
                                || tag.is_none_or(|t| o.payload[WATERMARK_OFFSET..] != t)
                        })
                    })
                    .count();
                (
                    !out.is_empty() && bad == 0,
                    format!("{stb} stream {stream}: {} packets, {bad} differ", out.len()),
                )
            }
            Check::Errors {
                code,
                detail,
                endpoint,
                equals,
            } => {
                let n = self.error_count(code, detail.as_deref(), endpoint.as_deref());
                (n == *equals, format!("{code} observed {n} times, expected {equals}"))
            }
            Check::InvoiceMatchesMeter { stb, charging } => {
                let (i, m) = self.invoice_and_meter(stb, charging.as_deref())?;
                (i == m && m > 0, format!("{stb} invoice {i}, meter {m}"))
            }
            Check::InvoicesEqual { boxes, charging } => {
                let pairs = boxes
                    .iter()
                    .map(|b| self.invoice_and_meter(b, charging.as_deref()))
                    .collect::<Result<Vec<_>, _>>()?;
                let ok = !pairs.is_empty()
                    && pairs.iter().all(|(i, m)| i == m && *i == pairs[0].0)
                    && pairs[0].0 > 0;
                (ok, format!("invoice/meter pairs {pairs:?}"))
            }
            Check::CwReleased { stb, cas, equals } => {
                let n = self.stb(stb)?.stb.cas(cas).map_or(0, |c| c.total_released());
                (n == *equals, format!("{stb} {cas} released {n}, expected {equals}"))
            }
            Check::VouchersIssued { charging, equals } => {
                let n = self.charging(charging.as_deref())?.vouchers_issued();
                (n == *equals, format!("vouchers issued {n}, expected {equals}"))
            }
            Check::KeysIssued { provider, equals } => {
                let p = self.resolve("provider", provider.as_deref())?;
                let Some(Party::Provider(a)) = self.parties.get(&p) else {
                    return Err(self.wrong(&p, "provider"));
                };
                let n = a.sp.key_registry().len();
                (n == *equals, format!("{p} keys issued {n}, expected {equals}"))
            }
            Check::Registered { stb, stream, equals } => {
                let r = self.stb(stb)?.stb.registration(*stream).is_some();
                (r == *equals, format!("{stb} registered for {stream}: {r}"))
            }
            Check::PrivacyScan {} => {
                let (scanned, secrets, leaks) = self.privacy_leaks();
                (
                    leaks.is_empty(),
                    format!("{scanned} messages scanned for {secrets} secrets, {} leaks {leaks:?}", leaks.len()),
                )
            }
            Check::Revealed { auditor, stb } => {
                let a = self.resolve("auditor", auditor.as_deref())?;
                let Some(Party::Auditor(aud)) = self.parties.get(&a) else {
                    return Err(self.wrong(&a, "auditor"));
                };
                let label = self.label_of(stb).unwrap_or_default();
                let got = aud.revealed.get(&label);
                let want = self.customer_ids.get(stb);
                (got.is_some() && got == want, format!("revealed {got:?}"))
            }
            Check::TranscriptContains { msg_type, code, equals } => {
                let n = self
                    .net
                    .transcript()
                    .iter()
                    .filter(|d| d.msg_type == *msg_type)
                    .filter(|d| {
                        code.as_ref()
                            .is_none_or(|c| ProtocolError::decode(&d.bytes).is_ok_and(|e| e.code == *c))
                    })
                    .count();
                (n == *equals, format!("{msg_type} {code:?} in transcript {n} times, expected {equals}"))
            }
            Check::QueueEmpty {} => (self.net.is_quiet(), format!("{} queued", self.net.queued())),
        })
    }

    pub fn report(&self, checks: &[Check]) -> Result<Report, ConfigError> {
        let mut results = Vec::new();
        for c in checks {
            let (passed, detail) = self.judge(c)?;
            results.push(AssertionResult {
                check: c.name(),
                passed,
                detail,
            });
        }
        Ok(Report {
            scenario: self.name.clone(),
            seed: self.seed,
            results,
            errors: self.errors.clone(),
            deliveries: self.net.transcript().len(),
            transcript_digest: hash(self.net.transcript_text().as_bytes()),
        })
    }
}

/// Build, run every event, and judge every assertion.
pub fn run_scenario(scenario: &Scenario, seed: u64, extra: &[Adversary]) -> Result<Outcome, ConfigError> {
    let mut sim = Simulation::build(scenario, seed, extra)?;
    for e in &scenario.config.events {
        sim.execute(e)?;
    }
    let report = sim.report(&scenario.config.asserts)?;
    Ok(Outcome {
        report,
        transcript: sim.net.transcript_text(),
        sidecar: sim.net.sidecar(),
    })
}
