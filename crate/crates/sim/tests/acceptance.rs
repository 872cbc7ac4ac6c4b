// Licensed under the Apache-2.0 license

//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use stb_core::boot::{self, BootImage, BootLog};
use stb_core::cas::{CasError, UsageConstraints};
use stb_core::crypto::{hash, Digest};
use stb_core::pca::PrivacyCa;
use stb_core::services::charging::{ChargingError, ChargingProvider};
use stb_core::services::update::{FirmwareRelease, UpdateService};
use stb_core::services::vendor::{ChargingModel, ProviderError, ServiceEntry, ServiceProvider};
use stb_core::services::TimeAuthority;
use stb_core::stb::{BoxConfig, BoxError, SetTopBox};
use stb_core::tpm::{Manufacturer, TpmError};
use stb_sim::{run_scenario, Outcome, Scenario};

const SEED: u64 = 1;
const NOW: u64 = 1_700_038_800;
const STREAMS: [u16; 3] = [7, 8, 9];

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn scenario(name: &str) -> Scenario {
    Scenario::bundled(name).expect("bundled scenario").expect("scenario parses")
}

fn run(name: &str) -> Outcome {
    run_scenario(&scenario(name), SEED, &[]).expect("scenario runs")
}

/// Failed assertion lines of a scenario run, empty when all passed.
fn failures(o: &Outcome) -> Vec<String> {
    o.report
        .results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.check, r.detail))
        .collect()
}

fn scenario_verdict(o: &Outcome, summary: String) -> Verdict {
    let f = failures(o);
    if f.is_empty() {
        Verdict::new(true, summary)
    } else {
        Verdict::new(false, format!("{summary}; failed {f:?}"))
    }
}

fn error_count(o: &Outcome, code: &str) -> usize {
    o.report.errors.iter().filter(|e| e.code == code).count()
}

// ---- a small head end driven directly, without the network ----

struct HeadEnd {
    rng: ChaCha20Rng,
    manufacturer: Manufacturer,
    pca: PrivacyCa,
    provider: ServiceProvider,
    charging: ChargingProvider,
    updates: UpdateService,
    images: Vec<BootImage>,
}

impl HeadEnd {
    fn new(seed: u64) -> Self {
        let fixtures = scenario("firmware-update");
        let images = fixtures.images().unwrap();
        let reference = fixtures.reference().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let manufacturer = Manufacturer::new("acme-tpm", &mut rng);
        let mut pca = PrivacyCa::new("pca", &mut rng);
        pca.trust_manufacturer("acme-tpm", manufacturer.root_public());
        let mut provider = ServiceProvider::new("vendor", pca.public(), reference.clone(), &mut rng);
        for s in STREAMS {
            provider.add_service(ServiceEntry {
                stream_id: s,
                cas_id: "cas-a".into(),
                description: String::new(),
                tariff: 1,
                online_gated: false,
            });
        }
        let tsa = TimeAuthority::new("tsa", &mut rng);
        let charging = ChargingProvider::new("charging", pca.public(), tsa.public(), reference, &mut rng);
        let mut updates = UpdateService::new("updates", pca.public(), &mut rng);
        let fw = fixtures.firmware().unwrap();
        updates.publish(
            fw.model,
            FirmwareRelease {
                version: fw.version,
                image: fw.image.into_bytes(),
            },
        );
        Self {
            rng,
            manufacturer,
            pca,
            provider,
            charging,
            updates,
            images,
        }
    }

    fn enrolled_box(&mut self) -> SetTopBox {
        let tpm = self.manufacturer.manufacture("stb-3000", &mut self.rng);
        let config = BoxConfig {
            model: "stb-3000".into(),
            hw_revision: "r4".into(),
            firmware_version: "1.0".into(),
            customer_id: "acceptance@example.net".into(),
            owner_auth: [7; 20],
            boot_images: self.images.clone(),
            initial_deposit: 0,
        };
        let mut stb =
            SetTopBox::new("box", tpm, config, self.pca.id(), self.pca.public(), self.pca.encryption_public()).unwrap();
        stb.trust_provider(self.provider.id(), self.provider.public());
        stb.trust_charging(self.charging.id(), self.charging.public(), self.charging.encryption_public());
        stb.trust_update_service(self.updates.id(), self.updates.public());
        stb.take_ownership_online(&mut self.pca, NOW, |b| b).unwrap();
        stb.certify_bind_key().unwrap();
        self.charging.add_contract(stb.credential().unwrap()).unwrap();
        stb
    }

    fn register(&mut self, stb: &mut SetTopBox, stream: u16, model: ChargingModel) -> Result<(), ProviderError> {
        let offer = self.provider.make_offer();
        let req = stb.registration_request(&offer, stream, model).unwrap();
        let validity = self.pca.check_validity(&self.provider.validity_query(stb.identity_label().unwrap()));
        let receipt = self.provider.register(&req, &validity, NOW)?;
        stb.handle_receipt(&receipt).unwrap();
        Ok(())
    }

    fn top_up(&mut self, stb: &mut SetTopBox) -> Result<(), ChargingError> {
        let ch = self.charging.challenge("top-up");
        let req = stb.top_up_request(&ch, 10).unwrap();
        let voucher = self.charging.top_up(&req, NOW)?;
        stb.apply_top_up(&voucher).unwrap();
        Ok(())
    }

    fn key(&mut self, stb: &mut SetTopBox, stream: u16) -> Result<(), ProviderError> {
        let ch = self.provider.challenge("key");
        let c = UsageConstraints {
            valid_from: NOW,
            valid_until: NOW + 3600,
            daily_max: None,
            allowed_hours: None,
        };
        let req = stb.key_request(&ch, stream, c).unwrap();
        let grant = self.provider.issue_constrained_key(&req, NOW)?;
        stb.install_grant(&grant).unwrap();
        Ok(())
    }
}

// ---- criteria ----

fn c1_fidelity() -> Verdict {
    let t = Instant::now();
    let o = run("e2e-purchase");
    let took = t.elapsed();
    let mut v = scenario_verdict(&o, format!("{} deliveries in {took:.2?}", o.report.deliveries));
    if took >= Duration::from_secs(5) {
        v.pass = false;
        v.detail += "; slower than 5 s";
    }
    v
}

fn c2_replay() -> Verdict {
    let o = run("replay-attack");
    let replays = error_count(&o, "ReplayDetected");
    let stale = error_count(&o, "NonceMismatch");
    let mut v = scenario_verdict(&o, format!("{replays} voucher and {stale} update replays rejected"));
    if replays != 100 || stale != 100 {
        v.pass = false;
    }
    v
}

/// Every way one logged event can be altered so that it describes a
/// different measurement.
fn single_event_tampers(log: &BootLog) -> Vec<(String, BootLog)> {
    let mut out = Vec::new();
    for i in 0..log.events.len() {
        let mut push = |what: &str, f: &dyn Fn(&mut BootLog)| {
            let mut l = log.clone();
            f(&mut l);
            out.push((format!("event {i} {what}"), l));
        };
        push("image bit", &|l| l.events[i].component_image[0] ^= 1);
        push("digest bit", &|l| l.events[i].digest.0[0] ^= 1);
        push("register", &|l| l.events[i].pcr_index = (l.events[i].pcr_index + 8) % 16);
        push("image and digest", &|l| {
            let e = &mut l.events[i];
            e.component_image = b"substitute image".to_vec();
            e.digest = hash(&e.component_image);
        });
        push("dropped", &|l| {
            l.events.remove(i);
        });
        push("duplicated", &|l| {
            let e = l.events[i].clone();
            l.events.insert(i, e);
        });
    }
    out
}

fn c3_attestation() -> Verdict {
    let mut he = HeadEnd::new(3);
    let mut stb = he.enrolled_box();
    // a subscriber already, so key requests reach the attestation check
    he.register(&mut stb, 7, ChargingModel::ConstrainedKey).unwrap();
    let clean = stb.boot_log().clone();
    if clean.events.len() != 5 {
        return Verdict::new(false, format!("boot log has {} events", clean.events.len()));
    }

    let mut cases = single_event_tampers(&clean);
    let exhaustive = cases.len();
    let mut rng = ChaCha20Rng::seed_from_u64(0xb17f);
    for n in 0..1000 {
        let mut l = clean.clone();
        let i = rng.gen_range(0..l.events.len());
        let img = &mut l.events[i].component_image;
        let byte = rng.gen_range(0..img.len());
        let bit = rng.gen_range(0..8);
        img[byte] ^= 1 << bit;
        cases.push((format!("random flip {n}"), l));
    }

    let mut accepted = Vec::new();
    for (what, log) in &cases {
        stb.tamper_log(|l| *l = log.clone());
        let reg = he.register(&mut stb, 8, ChargingModel::Prepaid);
        let top = he.top_up(&mut stb);
        let key = he.key(&mut stb, 7);
        if !matches!(reg, Err(ProviderError::Untrusted(_))) {
            accepted.push(format!("{what}: register {reg:?}"));
        }
        if !matches!(top, Err(ChargingError::Untrusted(_))) {
            accepted.push(format!("{what}: top-up {top:?}"));
        }
        if !matches!(key, Err(ProviderError::Untrusted(_))) {
            accepted.push(format!("{what}: key {key:?}"));
        }
    }
    stb.tamper_log(|l| *l = clean.clone());

    let delivered = he.charging.vouchers_issued() as usize
        + he.provider.key_registry().len().saturating_sub(1)
        + stb.cas_instances().map(|c| c.total_released() as usize).sum::<usize>()
        + usize::from(stb.registration(8).is_some());
    // the untampered log is still accepted
    let control = he.top_up(&mut stb).is_ok();
    Verdict::new(
        accepted.is_empty() && delivered == 0 && control,
        format!(
            "{exhaustive} exhaustive and 1000 random tampers, {} accepted, {delivered} deliveries, clean log accepted {control}",
            accepted.len()
        ),
    )
}

fn c4_seal() -> Verdict {
    let mut problems = Vec::new();

    // raw TPM: one sealed blob against every single-register perturbation
    let images = scenario("e2e-purchase").images().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let m = Manufacturer::new("acme-tpm", &mut rng);
    let mut tpm = m.manufacture("stb-3000", &mut rng);
    let log = boot::boot(&mut tpm, &images).unwrap();
    let selection = log.touched();
    let blob = tpm.seal_current(b"entitlement secret", &selection).unwrap();
    if tpm.unseal(&blob).is_err() {
        problems.push("unseal fails in the sealed state".to_string());
    }
    let mut perturbed = 0;
    for &idx in &selection {
        for bit in 0..8 {
            let mut t = tpm.clone();
            let mut d = Digest::ZERO;
            d.0[0] = 1 << bit;
            t.pcr_extend(idx as usize, &d).unwrap();
            perturbed += 1;
            if !matches!(t.unseal(&blob), Err(TpmError::StateMismatch(_))) {
                problems.push(format!("unseal after perturbing PCR {idx}"));
            }
        }
    }

    // box: entitlements for several streams under every component swap
    let mut he = HeadEnd::new(41);
    let mut stb = he.enrolled_box();
    for s in STREAMS {
        he.register(&mut stb, s, ChargingModel::Prepaid).unwrap();
    }
    let probe_all = |stb: &mut SetTopBox| -> Vec<Result<(), BoxError>> {
        STREAMS.iter().map(|&s| stb.probe_cas("cas-a", s, 0, NOW)).collect()
    };
    let original = he.images.clone();
    for img in &original {
        stb.compromise_boot(&img.name, b"patched").unwrap();
        for r in probe_all(&mut stb) {
            if !matches!(r, Err(BoxError::Cas(CasError::Unseal(TpmError::StateMismatch(_))))) {
                problems.push(format!("{} swapped: {r:?}", img.name));
            }
        }
        stb.compromise_boot(&img.name, &img.image).unwrap();
        if probe_all(&mut stb).iter().any(Result::is_err) {
            problems.push(format!("{} restored but still locked", img.name));
        }
    }

    // firmware update locks every pre-update entitlement until re-provisioned
    let dddb = stb.device_description().unwrap();
    let sealed = he.updates.build_update(&dddb).unwrap();
    stb.apply_update(&sealed).unwrap();
    let locked = probe_all(&mut stb)
        .iter()
        .filter(|r| matches!(r, Err(BoxError::Cas(CasError::Unseal(TpmError::StateMismatch(_))))))
        .count();
    if locked != STREAMS.len() {
        problems.push(format!("{locked} of {} entitlements locked after update", STREAMS.len()));
    }
    for s in STREAMS {
        if let Err(e) = he.register(&mut stb, s, ChargingModel::Prepaid) {
            problems.push(format!("re-provision stream {s}: {e:?}"));
        }
    }
    if probe_all(&mut stb).iter().any(Result::is_err) {
        problems.push("re-provisioned entitlements still locked".into());
    }

    Verdict::new(
        problems.is_empty(),
        format!(
            "{perturbed} register perturbations over selection {selection:?}, {} component swaps, {locked}/{} locked by update; problems {problems:?}",
            original.len(),
            STREAMS.len()
        ),
    )
}

fn c5_charging() -> Verdict {
    let o = run("postpaid-settle");
    scenario_verdict(&o, "push, pull and push+pull invoices equal the meters".into())
}

fn c6_constraints() -> Verdict {
    let a = run("expired-key");
    let b = run("daily-cap");
    let fa = failures(&a);
    let fb = failures(&b);
    Verdict::new(
        fa.is_empty() && fb.is_empty(),
        format!(
            "expired {} / hours {} / cap {} rejections; failed {:?}",
            error_count(&a, "Expired"),
            error_count(&a, "OutsideAllowedHours"),
            error_count(&b, "DailyCapExceeded"),
            [fa, fb].concat()
        ),
    )
}

fn c7_privacy() -> Verdict {
    let o = run("eavesdrop-privacy");
    let scan = o
        .report
        .results
        .iter()
        .find(|r| r.check == "PrivacyScan")
        .map(|r| r.detail.clone())
        .unwrap_or_default();
    scenario_verdict(&o, scan)
}

fn c8_fake_tpm() -> Verdict {
    let o = run("fake-tpm");
    let codes = ["BadEkCredential", "BadAikBinding", "ChallengeFailed"];
    let rejected: usize = codes.iter().map(|c| error_count(&o, c)).sum();
    scenario_verdict(&o, format!("{rejected} fake enrollments rejected, 1 genuine credential issued"))
}

fn c9_multi_cas() -> Verdict {
    let o = run("multi-cas");
    scenario_verdict(
        &o,
        format!("{} cross-requests answered NoEntitlement", error_count(&o, "NoEntitlement")),
    )
}

fn c10_determinism() -> Verdict {
    let mut differing = Vec::new();
    let mut n = 0;
    for name in stb_sim::bundled::scenario_names() {
        let mut sc = scenario(name);
        for shuffle in [false, true] {
            sc.config.scenario.shuffle = shuffle;
            let a = run_scenario(&sc, SEED, &[]).unwrap();
            let b = run_scenario(&sc, SEED, &[]).unwrap();
            n += 1;
            if a.transcript != b.transcript
                || a.sidecar != b.sidecar
                || a.report.transcript_digest != b.report.transcript_digest
            {
                differing.push(format!("{name} shuffle={shuffle}"));
            }
        }
    }
    Verdict::new(
        differing.is_empty(),
        format!("{n} scenario runs repeated, differing {differing:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("end-to-end fidelity", c1_fidelity),
        ("replay protection", c2_replay),
        ("attestation soundness", c3_attestation),
        ("seal/state binding", c4_seal),
        ("charging conservation", c5_charging),
        ("constraint enforcement", c6_constraints),
        ("pseudonymity/privacy", c7_privacy),
        ("fake-TPM resistance", c8_fake_tpm),
        ("multi-CAS isolation", c9_multi_cas),
        ("determinism", c10_determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        failed += usize::from(!v.pass);
        println!("{} {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    let total = start.elapsed();
    println!("{} of {} criteria passed in {total:.2?}", criteria.len() - failed, criteria.len());
    if failed == 0 && total < Duration::from_secs(60) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
