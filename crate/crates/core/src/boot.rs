// Licensed under the Apache-2.0 license

//! Measured boot and log verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash, hash_parts, Digest, PublicKey};
use crate::tpm::{Nonce, PcrValues, Quote, TpmError, TpmState, PCR_COUNT};
use crate::wire::Signed;
use crate::wire_struct;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootImage {
    pub pcr_index: u8,
    pub name: String,
    pub image: Vec<u8>,
}

impl BootImage {
    pub fn new(pcr_index: u8, name: impl Into<String>, image: impl Into<Vec<u8>>) -> Self {
        Self {
            pcr_index,
            name: name.into(),
            image: image.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementEvent {
    pub pcr_index: u8,
    pub component_name: String,
    pub component_image: Vec<u8>,
    pub digest: Digest,
}
wire_struct!(MeasurementEvent, MeasurementEvent, {
    pcr_index: u8, component_name: string, component_image: vec, digest: digest,
});

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BootLog {
    pub events: Vec<MeasurementEvent>,
}
wire_struct!(BootLog, BootLog, { events: list });

impl BootLog {
    /// PCR bank obtained by folding the logged digests from reset.
    pub fn replay(&self) -> Result<[Digest; PCR_COUNT], usize> {
        let mut bank = [Digest::ZERO; PCR_COUNT];
        for ev in &self.events {
            let reg = bank.get_mut(ev.pcr_index as usize).ok_or(ev.pcr_index as usize)?;
            *reg = hash_parts(&[reg.as_bytes(), ev.digest.as_bytes()]);
        }
        Ok(bank)
    }

    pub fn touched(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.events.iter().map(|e| e.pcr_index).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Measure and extend each image in order.
pub fn boot(tpm: &mut TpmState, images: &[BootImage]) -> Result<BootLog, TpmError> {
    if !tpm.pcrs_at_reset() {
        return Err(TpmError::NotAtReset);
    }
    let mut events = Vec::with_capacity(images.len());
    for img in images {
        let digest = hash(&img.image);
        tpm.pcr_extend(img.pcr_index as usize, &digest)?;
        events.push(MeasurementEvent {
            pcr_index: img.pcr_index,
            component_name: img.name.clone(),
            component_image: img.image.clone(),
            digest,
        });
    }
    Ok(BootLog { events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UntrustedReason {
    LogMismatch,
    UnknownConfiguration,
    NonceMismatch,
    BadQuoteSignature,
}

impl UntrustedReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::LogMismatch => "LogMismatch",
            Self::UnknownConfiguration => "UnknownConfiguration",
            Self::NonceMismatch => "NonceMismatch",
            Self::BadQuoteSignature => "BadQuoteSignature",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Trusted { configuration: String },
    Untrusted(UntrustedReason),
}

impl Verdict {
    pub fn is_trusted(&self) -> bool {
        matches!(self, Verdict::Trusted { .. })
    }
}

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("reference table parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("configuration {name}: bad PCR entry {key}")]
    BadEntry { name: String, key: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub name: String,
    pub pcrs: PcrValues,
}

impl Configuration {
    /// Every listed register is quoted with that value; every other quoted
    /// register is still at reset.
    fn matches(&self, quoted: &PcrValues) -> bool {
        self.pcrs
            .entries()
            .iter()
            .all(|(i, d)| quoted.get(*i) == Some(d))
            && quoted
                .entries()
                .iter()
                .all(|(i, d)| self.pcrs.get(*i).is_some() || *d == Digest::ZERO)
    }
}

/// Known-good PCR configurations held by a verifier.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReferenceTable {
    pub configurations: Vec<Configuration>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    #[serde(default)]
    configuration: Vec<ConfigFile>,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    name: String,
    pcrs: BTreeMap<String, String>,
}

impl ReferenceTable {
    pub fn from_toml(text: &str) -> Result<Self, ReferenceError> {
        let file: TableFile = toml::from_str(text)?;
        let mut configurations = Vec::with_capacity(file.configuration.len());
        for c in file.configuration {
            let mut entries = Vec::with_capacity(c.pcrs.len());
            for (k, v) in &c.pcrs {
                let bad = || ReferenceError::BadEntry {
                    name: c.name.clone(),
                    key: k.clone(),
                };
                let index: u8 = k.parse().map_err(|_| bad())?;
                let digest = Digest::from_hex(v).ok_or_else(bad)?;
                entries.push((index, digest));
            }
            let pcrs = PcrValues::new(entries).map_err(|_| ReferenceError::BadEntry {
                name: c.name.clone(),
                key: "index".into(),
            })?;
            configurations.push(Configuration { name: c.name, pcrs });
        }
        Ok(Self { configurations })
    }

    pub fn to_toml(&self) -> String {
        let file = TableFile {
            configuration: self
                .configurations
                .iter()
                .map(|c| ConfigFile {
                    name: c.name.clone(),
                    pcrs: c
                        .pcrs
                        .entries()
                        .iter()
                        .map(|(i, d)| (i.to_string(), d.to_hex()))
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("reference table serializes")
    }

    /// Configuration produced by booting `images` on a fresh TPM.
    pub fn configuration_for(name: &str, images: &[BootImage]) -> Configuration {
        let log = BootLog {
            events: images
                .iter()
                .map(|i| MeasurementEvent {
                    pcr_index: i.pcr_index,
                    component_name: i.name.clone(),
                    component_image: i.image.clone(),
                    digest: hash(&i.image),
                })
                .collect(),
        };
        let bank = log.replay().expect("boot image PCR index in range");
        let pcrs = PcrValues::new(log.touched().into_iter().map(|i| (i, bank[i as usize])))
            .expect("indices in range");
        Configuration {
            name: name.to_string(),
            pcrs,
        }
    }

    pub fn push(&mut self, c: Configuration) {
        self.configurations.push(c);
    }

    pub fn lookup(&self, quoted: &PcrValues) -> Option<&Configuration> {
        self.configurations.iter().find(|c| c.matches(quoted))
    }
}

/// Judge a quote whose signature has already been checked.
pub fn verify_log(log: &BootLog, reference: &ReferenceTable, quote: &Quote, expected_nonce: &Nonce) -> Verdict {
    if quote.external_nonce != *expected_nonce {
        return Verdict::Untrusted(UntrustedReason::NonceMismatch);
    }
    if log.events.iter().any(|e| hash(&e.component_image) != e.digest) {
        return Verdict::Untrusted(UntrustedReason::LogMismatch);
    }
    let bank = match log.replay() {
        Ok(b) => b,
        Err(_) => return Verdict::Untrusted(UntrustedReason::LogMismatch),
    };
    let quoted = &quote.pcr_values;
    let all_logged_quoted = log.touched().iter().all(|i| quoted.get(*i).is_some());
    let consistent = quoted.entries().iter().all(|(i, d)| bank[*i as usize] == *d);
    if !all_logged_quoted || !consistent {
        return Verdict::Untrusted(UntrustedReason::LogMismatch);
    }
    match reference.lookup(quoted) {
        Some(c) => Verdict::Trusted {
            configuration: c.name.clone(),
        },
        None => Verdict::Untrusted(UntrustedReason::UnknownConfiguration),
    }
}

/// Signature check against the AIK, then [`verify_log`].
pub fn verify_attestation(
    log: &BootLog,
    reference: &ReferenceTable,
    quote: &Quote,
    aik_pub: &PublicKey,
    expected_nonce: &Nonce,
) -> Verdict {
    if !quote.verify_with(aik_pub) {
        return Verdict::Untrusted(UntrustedReason::BadQuoteSignature);
    }
    verify_log(log, reference, quote, expected_nonce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::tests::owned_with_active_aik;
    use crate::wire::WireCodec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn chain() -> Vec<BootImage> {
        vec![
            BootImage::new(0, "bios", b"bios v1".to_vec()),
            BootImage::new(1, "bootloader", b"loader v1".to_vec()),
            BootImage::new(2, "kernel", b"kernel v1".to_vec()),
            BootImage::new(3, "cas-runtime", b"cas v1".to_vec()),
            BootImage::new(4, "cas-firmware", b"firmware 1.0".to_vec()),
        ]
    }

    fn booted(seed: u64) -> (TpmState, BootLog, ReferenceTable) {
        let mut tpm = owned_with_active_aik(seed);
        tpm.reboot();
        let log = boot(&mut tpm, &chain()).unwrap();
        let mut table = ReferenceTable::default();
        table.push(ReferenceTable::configuration_for("good", &chain()));
        (tpm, log, table)
    }

    const SEL: [u8; 5] = [0, 1, 2, 3, 4];

    #[test]
    fn boot_rules() {
        let (mut tpm, log, _) = booted(1);
        assert_eq!(log.events.len(), 5);
        assert!(!tpm.pcrs_at_reset());
        assert_eq!(boot(&mut tpm, &chain()).unwrap_err(), TpmError::NotAtReset);
        let (tpm2, _, _) = booted(2);
        assert_eq!(tpm.pcrs(), tpm2.pcrs());
        assert_eq!(log.replay().unwrap(), *tpm.pcrs());
        assert_eq!(BootLog::decode(&log.encode()).unwrap(), log);
    }

    #[test]
    fn swapping_images_changes_register() {
        let mut images = chain();
        images.push(BootImage::new(4, "extra", b"extra".to_vec()));
        let base = ReferenceTable::configuration_for("a", &images);
        let n = images.len();
        images.swap(n - 2, n - 1);
        let swapped = ReferenceTable::configuration_for("b", &images);
        assert_ne!(base.pcrs.get(4), swapped.pcrs.get(4));
        assert_eq!(base.pcrs.get(0), swapped.pcrs.get(0));
    }

    #[test]
    fn pristine_boot_is_trusted() {
        let (tpm, log, table) = booted(3);
        let nonce = [3u8; 32];
        let q = tpm.quote("aik", &SEL, &nonce).unwrap();
        let aik = tpm.aik_credential("aik").unwrap().aik_pub;
        assert_eq!(
            verify_attestation(&log, &table, &q, &aik, &nonce),
            Verdict::Trusted { configuration: "good".into() }
        );
        assert_eq!(
            verify_log(&log, &table, &q, &[4u8; 32]),
            Verdict::Untrusted(UntrustedReason::NonceMismatch)
        );
        let mut bad = q.clone();
        bad.signature.0[0] ^= 1;
        assert_eq!(
            verify_attestation(&log, &table, &bad, &aik, &nonce),
            Verdict::Untrusted(UntrustedReason::BadQuoteSignature)
        );
        assert_eq!(
            verify_log(&log, &ReferenceTable::default(), &q, &nonce),
            Verdict::Untrusted(UntrustedReason::UnknownConfiguration)
        );
    }

    #[test]
    fn quote_missing_a_logged_register_is_rejected() {
        let (tpm, log, table) = booted(4);
        let q = tpm.quote("aik", &[0, 1, 2, 3], &[0; 32]).unwrap();
        assert_eq!(verify_log(&log, &table, &q, &[0; 32]), Verdict::Untrusted(UntrustedReason::LogMismatch));
    }

    #[test]
    fn every_digest_bit_flip_is_a_log_mismatch() {
        let (tpm, log, table) = booted(5);
        let q = tpm.quote("aik", &SEL, &[0; 32]).unwrap();
        for e in 0..log.events.len() {
            for bit in 0..256 {
                let mut t = log.clone();
                t.events[e].digest.0[bit / 8] ^= 1 << (bit % 8);
                assert_eq!(verify_log(&t, &table, &q, &[0; 32]), Verdict::Untrusted(UntrustedReason::LogMismatch));
            }
        }
    }

    #[test]
    fn every_image_byte_tamper_is_untrusted() {
        let (tpm, log, table) = booted(6);
        let q = tpm.quote("aik", &SEL, &[0; 32]).unwrap();
        for e in 0..log.events.len() {
            for b in 0..log.events[e].component_image.len() {
                let mut t = log.clone();
                t.events[e].component_image[b] ^= 0x01;
                assert!(!verify_log(&t, &table, &q, &[0; 32]).is_trusted());
                // a consistent log of the tampered image is an unknown configuration
                t.events[e].digest = hash(&t.events[e].component_image);
                assert!(!verify_log(&t, &table, &q, &[0; 32]).is_trusted());
            }
        }
    }

    #[test]
    fn compromised_boot_is_unknown_configuration() {
        let mut tpm = owned_with_active_aik(7);
        tpm.reboot();
        let mut images = chain();
        images[2].image = b"kernel with rootkit".to_vec();
        let log = boot(&mut tpm, &images).unwrap();
        let mut table = ReferenceTable::default();
        table.push(ReferenceTable::configuration_for("good", &chain()));
        let q = tpm.quote("aik", &SEL, &[1; 32]).unwrap();
        assert_eq!(
            verify_log(&log, &table, &q, &[1; 32]),
            Verdict::Untrusted(UntrustedReason::UnknownConfiguration)
        );
    }

    #[test]
    fn reference_table_toml_round_trip() {
        let mut table = ReferenceTable::default();
        table.push(ReferenceTable::configuration_for("good", &chain()));
        let text = table.to_toml();
        assert_eq!(ReferenceTable::from_toml(&text).unwrap(), table);
        assert!(ReferenceTable::from_toml("[[configuration]]\nname='x'\n[configuration.pcrs]\n99='00'\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn self_consistency(images in prop::collection::vec((0u8..16, prop::collection::vec(any::<u8>(), 1..32)), 1..8), seed in any::<u64>()) {
            let images: Vec<BootImage> = images.into_iter().enumerate()
                .map(|(n, (i, img))| BootImage::new(i, format!("c{n}"), img)).collect();
            let mut tpm = owned_with_active_aik(seed);
            tpm.reboot();
            let log = boot(&mut tpm, &images).unwrap();
            let mut table = ReferenceTable::default();
            table.push(ReferenceTable::configuration_for("self", &images));
            let sel = log.touched();
            let nonce: Nonce = ChaCha20Rng::seed_from_u64(seed).gen();
            let q = tpm.quote("aik", &sel, &nonce).unwrap();
            prop_assert!(verify_log(&log, &table, &q, &nonce).is_trusted());
        }
    }
}
