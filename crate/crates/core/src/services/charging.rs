// Licensed under the Apache-2.0 license

//! Charging provider: deposit vouchers and consumption settlement.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::timestamp::TimestampToken;
use super::{seeded, AttestationChallenge, ChallengeBook};
use crate::boot::{BootLog, ReferenceTable, UntrustedReason, Verdict};
use crate::crypto::{self, hash, hash_parts, Ciphertext, Digest, KeyPair, KeyUsage, PublicKey, Signature};
use crate::pca::AikCredential;
use crate::tpm::{BindKeyCertificate, Nonce, Quote};
use crate::wire::{Signed, WireCodec};
use crate::{signed_by_field, wire_struct};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopUpRequest {
    pub credential: AikCredential,
    pub quote: Quote,
    pub boot_log: BootLog,
    pub bind_certificate: BindKeyCertificate,
    pub amount: u64,
    pub signature: Signature,
}
wire_struct!(TopUpRequest, TopUpRequest, {
    credential: nested, quote: nested, boot_log: nested, bind_certificate: nested, amount: u64,
    signature: signature,
});
signed_by_field!(TopUpRequest);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepositVoucher {
    pub amount: u64,
    pub nonce: Nonce,
    pub beneficiary: String,
    pub issued_at: u64,
    pub charging_id: String,
    pub signature: Signature,
}
wire_struct!(DepositVoucher, DepositVoucher, {
    amount: u64, nonce: nonce, beneficiary: string, issued_at: u64, charging_id: string,
    signature: signature,
});
signed_by_field!(DepositVoucher);

/// A [`DepositVoucher`] encrypted to the beneficiary's bind key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedVoucher {
    pub charging_id: String,
    pub ciphertext: Ciphertext,
}
wire_struct!(SealedVoucher, SealedVoucher, { charging_id: string, ciphertext: ciphertext });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumptionRecord {
    pub record_nonce: Nonce,
    pub identity_label: String,
    pub stream_id: u16,
    pub period_index: u32,
    pub units: u32,
    pub timestamp_token: Option<TimestampToken>,
    pub signature: Signature,
}
wire_struct!(ConsumptionRecord, ConsumptionRecord, {
    record_nonce: nonce, identity_label: string, stream_id: u16, period_index: u32, units: u32,
    timestamp_token: opt_nested, signature: signature,
});
signed_by_field!(ConsumptionRecord);

impl ConsumptionRecord {
    /// Digest the time authority stamps.
    pub fn subject_digest(&self) -> Digest {
        hash_parts(&[
            b"stb-consumption-v1",
            &self.record_nonce,
            self.identity_label.as_bytes(),
            &self.stream_id.to_be_bytes(),
            &self.period_index.to_be_bytes(),
            &self.units.to_be_bytes(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumptionBatch {
    /// Nonce of the pull request answered, zero for a push.
    pub request_nonce: Nonce,
    pub records: Vec<Vec<u8>>,
}
wire_struct!(ConsumptionBatch, ConsumptionBatch, { request_nonce: nonce, records: byte_list });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullRequest {
    pub charging_id: String,
    pub nonce: Nonce,
    pub signature: Signature,
}
wire_struct!(PullRequest, PullRequest, { charging_id: string, nonce: nonce, signature: signature });
signed_by_field!(PullRequest);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectCode {
    Undecryptable,
    UnknownAccount,
    BadTimestamp,
    BadSignature,
    DuplicateRecord,
}

impl RejectCode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Undecryptable => "Undecryptable",
            Self::UnknownAccount => "UnknownAccount",
            Self::BadTimestamp => "BadTimestamp",
            Self::BadSignature => "BadSignature",
            Self::DuplicateRecord => "DuplicateRecord",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordReject {
    /// Hash of the rejected ciphertext.
    pub record_digest: Digest,
    pub code: String,
}
wire_struct!(RecordReject, RecordReject, { record_digest: digest, code: string });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettlementAck {
    pub charging_id: String,
    pub request_nonce: Nonce,
    /// Hashes of ciphertexts now settled, including earlier duplicates.
    pub settled: Vec<Vec<u8>>,
    pub rejects: Vec<RecordReject>,
    pub signature: Signature,
}
wire_struct!(SettlementAck, SettlementAck, {
    charging_id: string, request_nonce: nonce, settled: byte_list, rejects: list, signature: signature,
});
signed_by_field!(SettlementAck);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChargingError {
    #[error("AIK credential does not verify")]
    BadCredential,
    #[error("no contract for this pseudonym")]
    NoContract,
    #[error("request signature does not verify")]
    BadRequestSignature,
    #[error("bind key certificate does not verify")]
    BadBindCertificate,
    #[error("attestation failed: {}", .0.code())]
    Untrusted(UntrustedReason),
}

impl ChargingError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadCredential => "BadCredential",
            Self::NoContract => "NoContract",
            Self::BadRequestSignature => "BadRequestSignature",
            Self::BadBindCertificate => "BadBindCertificate",
            Self::Untrusted(_) => "Untrusted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChargingProvider {
    id: String,
    key: KeyPair,
    decrypt: KeyPair,
    pca_pub: PublicKey,
    tsa_pub: PublicKey,
    reference: ReferenceTable,
    challenges: ChallengeBook,
    contracts: BTreeMap<String, PublicKey>,
    settled_nonces: BTreeSet<Nonce>,
    totals: BTreeMap<String, u64>,
    vouchers_issued: u64,
    voucher_units: u64,
    rng: ChaCha20Rng,
}

impl ChargingProvider {
    pub fn new<R: RngCore + CryptoRng>(
        id: impl Into<String>,
        pca_pub: PublicKey,
        tsa_pub: PublicKey,
        reference: ReferenceTable,
        rng: &mut R,
    ) -> Self {
        let mut rng = seeded(rng);
        Self {
            id: id.into(),
            key: KeyPair::generate(KeyUsage::Sign, &mut rng),
            decrypt: KeyPair::generate(KeyUsage::Decrypt, &mut rng),
            pca_pub,
            tsa_pub,
            reference,
            challenges: ChallengeBook::default(),
            contracts: BTreeMap::new(),
            settled_nonces: BTreeSet::new(),
            totals: BTreeMap::new(),
            vouchers_issued: 0,
            voucher_units: 0,
            rng,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn encryption_public(&self) -> PublicKey {
        self.decrypt.public()
    }

    pub fn set_reference(&mut self, reference: ReferenceTable) {
        self.reference = reference;
    }

    /// Contractual relation with the holder of `credential`.
    pub fn add_contract(&mut self, credential: &AikCredential) -> Result<(), ChargingError> {
        if !credential.verify_with(&self.pca_pub) {
            return Err(ChargingError::BadCredential);
        }
        self.contracts.insert(credential.identity_label.clone(), credential.aik_pub);
        Ok(())
    }

    pub fn has_contract(&self, identity_label: &str) -> bool {
        self.contracts.contains_key(identity_label)
    }

    pub fn challenge(&mut self, purpose: &str) -> AttestationChallenge {
        AttestationChallenge {
            purpose: purpose.to_string(),
            nonce: self.challenges.issue(&mut self.rng),
        }
    }

    pub fn vouchers_issued(&self) -> u64 {
        self.vouchers_issued
    }

    pub fn voucher_units(&self) -> u64 {
        self.voucher_units
    }

    pub fn top_up(&mut self, req: &TopUpRequest, now: u64) -> Result<SealedVoucher, ChargingError> {
        let cred = &req.credential;
        if !cred.verify_with(&self.pca_pub) {
            return Err(ChargingError::BadCredential);
        }
        let label = &cred.identity_label;
        if self.contracts.get(label) != Some(&cred.aik_pub) {
            return Err(ChargingError::NoContract);
        }
        if !req.verify_with(&cred.aik_pub) {
            return Err(ChargingError::BadRequestSignature);
        }
        let cert = &req.bind_certificate;
        if cert.identity_label != *label || !cert.verify_with(&cred.aik_pub) {
            return Err(ChargingError::BadBindCertificate);
        }
        match self.challenges.attest(&req.boot_log, &self.reference, &req.quote, &cred.aik_pub) {
            Verdict::Trusted { .. } => {}
            Verdict::Untrusted(r) => return Err(ChargingError::Untrusted(r)),
        }
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let mut voucher = DepositVoucher {
            amount: req.amount,
            nonce,
            beneficiary: label.clone(),
            issued_at: now,
            charging_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        voucher.sign_with(&self.key).expect("charging signing key");
        let ciphertext = crypto::encrypt_to(&cert.bind_pub, &voucher.encode(), &mut self.rng)
            .map_err(|_| ChargingError::BadBindCertificate)?;
        self.vouchers_issued += 1;
        self.voucher_units += req.amount;
        Ok(SealedVoucher {
            charging_id: self.id.clone(),
            ciphertext,
        })
    }

    pub fn pull_request(&mut self) -> PullRequest {
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let mut req = PullRequest {
            charging_id: self.id.clone(),
            nonce,
            signature: Signature::EMPTY,
        };
        req.sign_with(&self.key).expect("charging signing key");
        req
    }

    fn settle_one(&mut self, ct: &[u8]) -> Result<(String, u32, Nonce), RejectCode> {
        let plain = crypto::decrypt(&self.decrypt, &Ciphertext(ct.to_vec())).map_err(|_| RejectCode::Undecryptable)?;
        let rec = ConsumptionRecord::decode(&plain).map_err(|_| RejectCode::Undecryptable)?;
        let aik = *self.contracts.get(&rec.identity_label).ok_or(RejectCode::UnknownAccount)?;
        match &rec.timestamp_token {
            Some(t) if t.verify_for(&self.tsa_pub, &rec.subject_digest()) => {}
            _ => return Err(RejectCode::BadTimestamp),
        }
        if !rec.verify_with(&aik) {
            return Err(RejectCode::BadSignature);
        }
        if self.settled_nonces.contains(&rec.record_nonce) {
            return Err(RejectCode::DuplicateRecord);
        }
        Ok((rec.identity_label, rec.units, rec.record_nonce))
    }

    /// Settle a batch. Each record is judged on its own; duplicates of
    /// already-settled records are acknowledged but not counted.
    pub fn settle(&mut self, batch: &ConsumptionBatch) -> SettlementAck {
        let mut settled = Vec::new();
        let mut rejects = Vec::new();
        for ct in &batch.records {
            let digest = hash(ct);
            match self.settle_one(ct) {
                Ok((label, units, nonce)) => {
                    self.settled_nonces.insert(nonce);
                    *self.totals.entry(label).or_insert(0) += units as u64;
                    settled.push(digest.0.to_vec());
                }
                Err(code) => {
                    if code == RejectCode::DuplicateRecord {
                        settled.push(digest.0.to_vec());
                    }
                    rejects.push(RecordReject {
                        record_digest: digest,
                        code: code.name().to_string(),
                    });
                }
            }
        }
        let mut ack = SettlementAck {
            charging_id: self.id.clone(),
            request_nonce: batch.request_nonce,
            settled,
            rejects,
            signature: Signature::EMPTY,
        };
        ack.sign_with(&self.key).expect("charging signing key");
        ack
    }

    /// Units invoiced to one pseudonym.
    pub fn invoice(&self, identity_label: &str) -> u64 {
        self.totals.get(identity_label).copied().unwrap_or(0)
    }

    pub fn invoices(&self) -> &BTreeMap<String, u64> {
        &self.totals
    }
}
