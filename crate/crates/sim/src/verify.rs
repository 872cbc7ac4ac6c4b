// Licensed under the Apache-2.0 license

//! Offline re-check of a transcript and its sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use stb_core::crypto::{hash, Digest};
use stb_core::pca::{ActivationBlob, ChallengeResponse, EnrollChallenge};
use stb_core::services::charging::{ConsumptionBatch, SettlementAck};
use stb_core::services::ProtocolError;
use stb_core::wire::{MsgType, WireCodec};

use crate::network::{parse_transcript, Delivery, TranscriptError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranscriptSummary {
    pub deliveries: usize,
    pub by_type: BTreeMap<String, usize>,
    pub errors: BTreeMap<String, usize>,
    pub credentials_issued: usize,
    pub violations: Vec<String>,
}

impl TranscriptSummary {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "deliveries {}", self.deliveries);
        for (t, n) in &self.by_type {
            let _ = writeln!(s, "type {t} {n}");
        }
        for (c, n) in &self.errors {
            let _ = writeln!(s, "error {c} {n}");
        }
        let _ = writeln!(s, "credentials issued {}", self.credentials_issued);
        for v in &self.violations {
            let _ = writeln!(s, "VIOLATION {v}");
        }
        let _ = writeln!(s, "{}", if self.is_clean() { "OK" } else { "INVALID" });
        s
    }
}

pub fn verify_transcript(text: &str, sidecar: &[u8]) -> Result<TranscriptSummary, TranscriptError> {
    Ok(check(&parse_transcript(text, sidecar)?))
}

/// Protocol invariants visible from the wire alone.
pub fn check(deliveries: &[Delivery]) -> TranscriptSummary {
    let mut s = TranscriptSummary {
        deliveries: deliveries.len(),
        ..Default::default()
    };
    // sessions challenged by a PCA, keyed by (pca, session)
    let mut challenged: BTreeSet<(String, Digest)> = BTreeSet::new();
    let mut answered: BTreeSet<(String, Digest)> = BTreeSet::new();
    let mut records_at: BTreeMap<String, BTreeSet<Vec<u8>>> = BTreeMap::new();

    for d in deliveries {
        *s.by_type.entry(d.msg_type.clone()).or_default() += 1;
        let t = MsgType::from_name(&d.msg_type);
        let at = |what: &str| format!("seq {}: {what}", d.seq);
        match t {
            Some(MsgType::EnrollChallenge) => {
                if let Ok(c) = EnrollChallenge::decode(&d.bytes) {
                    challenged.insert((d.sender.clone(), c.session));
                }
            }
            Some(MsgType::ChallengeResponse) => {
                if let Ok(r) = ChallengeResponse::decode(&d.bytes) {
                    answered.insert((d.receiver.clone(), r.session));
                }
            }
            Some(MsgType::ActivationBlob) => {
                s.credentials_issued += 1;
                match ActivationBlob::decode(&d.bytes) {
                    Ok(b) => {
                        let key = (d.sender.clone(), b.session);
                        if !challenged.contains(&key) || !answered.contains(&key) {
                            s.violations.push(at("activation without a completed challenge"));
                        }
                    }
                    Err(_) => s.violations.push(at("undecodable ActivationBlob")),
                }
            }
            Some(MsgType::ConsumptionBatch) => {
                if let Ok(b) = ConsumptionBatch::decode(&d.bytes) {
                    let seen = records_at.entry(d.receiver.clone()).or_default();
                    for r in b.records {
                        seen.insert(hash(&r).0.to_vec());
                    }
                }
            }
            Some(MsgType::SettlementAck) => {
                if let Ok(a) = SettlementAck::decode(&d.bytes) {
                    let seen = records_at.get(&d.sender);
                    if a.settled.iter().any(|r| !seen.is_some_and(|s| s.contains(r))) {
                        s.violations.push(at("settlement of a record never delivered"));
                    }
                }
            }
            Some(MsgType::ConsumptionRecord) => s.violations.push(at("plaintext consumption record on the wire")),
            Some(MsgType::ProtocolError) => {
                if let Ok(e) = ProtocolError::decode(&d.bytes) {
                    *s.errors.entry(e.code).or_default() += 1;
                }
            }
            _ => {}
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Envelope, SimNetwork};
    use stb_core::crypto::{Ciphertext, Signature};

    #[test]
    fn activation_needs_a_challenge() {
        let mut net = SimNetwork::new(0, None);
        let session = Digest([3; 32]);
        let blob = ActivationBlob {
            session,
            blob: Ciphertext(vec![1, 2, 3]),
        };
        net.record(&Envelope::new("pca", "box", blob.encode()));
        let s = check(net.transcript());
        assert_eq!(s.credentials_issued, 1);
        assert_eq!(s.violations.len(), 1);

        let mut net = SimNetwork::new(0, None);
        let ch = EnrollChallenge {
            session,
            challenge: Ciphertext(vec![9]),
        };
        net.record(&Envelope::new("pca", "box", ch.encode()));
        let resp = ChallengeResponse {
            session,
            signature: Signature::EMPTY,
        };
        net.record(&Envelope::new("box", "pca", resp.encode()));
        net.record(&Envelope::new("pca", "box", blob.encode()));
        assert!(check(net.transcript()).is_clean());
    }

    #[test]
    fn errors_are_counted_by_code() {
        let mut net = SimNetwork::new(0, None);
        for _ in 0..2 {
            let e = ProtocolError {
                code: "ReplayDetected".into(),
                in_reply_to: MsgType::SealedVoucher as u8,
                detail: String::new(),
            };
            net.record(&Envelope::new("box", "charging", e.encode()));
        }
        let s = verify_transcript(&net.transcript_text(), &net.sidecar()).unwrap();
        assert_eq!(s.errors["ReplayDetected"], 2);
        assert!(s.to_text().ends_with("OK\n"));
    }
}
