// Licensed under the Apache-2.0 license

//! Head-end parties: service provider, charging provider, update service
//! and time authority.

use std::collections::BTreeSet;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;

use crate::boot::{verify_attestation, BootLog, ReferenceTable, UntrustedReason, Verdict};
use crate::crypto::PublicKey;
use crate::tpm::{Nonce, Quote};
use crate::wire_struct;

pub mod charging;
pub mod timestamp;
pub mod update;
pub mod vendor;

pub use charging::{ChargingError, ChargingProvider};
pub use timestamp::{TimeAuthority, TimestampRequest, TimestampToken};
pub use update::{UpdateError, UpdateService};
pub use vendor::{ProviderError, ServiceProvider};

/// Rejection sent back over the network in place of the expected answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub code: String,
    pub in_reply_to: u8,
    pub detail: String,
}
wire_struct!(ProtocolError, ProtocolError, { code: string, in_reply_to: u8, detail: string });

/// Request for a fresh attestation nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationHello {
    pub identity_label: String,
    pub purpose: String,
}
wire_struct!(AttestationHello, AttestationHello, { identity_label: string, purpose: string });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationChallenge {
    pub purpose: String,
    pub nonce: Nonce,
}
wire_struct!(AttestationChallenge, AttestationChallenge, { purpose: string, nonce: nonce });

/// Outstanding single-use attestation nonces of one verifier.
#[derive(Debug, Clone, Default)]
pub struct ChallengeBook {
    open: BTreeSet<Nonce>,
}

impl ChallengeBook {
    pub fn issue(&mut self, rng: &mut ChaCha20Rng) -> Nonce {
        let mut n = [0u8; 32];
        rng.fill_bytes(&mut n);
        self.open.insert(n);
        n
    }

    /// Verify a quote against an outstanding nonce, consuming it.
    pub fn attest(
        &mut self,
        log: &BootLog,
        reference: &ReferenceTable,
        quote: &Quote,
        aik_pub: &PublicKey,
    ) -> Verdict {
        if !self.open.remove(&quote.external_nonce) {
            return Verdict::Untrusted(UntrustedReason::NonceMismatch);
        }
        verify_attestation(log, reference, quote, aik_pub, &quote.external_nonce)
    }

    pub fn outstanding(&self) -> usize {
        self.open.len()
    }
}

fn seeded(rng: &mut impl RngCore) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    ChaCha20Rng::from_seed(seed)
}
