// Licensed under the Apache-2.0 license

use rand::{CryptoRng, RngCore};

use crate::crypto::{Digest, KeyPair, KeyUsage, PublicKey, Signature};
use crate::wire::Signed;
use crate::{signed_by_field, wire_struct};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampRequest {
    pub subject_digest: Digest,
}
wire_struct!(TimestampRequest, TimestampRequest, { subject_digest: digest });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampToken {
    pub time: u64,
    pub subject_digest: Digest,
    pub authority_id: String,
    pub signature: Signature,
}
wire_struct!(TimestampToken, TimestampToken, {
    time: u64, subject_digest: digest, authority_id: string, signature: signature,
});
signed_by_field!(TimestampToken);

impl TimestampToken {
    pub fn verify_for(&self, authority: &PublicKey, subject: &Digest) -> bool {
        self.subject_digest == *subject && self.verify_with(authority)
    }
}

/// Online time-stamping service with a monotonic clock.
#[derive(Debug, Clone)]
pub struct TimeAuthority {
    id: String,
    key: KeyPair,
    last: u64,
}

impl TimeAuthority {
    pub fn new<R: RngCore + CryptoRng>(id: impl Into<String>, rng: &mut R) -> Self {
        Self {
            id: id.into(),
            key: KeyPair::generate(KeyUsage::Sign, rng),
            last: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn timestamp(&mut self, subject_digest: Digest, now: u64) -> TimestampToken {
        self.last = self.last.max(now);
        let mut t = TimestampToken {
            time: self.last,
            subject_digest,
            authority_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        t.sign_with(&self.key).expect("authority signing key");
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn tokens_bind_subject_and_are_monotonic() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut tsa = TimeAuthority::new("tsa", &mut rng);
        let d = hash(b"record");
        let t1 = tsa.timestamp(d, 100);
        assert!(t1.verify_for(&tsa.public(), &d));
        assert!(!t1.verify_for(&tsa.public(), &hash(b"other")));
        let t2 = tsa.timestamp(d, 50);
        assert!(t2.time >= t1.time);
        let other = TimeAuthority::new("tsa", &mut rng);
        assert!(!t1.verify_for(&other.public(), &d));
    }
}
