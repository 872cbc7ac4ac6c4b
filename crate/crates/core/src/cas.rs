// Licensed under the Apache-2.0 license

//! Virtualized conditional-access module.
//!
//! Entitlement secrets arrive encrypted to the box's certified bind key,
//! are immediately sealed to the current PCR state and are only unsealed
//! for the duration of one control-word request.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{Ciphertext, PublicKey, Signature};
use crate::scrambler::{derive_cw, ControlWord, EntitlementSecret};
use crate::tpm::{Nonce, SealedBlob, TpmError, TpmState};
use crate::wire::{FieldReader, FieldWriter, MsgType, Signed, WireCodec, WireError};
use crate::{signed_by_field, wire_struct};

pub const SECONDS_PER_DAY: u64 = 86_400;
pub const SECONDS_PER_HOUR: u64 = 3_600;

/// UTC day number of a simulated timestamp.
pub fn day_of(now: u64) -> u64 {
    now / SECONDS_PER_DAY
}

pub fn hour_of(now: u64) -> u8 {
    ((now % SECONDS_PER_DAY) / SECONDS_PER_HOUR) as u8
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CasError {
    #[error("entitlement names CAS {found}, this instance is {expected}")]
    WrongCas { expected: String, found: String },
    #[error("entitlement issuer signature does not verify")]
    BadIssuerSignature,
    #[error("entitlement secret is not for this device")]
    NotForThisDevice,
    #[error("malformed usage constraints")]
    MalformedConstraints,
    #[error("sealing failed: {0}")]
    SealFailure(TpmError),
    #[error("no entitlement for stream {0}")]
    NoEntitlement(u16),
    #[error("entitlement expired or not yet valid")]
    Expired,
    #[error("outside allowed hours")]
    OutsideAllowedHours,
    #[error("daily cap exceeded")]
    DailyCapExceeded,
    #[error("online permit required")]
    PermitRequired,
    #[error("sealed secret unavailable: {0}")]
    Unseal(TpmError),
}

impl CasError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::WrongCas { .. } => "WrongCas",
            Self::BadIssuerSignature => "BadIssuerSignature",
            Self::NotForThisDevice => "NotForThisDevice",
            Self::MalformedConstraints => "MalformedConstraints",
            Self::SealFailure(_) => "SealFailure",
            Self::NoEntitlement(_) => "NoEntitlement",
            Self::Expired => "Expired",
            Self::OutsideAllowedHours => "OutsideAllowedHours",
            Self::DailyCapExceeded => "DailyCapExceeded",
            Self::PermitRequired => "PermitRequired",
            Self::Unseal(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsageConstraints {
    pub valid_from: u64,
    pub valid_until: u64,
    /// Maximum crypto periods per UTC day.
    pub daily_max: Option<u32>,
    /// Bit `h` set allows hour `h` (0..24).
    pub allowed_hours: Option<u32>,
}

const HOURS_MASK: u32 = (1 << 24) - 1;

impl UsageConstraints {
    pub fn window(valid_from: u64, valid_until: u64) -> Self {
        Self {
            valid_from,
            valid_until,
            daily_max: None,
            allowed_hours: None,
        }
    }

    pub fn hours_mask(hours: impl IntoIterator<Item = u8>) -> u32 {
        hours.into_iter().filter(|h| *h < 24).fold(0, |m, h| m | (1 << h))
    }

    pub fn validate(&self) -> Result<(), CasError> {
        let hours_ok = match self.allowed_hours {
            Some(m) => m != 0 && m & !HOURS_MASK == 0,
            None => true,
        };
        if self.valid_from >= self.valid_until || self.daily_max == Some(0) || !hours_ok {
            return Err(CasError::MalformedConstraints);
        }
        Ok(())
    }

    pub fn in_window(&self, now: u64) -> bool {
        self.valid_from <= now && now < self.valid_until
    }

    pub fn hour_allowed(&self, now: u64) -> bool {
        self.allowed_hours.is_none_or(|m| m & (1 << hour_of(now)) != 0)
    }
}

impl WireCodec for UsageConstraints {
    const MSG_TYPE: MsgType = MsgType::UsageConstraints;
    fn write_fields(&self, w: &mut FieldWriter) {
        w.u64(self.valid_from)
            .u64(self.valid_until)
            .u32(self.daily_max.unwrap_or(0))
            .u32(self.allowed_hours.unwrap_or(0));
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        let nonzero = |v: u32| (v != 0).then_some(v);
        Ok(Self {
            valid_from: r.u64()?,
            valid_until: r.u64()?,
            daily_max: nonzero(r.u32()?),
            allowed_hours: nonzero(r.u32()?),
        })
    }
}

/// Provider-signed entitlement as transmitted; the secret is encrypted to
/// the beneficiary's certified bind key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitlementGrant {
    pub cas_id: String,
    pub stream_id: u16,
    pub identity_label: String,
    pub wrapped_secret: Ciphertext,
    pub constraints: UsageConstraints,
    pub online_gated: bool,
    pub issued_at: u64,
    pub issuer_id: String,
    pub signature: Signature,
}
wire_struct!(EntitlementGrant, EntitlementGrant, {
    cas_id: string, stream_id: u16, identity_label: string, wrapped_secret: ciphertext,
    constraints: nested, online_gated: bool, issued_at: u64, issuer_id: string, signature: signature,
});
signed_by_field!(EntitlementGrant);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermitRequest {
    pub identity_label: String,
    pub cas_id: String,
    pub stream_id: u16,
    pub period_from: u32,
    pub period_until: u32,
    pub nonce: Nonce,
    pub signature: Signature,
}
wire_struct!(PermitRequest, PermitRequest, {
    identity_label: string, cas_id: string, stream_id: u16, period_from: u32, period_until: u32,
    nonce: nonce, signature: signature,
});
signed_by_field!(PermitRequest);

/// Provider-signed permission covering an inclusive crypto-period range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnlinePermit {
    pub identity_label: String,
    pub cas_id: String,
    pub stream_id: u16,
    pub period_from: u32,
    pub period_until: u32,
    pub nonce: Nonce,
    pub issued_at: u64,
    pub signature: Signature,
}
wire_struct!(OnlinePermit, OnlinePermit, {
    identity_label: string, cas_id: string, stream_id: u16, period_from: u32, period_until: u32,
    nonce: nonce, issued_at: u64, signature: signature,
});
signed_by_field!(OnlinePermit);

impl OnlinePermit {
    pub fn covers(&self, period_index: u32) -> bool {
        self.period_from <= period_index && period_index <= self.period_until
    }
}

/// Installed entitlement: metadata plus the sealed secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitlementCredential {
    pub cas_id: String,
    pub stream_id: u16,
    pub identity_label: String,
    pub constraints: UsageConstraints,
    pub online_gated: bool,
    pub issuer_signature: Signature,
    pub sealed_secret: SealedBlob,
}

#[derive(Debug, Clone)]
pub struct CasInstance {
    cas_id: String,
    issuer: PublicKey,
    entitlements: BTreeMap<u16, EntitlementCredential>,
    usage: BTreeMap<(u16, u64), u32>,
    released: u64,
}

impl CasInstance {
    pub fn new(cas_id: impl Into<String>, issuer: PublicKey) -> Self {
        Self {
            cas_id: cas_id.into(),
            issuer,
            entitlements: BTreeMap::new(),
            usage: BTreeMap::new(),
            released: 0,
        }
    }

    pub fn cas_id(&self) -> &str {
        &self.cas_id
    }

    pub fn issuer(&self) -> &PublicKey {
        &self.issuer
    }

    pub fn entitlements(&self) -> impl Iterator<Item = &EntitlementCredential> {
        self.entitlements.values()
    }

    pub fn entitlement(&self, stream_id: u16) -> Option<&EntitlementCredential> {
        self.entitlements.get(&stream_id)
    }

    /// Successful control-word releases for `stream_id` on UTC day `day`.
    pub fn usage(&self, stream_id: u16, day: u64) -> u32 {
        self.usage.get(&(stream_id, day)).copied().unwrap_or(0)
    }

    pub fn total_released(&self) -> u64 {
        self.released
    }

    /// Verify, unwrap with the bind key, and seal the secret to the current
    /// values of `seal_selection`.
    pub fn install_entitlement(
        &mut self,
        tpm: &mut TpmState,
        owner_auth: &[u8],
        bind_label: &str,
        grant: &EntitlementGrant,
        seal_selection: &[u8],
    ) -> Result<(), CasError> {
        if grant.cas_id != self.cas_id {
            return Err(CasError::WrongCas {
                expected: self.cas_id.clone(),
                found: grant.cas_id.clone(),
            });
        }
        if !grant.verify_with(&self.issuer) {
            return Err(CasError::BadIssuerSignature);
        }
        grant.constraints.validate()?;
        let secret = tpm
            .unbind(owner_auth, bind_label, &grant.wrapped_secret)
            .map_err(|_| CasError::NotForThisDevice)?;
        if EntitlementSecret::from_slice(&secret).is_none() {
            return Err(CasError::NotForThisDevice);
        }
        let sealed_secret = tpm.seal_current(&secret, seal_selection).map_err(CasError::SealFailure)?;
        self.entitlements.insert(
            grant.stream_id,
            EntitlementCredential {
                cas_id: grant.cas_id.clone(),
                stream_id: grant.stream_id,
                identity_label: grant.identity_label.clone(),
                constraints: grant.constraints,
                online_gated: grant.online_gated,
                issuer_signature: grant.signature,
                sealed_secret,
            },
        );
        Ok(())
    }

    pub fn request_cw(
        &mut self,
        tpm: &TpmState,
        stream_id: u16,
        period_index: u32,
        now: u64,
        permit: Option<&OnlinePermit>,
    ) -> Result<ControlWord, CasError> {
        let ent = self.entitlements.get(&stream_id).ok_or(CasError::NoEntitlement(stream_id))?;
        let plain = tpm.unseal(&ent.sealed_secret).map_err(CasError::Unseal)?;
        let secret = EntitlementSecret::from_slice(&plain).ok_or(CasError::Unseal(TpmError::CorruptBlob))?;
        drop(plain);
        let c = &ent.constraints;
        if !c.in_window(now) {
            return Err(CasError::Expired);
        }
        if !c.hour_allowed(now) {
            return Err(CasError::OutsideAllowedHours);
        }
        let day = day_of(now);
        let used = self.usage(stream_id, day);
        if c.daily_max.is_some_and(|max| used >= max) {
            return Err(CasError::DailyCapExceeded);
        }
        if ent.online_gated {
            let ok = permit.is_some_and(|p| {
                p.verify_with(&self.issuer)
                    && p.cas_id == self.cas_id
                    && p.stream_id == stream_id
                    && p.identity_label == ent.identity_label
                    && p.covers(period_index)
            });
            if !ok {
                return Err(CasError::PermitRequired);
            }
        }
        let cw = derive_cw(&secret, stream_id, period_index);
        *self.usage.entry((stream_id, day)).or_insert(0) += 1;
        self.released += 1;
        Ok(cw)
    }
}
