// Licensed under the Apache-2.0 license

//! Attackers acting on the delivery queue. None of them reads party state.

use stb_core::boot::BootLog;
use stb_core::services::charging::TopUpRequest;
use stb_core::services::vendor::{KeyRequest, RegistrationRequest};
use stb_core::wire::{MsgType, WireCodec};

use crate::actors::FakeVariant;
use crate::network::Envelope;
use crate::scenario::{AdversaryConfig, ConfigError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Adversary {
    /// Deliver each matching message `copies` more times.
    Replay { messages: Vec<MsgType>, copies: u32 },
    /// Flip one bit of a logged image in matching messages.
    TamperLog { messages: Vec<MsgType>, event: usize },
    /// Substitute an endpoint with one lacking a genuine EK.
    FakeTpm {
        target: String,
        variant: FakeVariant,
        victim: Option<String>,
    },
    /// Copy every delivered message to the analysis log.
    Eavesdrop,
    /// Corrupt the last byte of matching messages leaving a relay.
    RelayTamper { relay: Option<String>, messages: Vec<MsgType> },
}

fn types(names: &Option<Vec<String>>, default: &[MsgType]) -> Result<Vec<MsgType>, ConfigError> {
    match names {
        None => Ok(default.to_vec()),
        Some(v) => v
            .iter()
            .map(|n| MsgType::from_name(n).ok_or_else(|| ConfigError::Invalid(format!("message type {n}"))))
            .collect(),
    }
}

impl Adversary {
    pub fn from_config(c: &AdversaryConfig) -> Result<Self, ConfigError> {
        Ok(match c {
            AdversaryConfig::Replay { messages, copies } => Adversary::Replay {
                messages: types(messages, &[MsgType::SealedVoucher, MsgType::SealedUpdate])?,
                copies: *copies,
            },
            AdversaryConfig::TamperLog { messages, event } => Adversary::TamperLog {
                messages: types(messages, &[MsgType::RegistrationRequest])?,
                event: *event,
            },
            AdversaryConfig::FakeTpm { target, variant, victim } => Adversary::FakeTpm {
                target: target.clone(),
                variant: FakeVariant::parse(variant)
                    .ok_or_else(|| ConfigError::Invalid(format!("fake-tpm variant {variant}")))?,
                victim: victim.clone(),
            },
            AdversaryConfig::Eavesdrop {} => Adversary::Eavesdrop,
            AdversaryConfig::RelayTamper { relay, messages } => Adversary::RelayTamper {
                relay: relay.clone(),
                messages: types(messages, &[MsgType::ChallengeResponse])?,
            },
        })
    }

    /// Adversary selected on the command line, with default targets.
    pub fn from_kind(kind: &str, default_box: Option<&str>) -> Result<Self, ConfigError> {
        let cfg = match kind {
            "replay" => AdversaryConfig::Replay {
                messages: None,
                copies: 1,
            },
            "tamper-log" => AdversaryConfig::TamperLog {
                messages: None,
                event: 0,
            },
            "fake-tpm" => AdversaryConfig::FakeTpm {
                target: default_box
                    .ok_or_else(|| ConfigError::Invalid("fake-tpm needs a box endpoint".into()))?
                    .to_string(),
                variant: "rogue-ek".into(),
                victim: None,
            },
            "eavesdrop" => AdversaryConfig::Eavesdrop {},
            "relay-tamper" => AdversaryConfig::RelayTamper {
                relay: None,
                messages: None,
            },
            other => return Err(ConfigError::Invalid(format!("adversary kind {other}"))),
        };
        Self::from_config(&cfg)
    }

    /// Act on a message about to be delivered. Returns extra messages to
    /// enqueue after it.
    pub fn intercept(&self, env: &mut Envelope) -> Vec<Envelope> {
        let Some(t) = env.msg_type() else {
            return Vec::new();
        };
        match self {
            Adversary::Replay { messages, copies } if messages.contains(&t) && !env.injected => (0..*copies)
                .map(|_| Envelope {
                    injected: true,
                    ..env.clone()
                })
                .collect(),
            Adversary::TamperLog { messages, event } if messages.contains(&t) => {
                if let Some(bytes) = tamper_log_in(&env.bytes, t, *event) {
                    env.bytes = bytes;
                }
                Vec::new()
            }
            Adversary::RelayTamper { relay, messages } if messages.contains(&t) => {
                let from_relay = match relay {
                    Some(r) => env.sender == *r,
                    None => env.sender.starts_with("relay"),
                };
                if from_relay {
                    if let Some(b) = env.bytes.last_mut() {
                        *b ^= 0x01;
                    }
                }
                Vec::new()
            }
            _ => Vec::new(),
        }
    }
}

/// Flip the low bit of the first byte of one logged image.
pub fn flip_image_bit(log: &mut BootLog, event: usize) -> bool {
    match log.events.get_mut(event).and_then(|e| e.component_image.first_mut()) {
        Some(b) => {
            *b ^= 0x01;
            true
        }
        None => false,
    }
}

fn tamper_log_in(bytes: &[u8], t: MsgType, event: usize) -> Option<Vec<u8>> {
    match t {
        MsgType::RegistrationRequest => {
            let mut m = RegistrationRequest::decode(bytes).ok()?;
            flip_image_bit(&mut m.boot_log, event).then(|| m.encode())
        }
        MsgType::KeyRequest => {
            let mut m = KeyRequest::decode(bytes).ok()?;
            flip_image_bit(&mut m.boot_log, event).then(|| m.encode())
        }
        MsgType::TopUpRequest => {
            let mut m = TopUpRequest::decode(bytes).ok()?;
            flip_image_bit(&mut m.boot_log, event).then(|| m.encode())
        }
        _ => None,
    }
}
