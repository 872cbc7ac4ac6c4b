// Licensed under the Apache-2.0 license

//! Deterministic single-queue message network and its transcript.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use stb_core::crypto::{hash, Digest};
use stb_core::scrambler::TransportPacket;
use stb_core::wire::{MsgType, WireMessage};

/// A message in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender: String,
    pub receiver: String,
    pub bytes: Vec<u8>,
    /// Set on copies created by an adversary so they are not copied again.
    pub injected: bool,
}

impl Envelope {
    pub fn new(sender: impl Into<String>, receiver: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            sender: sender.into(),
            receiver: receiver.into(),
            bytes,
            injected: false,
        }
    }

    pub fn msg_type(&self) -> Option<MsgType> {
        self.bytes.first().and_then(|&b| MsgType::try_from(b).ok())
    }
}

/// One delivered message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u64,
    pub sender: String,
    pub receiver: String,
    pub msg_type: String,
    pub digest: Digest,
    pub bytes: Vec<u8>,
}

impl Delivery {
    pub fn line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.seq,
            self.sender,
            self.receiver,
            self.msg_type,
            self.digest.to_hex()
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("sidecar truncated at record {0}")]
    SidecarTruncated(usize),
    #[error("transcript has {lines} lines but sidecar has {records} records")]
    CountMismatch { lines: usize, records: usize },
}

/// Scrambled packets on the air for one stream, plus the head-end copy.
#[derive(Debug, Clone, Default)]
pub struct Broadcast {
    pub provider: String,
    pub air: Vec<TransportPacket>,
    pub clear: Vec<TransportPacket>,
}

#[derive(Debug, Clone)]
pub struct SimNetwork {
    clock: u64,
    queue: VecDeque<Envelope>,
    shuffle: Option<ChaCha20Rng>,
    transcript: Vec<Delivery>,
    broadcast: BTreeMap<u16, Broadcast>,
}

impl SimNetwork {
    pub fn new(start_time: u64, shuffle: Option<ChaCha20Rng>) -> Self {
        Self {
            clock: start_time,
            queue: VecDeque::new(),
            shuffle,
            transcript: Vec::new(),
            broadcast: BTreeMap::new(),
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn advance_clock(&mut self, delta: u64) {
        self.clock += delta;
    }

    pub fn send(&mut self, env: Envelope) {
        self.queue.push_back(env);
    }

    pub fn is_quiet(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Next message to deliver: FIFO, or a seeded pick when shuffling.
    pub fn pop(&mut self) -> Option<Envelope> {
        match &mut self.shuffle {
            Some(rng) if self.queue.len() > 1 => {
                let i = rng.gen_range(0..self.queue.len());
                self.queue.remove(i)
            }
            _ => self.queue.pop_front(),
        }
    }

    pub fn record(&mut self, env: &Envelope) -> &Delivery {
        let msg_type = env.msg_type().map_or("Unknown", MsgType::name).to_string();
        self.transcript.push(Delivery {
            seq: self.transcript.len() as u64 + 1,
            sender: env.sender.clone(),
            receiver: env.receiver.clone(),
            msg_type,
            digest: hash(&env.bytes),
            bytes: env.bytes.clone(),
        });
        self.transcript.last().expect("just pushed")
    }

    pub fn transcript(&self) -> &[Delivery] {
        &self.transcript
    }

    pub fn put_broadcast(&mut self, stream_id: u16, b: Broadcast) {
        self.broadcast.insert(stream_id, b);
    }

    pub fn broadcast(&self, stream_id: u16) -> Option<&Broadcast> {
        self.broadcast.get(&stream_id)
    }

    pub fn transcript_text(&self) -> String {
        transcript_text(&self.transcript)
    }

    pub fn sidecar(&self) -> Vec<u8> {
        sidecar(&self.transcript)
    }
}

pub fn transcript_text(deliveries: &[Delivery]) -> String {
    let mut s = String::new();
    for d in deliveries {
        let _ = writeln!(s, "{}", d.line());
    }
    s
}

/// Full payloads: `len:u32be message` per delivery, in order.
pub fn sidecar(deliveries: &[Delivery]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in deliveries {
        out.extend_from_slice(&(d.bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&d.bytes);
    }
    out
}

/// Parse a transcript and its sidecar back into deliveries, checking that
/// each line matches the payload it describes.
pub fn parse_transcript(text: &str, sidecar: &[u8]) -> Result<Vec<Delivery>, TranscriptError> {
    let mut payloads = Vec::new();
    let mut rest = sidecar;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(TranscriptError::SidecarTruncated(payloads.len()));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() < 4 + len {
            return Err(TranscriptError::SidecarTruncated(payloads.len()));
        }
        payloads.push(rest[4..4 + len].to_vec());
        rest = &rest[4 + len..];
    }
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != payloads.len() {
        return Err(TranscriptError::CountMismatch {
            lines: lines.len(),
            records: payloads.len(),
        });
    }
    let mut out = Vec::with_capacity(lines.len());
    for (i, (line, bytes)) in lines.iter().zip(payloads).enumerate() {
        let bad = |reason: &str| TranscriptError::BadLine {
            line: i + 1,
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [seq, sender, receiver, msg_type, digest] = parts[..] else {
            return Err(bad("expected 5 fields"));
        };
        let seq: u64 = seq.parse().map_err(|_| bad("sequence is not a number"))?;
        if seq != i as u64 + 1 {
            return Err(bad("sequence numbers are not contiguous"));
        }
        let digest = Digest::from_hex(digest).ok_or_else(|| bad("digest is not 64 hex digits"))?;
        if digest != hash(&bytes) {
            return Err(bad("digest does not match sidecar payload"));
        }
        let wire = WireMessage::decode(&bytes).map_err(|e| bad(&e.to_string()))?;
        if wire.msg_type.name() != msg_type {
            return Err(bad("msg_type does not match sidecar payload"));
        }
        out.push(Delivery {
            seq,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            msg_type: msg_type.to_string(),
            digest,
            bytes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use stb_core::services::timestamp::TimestampRequest;
    use stb_core::wire::WireCodec;

    fn msg(i: u8) -> Vec<u8> {
        TimestampRequest {
            subject_digest: Digest([i; 32]),
        }
        .encode()
    }

    #[test]
    fn fifo_without_shuffle() {
        let mut net = SimNetwork::new(0, None);
        for i in 0..5 {
            net.send(Envelope::new("a", "b", msg(i)));
        }
        let order: Vec<u8> = std::iter::from_fn(|| net.pop()).map(|e| e.bytes[5]).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let run = |seed| {
            let mut net = SimNetwork::new(0, Some(ChaCha20Rng::seed_from_u64(seed)));
            for i in 0..16 {
                net.send(Envelope::new("a", "b", msg(i)));
            }
            std::iter::from_fn(|| net.pop()).map(|e| e.bytes[5]).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), (0..16).collect::<Vec<u8>>());
    }

    #[test]
    fn transcript_round_trip() {
        let mut net = SimNetwork::new(0, None);
        for i in 0..3 {
            let e = Envelope::new("box-1", "tsa", msg(i));
            net.record(&e);
        }
        let text = net.transcript_text();
        assert!(text.starts_with("1 box-1 tsa TimestampRequest "));
        let back = parse_transcript(&text, &net.sidecar()).unwrap();
        assert_eq!(back, net.transcript());
    }

    #[test]
    fn transcript_detects_edits() {
        let mut net = SimNetwork::new(0, None);
        net.record(&Envelope::new("a", "b", msg(1)));
        let mut side = net.sidecar();
        let last = side.len() - 1;
        side[last] ^= 1;
        assert!(matches!(
            parse_transcript(&net.transcript_text(), &side),
            Err(TranscriptError::BadLine { .. })
        ));
        let text = net.transcript_text().replace("TimestampRequest", "TimestampToken");
        assert!(parse_transcript(&text, &net.sidecar()).is_err());
        assert!(matches!(
            parse_transcript("", &net.sidecar()),
            Err(TranscriptError::CountMismatch { .. })
        ));
    }

    #[test]
    fn clock_is_monotonic() {
        let mut net = SimNetwork::new(100, None);
        net.advance_clock(0);
        assert_eq!(net.clock(), 100);
        net.advance_clock(50);
        assert_eq!(net.clock(), 150);
    }
}
