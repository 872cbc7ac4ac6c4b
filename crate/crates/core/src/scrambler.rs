// Licensed under the Apache-2.0 license

//! Transport packets, control words and the payload cipher.

use std::fmt;

use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::crypto::{hash, hash_parts, DIGEST_LEN};
use crate::wire::{FieldReader, FieldWriter, MsgType, WireCodec, WireError};

pub const PAYLOAD_LEN: usize = 184;
pub const CW_LEN: usize = 8;
pub const CW_ENTROPY_LEN: usize = 6;
pub const SECRET_LEN: usize = 16;
pub const DEFAULT_PERIOD_PACKETS: u32 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScramblerError {
    #[error("packet scrambled flag is {0}, operation needs the opposite")]
    FlagStateError(bool),
    #[error("control word checksum mismatch")]
    BadChecksum,
    #[error("payload must be {PAYLOAD_LEN} bytes, got {0}")]
    PayloadLength(usize),
    #[error("stream file truncated")]
    TruncatedStream,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Eight-byte control word; bytes 3 and 7 are checksums.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct ControlWord([u8; CW_LEN]);

impl fmt::Debug for ControlWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ControlWord(..)")
    }
}

fn checksum(b: &[u8]) -> u8 {
    b.iter().fold(0u8, |acc, x| acc.wrapping_add(*x))
}

impl ControlWord {
    pub fn new(entropy: [u8; CW_ENTROPY_LEN]) -> Self {
        let e = entropy;
        Self([e[0], e[1], e[2], checksum(&e[..3]), e[3], e[4], e[5], checksum(&e[3..])])
    }

    pub fn from_bytes(bytes: [u8; CW_LEN]) -> Result<Self, ScramblerError> {
        let cw = Self(bytes);
        if cw.checksums_valid() {
            Ok(cw)
        } else {
            Err(ScramblerError::BadChecksum)
        }
    }

    pub fn checksums_valid(&self) -> bool {
        let b = &self.0;
        b[3] == checksum(&b[..3]) && b[7] == checksum(&b[4..7])
    }

    pub fn as_bytes(&self) -> &[u8; CW_LEN] {
        &self.0
    }

    pub fn entropy(&self) -> [u8; CW_ENTROPY_LEN] {
        let b = &self.0;
        [b[0], b[1], b[2], b[4], b[5], b[6]]
    }
}

/// 16-byte per-entitlement secret from which control words derive.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct EntitlementSecret([u8; SECRET_LEN]);

impl fmt::Debug for EntitlementSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EntitlementSecret(..)")
    }
}

impl EntitlementSecret {
    pub fn new(bytes: [u8; SECRET_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Self)
    }

    pub fn as_bytes(&self) -> &[u8; SECRET_LEN] {
        &self.0
    }
}

pub fn derive_cw(secret: &EntitlementSecret, stream_id: u16, period_index: u32) -> ControlWord {
    let d = hash_parts(&[secret.as_bytes(), &stream_id.to_be_bytes(), &period_index.to_be_bytes()]);
    let mut entropy = [0u8; CW_ENTROPY_LEN];
    entropy.copy_from_slice(&d.as_bytes()[..CW_ENTROPY_LEN]);
    ControlWord::new(entropy)
}

pub fn period_of(sequence: u32, period_packets: u32) -> u32 {
    sequence / period_packets.max(1)
}

#[derive(Clone, PartialEq, Eq)]
pub struct TransportPacket {
    pub stream_id: u16,
    pub period_index: u32,
    /// Position of the packet in its stream; feeds the keystream counter.
    pub sequence: u32,
    pub scrambled: bool,
    pub payload: [u8; PAYLOAD_LEN],
}

impl fmt::Debug for TransportPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransportPacket")
            .field("stream_id", &self.stream_id)
            .field("period_index", &self.period_index)
            .field("sequence", &self.sequence)
            .field("scrambled", &self.scrambled)
            .finish_non_exhaustive()
    }
}

impl WireCodec for TransportPacket {
    const MSG_TYPE: MsgType = MsgType::TransportPacket;
    fn write_fields(&self, w: &mut FieldWriter) {
        w.u16(self.stream_id)
            .u32(self.period_index)
            .u32(self.sequence)
            .bool(self.scrambled)
            .bytes(&self.payload);
    }
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            stream_id: r.u16()?,
            period_index: r.u32()?,
            sequence: r.u32()?,
            scrambled: r.bool()?,
            payload: r.array("payload")?,
        })
    }
}

/// Key-separating payload cipher keyed by a control word.
pub trait PayloadCipher {
    fn apply(&self, cw: &ControlWord, pkt: &TransportPacket, payload: &mut [u8; PAYLOAD_LEN]);
}

/// XOR with a keystream of `hash(cw || stream_id || period || counter)` blocks.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashXorCipher;

const BLOCKS_PER_PACKET: u64 = PAYLOAD_LEN.div_ceil(DIGEST_LEN) as u64;

impl PayloadCipher for HashXorCipher {
    fn apply(&self, cw: &ControlWord, pkt: &TransportPacket, payload: &mut [u8; PAYLOAD_LEN]) {
        let stream = pkt.stream_id.to_be_bytes();
        let period = pkt.period_index.to_be_bytes();
        for (n, chunk) in payload.chunks_mut(DIGEST_LEN).enumerate() {
            let counter = pkt.sequence as u64 * BLOCKS_PER_PACKET + n as u64;
            let block = hash_parts(&[cw.as_bytes(), &stream, &period, &counter.to_be_bytes()]);
            for (p, k) in chunk.iter_mut().zip(block.as_bytes()) {
                *p ^= k;
            }
        }
    }
}

pub fn scramble_with<C: PayloadCipher>(
    cipher: &C,
    cw: &ControlWord,
    pkt: &TransportPacket,
) -> Result<TransportPacket, ScramblerError> {
    if pkt.scrambled {
        return Err(ScramblerError::FlagStateError(true));
    }
    let mut out = pkt.clone();
    cipher.apply(cw, pkt, &mut out.payload);
    out.scrambled = true;
    Ok(out)
}

pub fn descramble_with<C: PayloadCipher>(
    cipher: &C,
    cw: &ControlWord,
    pkt: &TransportPacket,
) -> Result<TransportPacket, ScramblerError> {
    if !pkt.scrambled {
        return Err(ScramblerError::FlagStateError(false));
    }
    let mut out = pkt.clone();
    cipher.apply(cw, pkt, &mut out.payload);
    out.scrambled = false;
    Ok(out)
}

pub fn scramble(cw: &ControlWord, pkt: &TransportPacket) -> Result<TransportPacket, ScramblerError> {
    scramble_with(&HashXorCipher, cw, pkt)
}

pub fn descramble(cw: &ControlWord, pkt: &TransportPacket) -> Result<TransportPacket, ScramblerError> {
    descramble_with(&HashXorCipher, cw, pkt)
}

/// Split `data` into clear packets; the last payload is zero-padded.
pub fn packetize(stream_id: u16, data: &[u8], period_packets: u32) -> Vec<TransportPacket> {
    data.chunks(PAYLOAD_LEN)
        .enumerate()
        .map(|(n, chunk)| {
            let mut payload = [0u8; PAYLOAD_LEN];
            payload[..chunk.len()].copy_from_slice(chunk);
            TransportPacket {
                stream_id,
                period_index: period_of(n as u32, period_packets),
                sequence: n as u32,
                scrambled: false,
                payload,
            }
        })
        .collect()
}

pub fn payload_bytes(packets: &[TransportPacket]) -> Vec<u8> {
    packets.iter().flat_map(|p| p.payload).collect()
}

/// Deterministic test content: `packets * 184` bytes derived from a label.
pub fn synthetic_content(label: &str, packets: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(packets * PAYLOAD_LEN);
    let mut counter = 0u64;
    while out.len() < packets * PAYLOAD_LEN {
        out.extend_from_slice(hash_parts(&[label.as_bytes(), &counter.to_be_bytes()]).as_bytes());
        counter += 1;
    }
    out.truncate(packets * PAYLOAD_LEN);
    out
}

/// Head-end side: scramble each packet under the control word of its period.
pub fn scramble_stream(secret: &EntitlementSecret, packets: &[TransportPacket]) -> Result<Vec<TransportPacket>, ScramblerError> {
    let mut cw: Option<(u32, ControlWord)> = None;
    packets
        .iter()
        .map(|p| {
            if cw.as_ref().map(|(k, _)| *k) != Some(p.period_index) {
                cw = Some((p.period_index, derive_cw(secret, p.stream_id, p.period_index)));
            }
            scramble(&cw.as_ref().expect("set above").1, p)
        })
        .collect()
}

/// Stream file: each packet as a 4-byte big-endian length and its encoding.
pub fn write_stream(packets: &[TransportPacket]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in packets {
        let enc = p.encode();
        out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
        out.extend_from_slice(&enc);
    }
    out
}

pub fn read_stream(mut bytes: &[u8]) -> Result<Vec<TransportPacket>, ScramblerError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(ScramblerError::TruncatedStream);
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[4..];
        if rest.len() < len {
            return Err(ScramblerError::TruncatedStream);
        }
        out.push(TransportPacket::decode(&rest[..len])?);
        bytes = &rest[len..];
    }
    Ok(out)
}

/// Digest of a packet sequence's payloads, for fidelity reports.
pub fn content_digest(packets: &[TransportPacket]) -> crate::crypto::Digest {
    hash(&payload_bytes(packets))
}
