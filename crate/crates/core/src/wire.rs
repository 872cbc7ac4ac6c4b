// Licensed under the Apache-2.0 license

//! Canonical TLV wire format.
//!
//! ```text
//! message := msg_type:u8 field*
//! field   := len:u32be bytes[len]
//! ```
//!
//! A message is exactly its type byte followed by its fields; decoding
//! consumes the whole input. Integers inside fields are fixed-width big
//! endian, booleans one byte, lists a concatenation of `len:u32be item`
//! records, and optional values a one-byte presence flag followed by the
//! value. Nested messages are stored as their full encoding.
//!
//! Signed messages place the signature in their last field; the signing
//! input is the encoding of the message with that field removed.

use thiserror::Error;

use crate::crypto::{self, Ciphertext, CryptoError, Digest, KeyPair, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed message: empty input")]
    Empty,
    #[error("malformed message: unknown msg_type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed message: length prefix exceeds remaining bytes")]
    Truncated,
    #[error("malformed message: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed message: expected {expected:?}, found {found:?}")]
    UnexpectedType { expected: MsgType, found: MsgType },
    #[error("malformed message: missing field")]
    MissingField,
    #[error("malformed message: invalid {0}")]
    InvalidField(&'static str),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        "MalformedMessage"
    }
}

macro_rules! msg_types {
    ($($name:ident = $val:expr),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum MsgType {
            $($name = $val),*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name),*];

            pub fn name(self) -> &'static str {
                match self {
                    $(MsgType::$name => stringify!($name)),*
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $(stringify!($name) => Some(MsgType::$name),)*
                    _ => None,
                }
            }
        }

        impl TryFrom<u8> for MsgType {
            type Error = WireError;

            fn try_from(v: u8) -> Result<Self, WireError> {
                match v {
                    $($val => Ok(MsgType::$name),)*
                    other => Err(WireError::UnknownType(other)),
                }
            }
        }
    };
}

msg_types! {
    EkCredential = 0x01,
    PlatformCredential = 0x02,
    IdentityBinding = 0x03,
    AikCredential = 0x04,
    Quote = 0x05,
    SealedBlob = 0x06,
    SealedPayload = 0x07,
    MeasurementEvent = 0x08,
    BootLog = 0x09,
    TransportPacket = 0x0A,
    BindKeyCertificate = 0x0B,
    EnrollEnvelope = 0x0C,
    EnrollRequest = 0x0D,
    EnrollChallenge = 0x0E,
    ChallengeResponse = 0x0F,
    ActivationBlob = 0x10,
    ActivationPayload = 0x11,
    ValidityQuery = 0x12,
    ValidityResponse = 0x13,
    FraudClaim = 0x14,
    RevealRequest = 0x15,
    RevealResponse = 0x16,
    ServiceOffer = 0x17,
    OfferRequest = 0x18,
    SubscriptionSelection = 0x19,
    RegistrationRequest = 0x1A,
    RegistrationReceipt = 0x1B,
    AttestationHello = 0x1C,
    AttestationChallenge = 0x1D,
    KeyRequest = 0x1E,
    UsageConstraints = 0x1F,
    EntitlementGrant = 0x20,
    PermitRequest = 0x21,
    OnlinePermit = 0x22,
    TopUpRequest = 0x23,
    DepositVoucher = 0x24,
    SealedVoucher = 0x25,
    TimestampRequest = 0x26,
    TimestampToken = 0x27,
    ConsumptionRecord = 0x28,
    ConsumptionBatch = 0x29,
    PullRequest = 0x2A,
    SettlementAck = 0x2B,
    DeviceDescription = 0x2C,
    UpdateRequest = 0x2D,
    UpdatePackage = 0x2E,
    SealedUpdate = 0x2F,
    ProviderVouch = 0x30,
    ProtocolError = 0x31,
    TpmSnapshot = 0x32,
    ServiceEntry = 0x33,
    RecordReject = 0x34,
}

impl MsgType {
    /// Types that carry private key material and must never be transmitted.
    pub fn is_private(self) -> bool {
        matches!(self, MsgType::TpmSnapshot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub fields: Vec<Vec<u8>>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, fields: Vec<Vec<u8>>) -> Self {
        Self { msg_type, fields }
    }

    pub fn encoded_len(&self) -> usize {
        1 + self.fields.iter().map(|f| 4 + f.len()).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.msg_type as u8);
        for f in &self.fields {
            put_prefixed(&mut out, f);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&tag, mut rest) = bytes.split_first().ok_or(WireError::Empty)?;
        let msg_type = MsgType::try_from(tag)?;
        let mut fields = Vec::new();
        while !rest.is_empty() {
            let (field, tail) = take_prefixed(rest)?;
            fields.push(field.to_vec());
            rest = tail;
        }
        Ok(Self { msg_type, fields })
    }
}

fn put_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    let len = u32::try_from(bytes.len()).expect("field longer than u32::MAX");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(bytes);
}

fn take_prefixed(bytes: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let (len, rest) = bytes.split_at(4);
    let len = u32::from_be_bytes(len.try_into().expect("4 bytes")) as usize;
    if rest.len() < len {
        return Err(WireError::Truncated);
    }
    Ok(rest.split_at(len))
}

/// Encode a list of byte strings as `len:u32be item` records.
pub fn encode_list(items: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for i in items {
        put_prefixed(&mut out, i);
    }
    out
}

pub fn decode_list(mut bytes: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (item, rest) = take_prefixed(bytes)?;
        out.push(item.to_vec());
        bytes = rest;
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct FieldWriter {
    fields: Vec<Vec<u8>>,
}

impl FieldWriter {
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.fields.push(b.to_vec());
        self
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }
    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }
    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(d.as_bytes())
    }
    pub fn public_key(&mut self, k: &PublicKey) -> &mut Self {
        self.bytes(&k.to_bytes())
    }
    pub fn signature(&mut self, s: &Signature) -> &mut Self {
        self.bytes(&s.0)
    }
    pub fn ciphertext(&mut self, c: &Ciphertext) -> &mut Self {
        self.bytes(&c.0)
    }
    pub fn nested<T: WireCodec>(&mut self, v: &T) -> &mut Self {
        self.fields.push(v.encode());
        self
    }
    pub fn opt_nested<T: WireCodec>(&mut self, v: Option<&T>) -> &mut Self {
        match v {
            None => self.bytes(&[0]),
            Some(v) => {
                let mut b = vec![1];
                b.extend_from_slice(&v.encode());
                self.fields.push(b);
                self
            }
        }
    }
    pub fn list<T: WireCodec>(&mut self, items: &[T]) -> &mut Self {
        let enc: Vec<Vec<u8>> = items.iter().map(WireCodec::encode).collect();
        self.fields.push(encode_list(&enc));
        self
    }
    pub fn byte_list(&mut self, items: &[Vec<u8>]) -> &mut Self {
        self.fields.push(encode_list(items));
        self
    }
    pub fn into_fields(self) -> Vec<Vec<u8>> {
        self.fields
    }
}

#[derive(Debug)]
pub struct FieldReader<'a> {
    fields: &'a [Vec<u8>],
    pos: usize,
}

impl<'a> FieldReader<'a> {
    pub fn new(fields: &'a [Vec<u8>]) -> Self {
        Self { fields, pos: 0 }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let f = self.fields.get(self.pos).ok_or(WireError::MissingField)?;
        self.pos += 1;
        Ok(f)
    }
    pub fn vec(&mut self) -> Result<Vec<u8>, WireError> {
        self.bytes().map(<[u8]>::to_vec)
    }
    pub fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], WireError> {
        self.bytes()?.try_into().map_err(|_| WireError::InvalidField(what))
    }
    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.array::<1>("u8")?[0])
    }
    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array("u16")?))
    }
    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array("u32")?))
    }
    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array("u64")?))
    }
    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::InvalidField("bool")),
        }
    }
    pub fn string(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.vec()?).map_err(|_| WireError::InvalidField("utf-8 string"))
    }
    pub fn digest(&mut self) -> Result<Digest, WireError> {
        Ok(Digest(self.array("digest")?))
    }
    pub fn public_key(&mut self) -> Result<PublicKey, WireError> {
        PublicKey::from_bytes(self.bytes()?).ok_or(WireError::InvalidField("public key"))
    }
    pub fn signature(&mut self) -> Result<Signature, WireError> {
        Ok(Signature(self.array("signature")?))
    }
    pub fn ciphertext(&mut self) -> Result<Ciphertext, WireError> {
        Ok(Ciphertext(self.vec()?))
    }
    pub fn nested<T: WireCodec>(&mut self) -> Result<T, WireError> {
        T::decode(self.bytes()?)
    }
    pub fn opt_nested<T: WireCodec>(&mut self) -> Result<Option<T>, WireError> {
        match self.bytes()?.split_first() {
            Some((0, [])) => Ok(None),
            Some((1, rest)) => T::decode(rest).map(Some),
            _ => Err(WireError::InvalidField("option flag")),
        }
    }
    pub fn list<T: WireCodec>(&mut self) -> Result<Vec<T>, WireError> {
        decode_list(self.bytes()?)?.iter().map(|b| T::decode(b)).collect()
    }
    pub fn byte_list(&mut self) -> Result<Vec<Vec<u8>>, WireError> {
        decode_list(self.bytes()?)
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.fields.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

/// Typed protocol messages with a fixed field order.
pub trait WireCodec: Sized {
    const MSG_TYPE: MsgType;

    fn write_fields(&self, w: &mut FieldWriter);
    fn read_fields(r: &mut FieldReader<'_>) -> Result<Self, WireError>;

    fn to_wire(&self) -> WireMessage {
        let mut w = FieldWriter::default();
        self.write_fields(&mut w);
        WireMessage::new(Self::MSG_TYPE, w.into_fields())
    }

    fn encode(&self) -> Vec<u8> {
        self.to_wire().encode()
    }

    fn from_wire(msg: &WireMessage) -> Result<Self, WireError> {
        if msg.msg_type != Self::MSG_TYPE {
            return Err(WireError::UnexpectedType {
                expected: Self::MSG_TYPE,
                found: msg.msg_type,
            });
        }
        let mut r = FieldReader::new(&msg.fields);
        let v = Self::read_fields(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        Self::from_wire(&WireMessage::decode(bytes)?)
    }
}

/// Encoding of `msg` without its trailing signature field.
pub fn signing_input<T: WireCodec>(msg: &T) -> Vec<u8> {
    let mut wire = msg.to_wire();
    wire.fields.pop();
    wire.encode()
}

/// Messages whose last field is a signature over the rest.
pub trait Signed: WireCodec {
    fn signature(&self) -> &Signature;
    fn signature_mut(&mut self) -> &mut Signature;

    fn sign_with(&mut self, key: &KeyPair) -> Result<(), CryptoError> {
        *self.signature_mut() = crypto::sign(key, &signing_input(self))?;
        Ok(())
    }

    fn verify_with(&self, public: &PublicKey) -> bool {
        crypto::verify(public, &signing_input(self), self.signature())
    }
}

/// Field order codec for a plain struct. Signed structs must list the
/// signature field last.
#[macro_export]
macro_rules! wire_struct {
    ($ty:ident, $msg:ident, { $($field:ident : $kind:ident),* $(,)? }) => {
        impl $crate::wire::WireCodec for $ty {
            const MSG_TYPE: $crate::wire::MsgType = $crate::wire::MsgType::$msg;

            fn write_fields(&self, w: &mut $crate::wire::FieldWriter) {
                $( $crate::wire_struct!(@write w, self.$field, $kind); )*
            }

            fn read_fields(r: &mut $crate::wire::FieldReader<'_>) -> Result<Self, $crate::wire::WireError> {
                Ok(Self { $( $field: $crate::wire_struct!(@read r, $kind), )* })
            }
        }
    };
    (@write $w:ident, $v:expr, nested) => { $w.nested(&$v); };
    (@write $w:ident, $v:expr, opt_nested) => { $w.opt_nested($v.as_ref()); };
    (@write $w:ident, $v:expr, list) => { $w.list(&$v); };
    (@write $w:ident, $v:expr, vec) => { $w.bytes(&$v); };
    (@write $w:ident, $v:expr, nonce) => { $w.bytes(&$v); };
    (@write $w:ident, $v:expr, string) => { $w.str(&$v); };
    (@write $w:ident, $v:expr, digest) => { $w.digest(&$v); };
    (@write $w:ident, $v:expr, public_key) => { $w.public_key(&$v); };
    (@write $w:ident, $v:expr, signature) => { $w.signature(&$v); };
    (@write $w:ident, $v:expr, ciphertext) => { $w.ciphertext(&$v); };
    (@write $w:ident, $v:expr, byte_list) => { $w.byte_list(&$v); };
    (@write $w:ident, $v:expr, $prim:ident) => { $w.$prim($v); };
    (@read $r:ident, nested) => { $r.nested()? };
    (@read $r:ident, opt_nested) => { $r.opt_nested()? };
    (@read $r:ident, list) => { $r.list()? };
    (@read $r:ident, vec) => { $r.vec()? };
    (@read $r:ident, nonce) => { $r.array::<32>("nonce")? };
    (@read $r:ident, string) => { $r.string()? };
    (@read $r:ident, digest) => { $r.digest()? };
    (@read $r:ident, public_key) => { $r.public_key()? };
    (@read $r:ident, signature) => { $r.signature()? };
    (@read $r:ident, ciphertext) => { $r.ciphertext()? };
    (@read $r:ident, byte_list) => { $r.byte_list()? };
    (@read $r:ident, $prim:ident) => { $r.$prim()? };
}

/// Implements [`Signed`] for a struct with a `signature` field.
#[macro_export]
macro_rules! signed_by_field {
    ($ty:ident) => {
        impl $crate::wire::Signed for $ty {
            fn signature(&self) -> &$crate::crypto::Signature {
                &self.signature
            }
            fn signature_mut(&mut self) -> &mut $crate::crypto::Signature {
                &mut self.signature
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forced_example_encoding() {
        let m = WireMessage::new(MsgType::try_from(0x01).unwrap(), vec![b"ab".to_vec()]);
        assert_eq!(m.encode(), vec![0x01, 0, 0, 0, 2, b'a', b'b']);
    }

    #[test]
    fn truncated_and_unknown_inputs() {
        assert_eq!(WireMessage::decode(&[]), Err(WireError::Empty));
        assert_eq!(WireMessage::decode(&[0xEE]), Err(WireError::UnknownType(0xEE)));
        assert_eq!(WireMessage::decode(&[0x01, 0, 0, 0, 3, b'a']), Err(WireError::Truncated));
        assert_eq!(WireMessage::decode(&[0x01, 0, 0]), Err(WireError::Truncated));
        // type byte only: zero fields is well-formed
        assert_eq!(WireMessage::decode(&[0x01]).unwrap().fields.len(), 0);
    }

    #[test]
    fn names_round_trip() {
        for &t in MsgType::ALL {
            assert_eq!(MsgType::from_name(t.name()), Some(t));
            assert_eq!(MsgType::try_from(t as u8), Ok(t));
        }
    }

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        (
            prop::sample::select(MsgType::ALL.to_vec()),
            prop::collection::vec(prop::collection::vec(any::<u8>(), 0..48), 0..8),
        )
            .prop_map(|(t, fields)| WireMessage::new(t, fields))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn round_trip(m in arb_message()) {
            let enc = m.encode();
            prop_assert_eq!(enc.len(), m.encoded_len());
            prop_assert_eq!(WireMessage::decode(&enc).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn dropping_the_last_byte_is_rejected(m in arb_message()) {
            let enc = m.encode();
            prop_assert!(WireMessage::decode(&enc[..enc.len() - 1]).is_err());
        }
    }
}
