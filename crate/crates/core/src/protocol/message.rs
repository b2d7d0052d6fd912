//! Wire schema. A record is
//!
//! ```text
//! u32 length | u8 version | u8 kind | u64 session | u32 count | value*
//! ```
//!
//! with `length` covering everything after itself and each value in the
//! canonical value encoding. The layout is identical for both backends;
//! only the value bytes differ.

use thiserror::Error;

use crate::crypto::{decode_value, encode_value, CodecError, Value};

pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    /// `[public key]`, user to server or user to user.
    PublicKey = 1,
    /// `[Es, ADD]`, server to the new owner at setup.
    SquareDelivery = 2,
    Ack = 3,
    /// `[Es, ADD]`, owner to receiver.
    Offer = 4,
    /// `[Et]`
    Challenge = 5,
    /// `[Token2]`
    ChallengeResponse = 6,
    Approve = 7,
    KeyRequest = 8,
    /// `[private key]`; always on the confidential channel.
    PrivateKey = 9,
    /// `[Hash]`
    HashNotice = 10,
    /// `[owner cypher, Ks]`, server to owner at redemption.
    Release = 11,
    /// `[address]`
    RedeemRequest = 12,
    Notify = 13,
    /// `[Sig_U, ADD]` in the clear.
    PlainDelivery = 14,
    /// `[Sig_U, ADD]` in the clear, owner to receiver.
    PlainOffer = 15,
    /// `[Sig_S]` in the clear.
    PlainRelease = 16,
}

impl MessageKind {
    fn from_u8(b: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match b {
            1 => PublicKey,
            2 => SquareDelivery,
            3 => Ack,
            4 => Offer,
            5 => Challenge,
            6 => ChallengeResponse,
            7 => Approve,
            8 => KeyRequest,
            9 => PrivateKey,
            10 => HashNotice,
            11 => Release,
            12 => RedeemRequest,
            13 => Notify,
            14 => PlainDelivery,
            15 => PlainOffer,
            16 => PlainRelease,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("record truncated")]
    Truncated,
    #[error("length prefix {declared} does not match body {actual}")]
    Length { declared: usize, actual: usize },
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unknown message kind {0}")]
    Kind(u8),
    #[error("payload: {0}")]
    Payload(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub session: u64,
    pub payload: Vec<Value>,
}

impl Message {
    pub fn new(kind: MessageKind, session: u64, payload: Vec<Value>) -> Self {
        Message {
            kind,
            session,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.push(WIRE_VERSION);
        body.push(self.kind as u8);
        body.extend_from_slice(&self.session.to_be_bytes());
        body.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        for v in &self.payload {
            let enc = encode_value(v);
            body.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            body.extend_from_slice(&enc);
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, MessageError> {
        let take = |b: &[u8], at: usize, n: usize| -> Result<(), MessageError> {
            if at + n > b.len() {
                Err(MessageError::Truncated)
            } else {
                Ok(())
            }
        };
        take(bytes, 0, 4)?;
        let declared = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if declared != body.len() {
            return Err(MessageError::Length {
                declared,
                actual: body.len(),
            });
        }
        take(body, 0, 14)?;
        if body[0] != WIRE_VERSION {
            return Err(MessageError::Version(body[0]));
        }
        let kind = MessageKind::from_u8(body[1]).ok_or(MessageError::Kind(body[1]))?;
        let session = u64::from_be_bytes(body[2..10].try_into().unwrap());
        let count = u32::from_be_bytes(body[10..14].try_into().unwrap()) as usize;
        let mut at = 14;
        let mut payload = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            take(body, at, 4)?;
            let n = u32::from_be_bytes(body[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            take(body, at, n)?;
            payload.push(decode_value(&body[at..at + n])?);
            at += n;
        }
        if at != body.len() {
            return Err(MessageError::Length {
                declared: at,
                actual: body.len(),
            });
        }
        Ok(Message {
            kind,
            session,
            payload,
        })
    }
}
