//! Canonical binary encoding of [`Value`].
//!
//! Used for plaintexts under the concrete backend, for hashing, for message
//! payloads and for destructive-store contents. Layout: one tag byte per
//! value, big-endian integers, `u32` length prefixes.

use thiserror::Error;

use super::{
    Address, AsymPrivate, AsymPublic, Cypher, Digest, KeyId, Material, Payload, Scheme, Signature,
    SigningKey, SymKey, Token, Value, VerifyingKey,
};

const TAG_ASYM_PRIVATE: u8 = 0x01;
const TAG_ASYM_PUBLIC: u8 = 0x02;
const TAG_SYM_KEY: u8 = 0x03;
const TAG_SIGNING_KEY: u8 = 0x04;
const TAG_VERIFYING_KEY: u8 = 0x05;
const TAG_CYPHER: u8 = 0x06;
const TAG_DIGEST: u8 = 0x07;
const TAG_TOKEN: u8 = 0x08;
const TAG_ADDRESS: u8 = 0x09;
const TAG_SIGNATURE: u8 = 0x0a;
const TAG_BYTES: u8 = 0x0b;
const TAG_TUPLE: u8 = 0x0c;

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("unknown tag {tag:#04x} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("nesting deeper than {MAX_DEPTH}")]
    TooDeep,
}

pub fn encode_value(v: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    write_value(&mut out, v);
    out
}

pub fn decode_value(bytes: &[u8]) -> Result<Value, CodecError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let v = r.value(0)?;
    if r.pos != bytes.len() {
        return Err(CodecError::Trailing(bytes.len() - r.pos));
    }
    Ok(v)
}

fn write_key(out: &mut Vec<u8>, tag: u8, id: KeyId, material: &Material) {
    out.push(tag);
    out.extend_from_slice(&id.0.to_be_bytes());
    match material {
        None => out.push(0),
        Some(m) => {
            out.push(1);
            out.extend_from_slice(m);
        }
    }
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn write_value(out: &mut Vec<u8>, v: &Value) {
    match v {
        Value::AsymPrivate(k) => write_key(out, TAG_ASYM_PRIVATE, k.id, &k.material),
        Value::AsymPublic(k) => write_key(out, TAG_ASYM_PUBLIC, k.id, &k.material),
        Value::SymKey(k) => write_key(out, TAG_SYM_KEY, k.id, &k.material),
        Value::SigningKey(k) => write_key(out, TAG_SIGNING_KEY, k.id, &k.material),
        Value::VerifyingKey(k) => write_key(out, TAG_VERIFYING_KEY, k.id, &k.material),
        Value::Cypher(c) => {
            out.push(TAG_CYPHER);
            out.push(match c.scheme {
                Scheme::Asymmetric => 0,
                Scheme::Symmetric => 1,
            });
            match c.key_hint {
                None => out.push(0),
                Some(id) => {
                    out.push(1);
                    out.extend_from_slice(&id.0.to_be_bytes());
                }
            }
            match &c.payload {
                Payload::Term(inner) => {
                    out.push(0);
                    write_value(out, inner);
                }
                Payload::Sealed(bytes) => {
                    out.push(1);
                    write_bytes(out, bytes);
                }
            }
        }
        Value::Digest(d) => {
            out.push(TAG_DIGEST);
            out.extend_from_slice(&d.0);
        }
        Value::Token(t) => {
            out.push(TAG_TOKEN);
            out.extend_from_slice(&t.value);
        }
        Value::Address(a) => {
            out.push(TAG_ADDRESS);
            out.extend_from_slice(&a.0);
        }
        Value::Signature(s) => {
            out.push(TAG_SIGNATURE);
            match s {
                Signature::Symbolic { key, msg } => {
                    out.push(0);
                    out.extend_from_slice(&key.0.to_be_bytes());
                    out.extend_from_slice(&msg.0);
                }
                Signature::Ed25519(bytes) => {
                    out.push(1);
                    write_bytes(out, bytes);
                }
            }
        }
        Value::Bytes(b) => {
            out.push(TAG_BYTES);
            write_bytes(out, b);
        }
        Value::Tuple(items) => {
            out.push(TAG_TUPLE);
            out.extend_from_slice(&(items.len() as u32).to_be_bytes());
            for item in items {
                write_value(out, item);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CodecError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn arr32(&mut self) -> Result<[u8; 32], CodecError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn flag(&mut self) -> Result<bool, CodecError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(CodecError::UnknownTag { tag, offset: at }),
        }
    }

    fn key(&mut self) -> Result<(KeyId, Material), CodecError> {
        let id = KeyId(self.u64()?);
        let material = if self.flag()? { Some(self.arr32()?) } else { None };
        Ok((id, material))
    }

    fn value(&mut self, depth: usize) -> Result<Value, CodecError> {
        if depth > MAX_DEPTH {
            return Err(CodecError::TooDeep);
        }
        let at = self.pos;
        let tag = self.u8()?;
        Ok(match tag {
            TAG_ASYM_PRIVATE => {
                let (id, material) = self.key()?;
                Value::AsymPrivate(AsymPrivate { id, material })
            }
            TAG_ASYM_PUBLIC => {
                let (id, material) = self.key()?;
                Value::AsymPublic(AsymPublic { id, material })
            }
            TAG_SYM_KEY => {
                let (id, material) = self.key()?;
                Value::SymKey(SymKey { id, material })
            }
            TAG_SIGNING_KEY => {
                let (id, material) = self.key()?;
                Value::SigningKey(SigningKey { id, material })
            }
            TAG_VERIFYING_KEY => {
                let (id, material) = self.key()?;
                Value::VerifyingKey(VerifyingKey { id, material })
            }
            TAG_CYPHER => {
                let scheme = if self.flag()? {
                    Scheme::Symmetric
                } else {
                    Scheme::Asymmetric
                };
                let key_hint = if self.flag()? {
                    Some(KeyId(self.u64()?))
                } else {
                    None
                };
                let payload = if self.flag()? {
                    Payload::Sealed(self.bytes()?)
                } else {
                    Payload::Term(Box::new(self.value(depth + 1)?))
                };
                Value::Cypher(Cypher {
                    scheme,
                    key_hint,
                    payload,
                })
            }
            TAG_DIGEST => Value::Digest(Digest(self.arr32()?)),
            TAG_TOKEN => Value::Token(Token::new(self.arr32()?)),
            TAG_ADDRESS => Value::Address(Address(self.arr32()?)),
            TAG_SIGNATURE => {
                if self.flag()? {
                    Value::Signature(Signature::Ed25519(self.bytes()?))
                } else {
                    let key = KeyId(self.u64()?);
                    let msg = Digest(self.arr32()?);
                    Value::Signature(Signature::Symbolic { key, msg })
                }
            }
            TAG_BYTES => Value::Bytes(self.bytes()?),
            TAG_TUPLE => {
                let n = self.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Value::Tuple(items)
            }
            tag => return Err(CodecError::UnknownTag { tag, offset: at }),
        })
    }
}
