//! Cryptographic primitives behind a pluggable backend.
//!
//! Two providers implement [`CryptoBackend`]:
//!
//! * [`SymbolicBackend`] produces opaque structured terms. A cypher carries
//!   its plaintext as a nested [`Value`] tagged with the encrypting key id,
//!   so the knowledge closure can pattern-match it exactly.
//! * [`ConcreteBackend`] does real work: X25519 + ChaCha20-Poly1305 hybrid
//!   encryption, ChaCha20-Poly1305 for the symmetric scheme, SHA-256 digests
//!   and Ed25519 for the two multisig legs.
//!
//! Both are driven by a seeded ChaCha20 stream, so a seed reproduces the
//! whole key/token sequence.

mod codec;
mod concrete;
mod symbolic;

use std::fmt;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use codec::{decode_value, encode_value, CodecError};
pub use concrete::ConcreteBackend;
pub use symbolic::SymbolicBackend;

/// Opaque identifier handed out by a backend, unique within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u64);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

/// Key material is `None` under the symbolic backend, where the id alone is
/// the key.
pub type Material = Option<[u8; 32]>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AsymPrivate {
    pub id: KeyId,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AsymPublic {
    pub id: KeyId,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AsymKeyPair {
    pub id: KeyId,
    pub private: AsymPrivate,
    pub public: AsymPublic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymKey {
    pub id: KeyId,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Payload {
    /// Symbolic cypher: the plaintext term, recoverable only through the
    /// matching key.
    Term(Box<Value>),
    /// Concrete cypher bytes.
    Sealed(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cypher {
    pub scheme: Scheme,
    /// Id of the encrypting key. Only the symbolic backend sets it.
    pub key_hint: Option<KeyId>,
    pub payload: Payload,
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0[..8]))
    }
}

/// Random challenge string. Equality, ordering and hashing look at `value`
/// only; `consumed` is bookkeeping for the issuing side.
#[derive(Clone, Copy)]
pub struct Token {
    pub value: [u8; 32],
    pub consumed: bool,
}

impl Token {
    pub fn new(value: [u8; 32]) -> Self {
        Token {
            value,
            consumed: false,
        }
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({}", hex::encode(&self.value[..6]))?;
        if self.consumed {
            f.write_str(", consumed")?;
        }
        f.write_str(")")
    }
}

impl PartialEq for Token {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl Eq for Token {}

impl std::hash::Hash for Token {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.value.hash(state);
    }
}

impl PartialOrd for Token {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Token {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.value.cmp(&other.value)
    }
}

/// One leg of the 2-of-2 multisig (`Sig_U` or `Sig_S`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SigningKey {
    pub id: KeyId,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VerifyingKey {
    pub id: KeyId,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signature {
    /// The term `sig(key, digest(msg))`. Unforgeable by axiom of the model.
    Symbolic { key: KeyId, msg: Digest },
    Ed25519(Vec<u8>),
}

/// Ledger address, `sha256(enc(verify(sig_u)) || enc(verify(sig_s)))` for
/// multisig accounts.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(pub [u8; 32]);

impl Address {
    pub fn from_verifying_keys(user: &VerifyingKey, server: &VerifyingKey) -> Address {
        let mut h = Sha256::new();
        h.update(encode_value(&Value::VerifyingKey(user.clone())));
        h.update(encode_value(&Value::VerifyingKey(server.clone())));
        Address(h.finalize().into())
    }

    /// A plain wallet address outside the multisig scheme, named by label.
    pub fn external(label: &str) -> Address {
        let mut h = Sha256::new();
        h.update(b"external:");
        h.update(label.as_bytes());
        Address(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The multisig components created together inside the setup procedure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiSigBundle {
    pub sig_u: SigningKey,
    pub sig_s: SigningKey,
    pub verify_u: VerifyingKey,
    pub verify_s: VerifyingKey,
    pub address: Address,
}

impl MultiSigBundle {
    /// True when `address` is the derivation of the two verification halves.
    pub fn address_is_bound(&self) -> bool {
        Address::from_verifying_keys(&self.verify_u, &self.verify_s) == self.address
    }
}

/// Every value that can sit in party memory, travel in a message, or be
/// reasoned about by the adversary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    AsymPrivate(AsymPrivate),
    AsymPublic(AsymPublic),
    SymKey(SymKey),
    Cypher(Cypher),
    Digest(Digest),
    Token(Token),
    SigningKey(SigningKey),
    VerifyingKey(VerifyingKey),
    Address(Address),
    Signature(Signature),
    Bytes(Vec<u8>),
    Tuple(Vec<Value>),
}

impl Value {
    pub fn is_empty_plaintext(&self) -> bool {
        match self {
            Value::Bytes(b) => b.is_empty(),
            Value::Tuple(items) => items.is_empty(),
            _ => false,
        }
    }

    pub fn as_cypher(&self) -> Option<&Cypher> {
        match self {
            Value::Cypher(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("empty plaintext")]
    EmptyPlaintext,
    #[error("empty hash input")]
    EmptyInput,
    #[error("key does not match the cypher")]
    KeyMismatch,
    #[error("cypher scheme {0:?} does not match the operation")]
    SchemeMismatch(Scheme),
    #[error("malformed cypher: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    Symbolic,
    Concrete,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Symbolic => "symbolic",
            BackendKind::Concrete => "concrete",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symbolic" => Ok(BackendKind::Symbolic),
            "concrete" => Ok(BackendKind::Concrete),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

/// Primitive provider. Generation and encryption draw from the backend's own
/// seeded stream; decryption, hashing and verification are pure.
pub trait CryptoBackend: Send {
    fn kind(&self) -> BackendKind;

    fn gen_asym_pair(&mut self) -> AsymKeyPair;
    fn gen_sym_key(&mut self) -> SymKey;
    fn gen_token(&mut self) -> Token;
    fn gen_multisig(&mut self) -> MultiSigBundle;

    fn asym_encrypt(&mut self, key: &AsymPublic, m: &Value) -> Result<Cypher, CryptoError>;
    fn asym_decrypt(&self, key: &AsymPrivate, c: &Cypher) -> Result<Value, CryptoError>;
    fn sym_encrypt(&mut self, key: &SymKey, m: &Value) -> Result<Cypher, CryptoError>;
    fn sym_decrypt(&self, key: &SymKey, c: &Cypher) -> Result<Value, CryptoError>;

    fn matches(&self, private: &AsymPrivate, public: &AsymPublic) -> bool;

    fn sign(&self, key: &SigningKey, msg: &[u8]) -> Signature;

    fn hash(&self, m: &[u8]) -> Result<Digest, CryptoError> {
        hash_bytes(m)
    }

    fn hash_value(&self, v: &Value) -> Digest {
        // Encodings are never empty.
        hash_bytes(&encode_value(v)).expect("non-empty encoding")
    }

    fn verify(&self, key: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool {
        verify_signature(key, msg, sig)
    }
}

pub fn new_backend(kind: BackendKind, seed: u64) -> Box<dyn CryptoBackend> {
    match kind {
        BackendKind::Symbolic => Box::new(SymbolicBackend::new(seed)),
        BackendKind::Concrete => Box::new(ConcreteBackend::new(seed)),
    }
}

pub fn hash_bytes(m: &[u8]) -> Result<Digest, CryptoError> {
    if m.is_empty() {
        return Err(CryptoError::EmptyInput);
    }
    Ok(Digest(Sha256::digest(m).into()))
}

/// Signature check shared by both backends; dispatches on the material kind.
pub fn verify_signature(key: &VerifyingKey, msg: &[u8], sig: &Signature) -> bool {
    match (key.material, sig) {
        (None, Signature::Symbolic { key: signer, msg: digest }) => {
            *signer == key.id && hash_bytes(msg).map(|d| d == *digest).unwrap_or(false)
        }
        (Some(public), Signature::Ed25519(bytes)) => {
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&public) else {
                return false;
            };
            let Ok(sig) = ed25519_dalek::Signature::from_slice(bytes) else {
                return false;
            };
            vk.verify_strict(msg, &sig).is_ok()
        }
        _ => false,
    }
}
