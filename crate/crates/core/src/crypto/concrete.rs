use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::Signer;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use super::{
    decode_value, encode_value, Address, AsymKeyPair, AsymPrivate, AsymPublic, BackendKind,
    CryptoBackend, CryptoError, Cypher, KeyId, MultiSigBundle, Payload, Scheme, Signature,
    SigningKey, SymKey, Token, Value, VerifyingKey,
};

const NONCE_LEN: usize = 12;

/// Real primitives: X25519 + ChaCha20-Poly1305 (ephemeral-static hybrid),
/// ChaCha20-Poly1305 with random nonces, Ed25519 multisig legs.
pub struct ConcreteBackend {
    rng: ChaCha20Rng,
    next_id: u64,
}

impl ConcreteBackend {
    pub fn new(seed: u64) -> Self {
        ConcreteBackend {
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_id: 1,
        }
    }

    fn fresh_id(&mut self) -> KeyId {
        let id = KeyId(self.next_id);
        self.next_id += 1;
        id
    }

    fn bytes32(&mut self) -> [u8; 32] {
        let mut b = [0u8; 32];
        self.rng.fill_bytes(&mut b);
        b
    }
}

fn hybrid_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"cryptocubic-hybrid-v1");
    h.update(shared);
    h.update(ephemeral);
    h.update(recipient);
    h.finalize().into()
}

fn material(m: &Option<[u8; 32]>) -> Result<&[u8; 32], CryptoError> {
    // A symbolic key cannot open a concrete cypher.
    m.as_ref().ok_or(CryptoError::KeyMismatch)
}

fn sealed(c: &Cypher, expected: Scheme) -> Result<&[u8], CryptoError> {
    if c.scheme != expected {
        return Err(CryptoError::SchemeMismatch(c.scheme));
    }
    match &c.payload {
        Payload::Sealed(bytes) => Ok(bytes),
        Payload::Term(_) => Err(CryptoError::KeyMismatch),
    }
}

fn decode_plaintext(pt: &[u8]) -> Result<Value, CryptoError> {
    decode_value(pt).map_err(|e| CryptoError::Malformed(e.to_string()))
}

impl CryptoBackend for ConcreteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Concrete
    }

    fn gen_asym_pair(&mut self) -> AsymKeyPair {
        let id = self.fresh_id();
        let secret = StaticSecret::from(self.bytes32());
        let public = PublicKey::from(&secret);
        AsymKeyPair {
            id,
            private: AsymPrivate {
                id,
                material: Some(secret.to_bytes()),
            },
            public: AsymPublic {
                id,
                material: Some(public.to_bytes()),
            },
        }
    }

    fn gen_sym_key(&mut self) -> SymKey {
        SymKey {
            id: self.fresh_id(),
            material: Some(self.bytes32()),
        }
    }

    fn gen_token(&mut self) -> Token {
        Token::new(self.bytes32())
    }

    fn gen_multisig(&mut self) -> MultiSigBundle {
        let leg = |this: &mut Self| {
            let id = this.fresh_id();
            let sk = ed25519_dalek::SigningKey::from_bytes(&this.bytes32());
            (
                SigningKey {
                    id,
                    material: Some(sk.to_bytes()),
                },
                VerifyingKey {
                    id,
                    material: Some(sk.verifying_key().to_bytes()),
                },
            )
        };
        let (sig_u, verify_u) = leg(self);
        let (sig_s, verify_s) = leg(self);
        MultiSigBundle {
            address: Address::from_verifying_keys(&verify_u, &verify_s),
            sig_u,
            sig_s,
            verify_u,
            verify_s,
        }
    }

    fn asym_encrypt(&mut self, key: &AsymPublic, m: &Value) -> Result<Cypher, CryptoError> {
        if m.is_empty_plaintext() {
            return Err(CryptoError::EmptyPlaintext);
        }
        let recipient = PublicKey::from(*material(&key.material)?);
        let ephemeral = StaticSecret::from(self.bytes32());
        let ephemeral_pub = PublicKey::from(&ephemeral);
        let shared = ephemeral.diffie_hellman(&recipient);
        let k = hybrid_key(shared.as_bytes(), ephemeral_pub.as_bytes(), recipient.as_bytes());
        let ct = ChaCha20Poly1305::new(Key::from_slice(&k))
            .encrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), encode_value(m).as_slice())
            .map_err(|_| CryptoError::Malformed("aead seal".into()))?;
        let mut out = ephemeral_pub.to_bytes().to_vec();
        out.extend_from_slice(&ct);
        Ok(Cypher {
            scheme: Scheme::Asymmetric,
            key_hint: None,
            payload: Payload::Sealed(out),
        })
    }

    fn asym_decrypt(&self, key: &AsymPrivate, c: &Cypher) -> Result<Value, CryptoError> {
        let bytes = sealed(c, Scheme::Asymmetric)?;
        let secret = StaticSecret::from(*material(&key.material)?);
        if bytes.len() < 32 {
            return Err(CryptoError::Malformed("short asymmetric cypher".into()));
        }
        let ephemeral: [u8; 32] = bytes[..32].try_into().unwrap();
        let ephemeral = PublicKey::from(ephemeral);
        let recipient = PublicKey::from(&secret);
        let shared = secret.diffie_hellman(&ephemeral);
        let k = hybrid_key(shared.as_bytes(), ephemeral.as_bytes(), recipient.as_bytes());
        let pt = ChaCha20Poly1305::new(Key::from_slice(&k))
            .decrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), &bytes[32..])
            .map_err(|_| CryptoError::KeyMismatch)?;
        decode_plaintext(&pt)
    }

    fn sym_encrypt(&mut self, key: &SymKey, m: &Value) -> Result<Cypher, CryptoError> {
        if m.is_empty_plaintext() {
            return Err(CryptoError::EmptyPlaintext);
        }
        let k = material(&key.material)?;
        let mut nonce = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut nonce);
        let ct = ChaCha20Poly1305::new(Key::from_slice(k))
            .encrypt(Nonce::from_slice(&nonce), encode_value(m).as_slice())
            .map_err(|_| CryptoError::Malformed("aead seal".into()))?;
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        Ok(Cypher {
            scheme: Scheme::Symmetric,
            key_hint: None,
            payload: Payload::Sealed(out),
        })
    }

    fn sym_decrypt(&self, key: &SymKey, c: &Cypher) -> Result<Value, CryptoError> {
        let bytes = sealed(c, Scheme::Symmetric)?;
        let k = material(&key.material)?;
        if bytes.len() < NONCE_LEN {
            return Err(CryptoError::Malformed("short symmetric cypher".into()));
        }
        let pt = ChaCha20Poly1305::new(Key::from_slice(k))
            .decrypt(Nonce::from_slice(&bytes[..NONCE_LEN]), &bytes[NONCE_LEN..])
            .map_err(|_| CryptoError::KeyMismatch)?;
        decode_plaintext(&pt)
    }

    fn matches(&self, private: &AsymPrivate, public: &AsymPublic) -> bool {
        match (private.material, public.material) {
            (Some(sk), Some(pk)) => PublicKey::from(&StaticSecret::from(sk)).to_bytes() == pk,
            _ => false,
        }
    }

    fn sign(&self, key: &SigningKey, msg: &[u8]) -> Signature {
        match key.material {
            Some(sk) => {
                let sk = ed25519_dalek::SigningKey::from_bytes(&sk);
                Signature::Ed25519(sk.sign(msg).to_bytes().to_vec())
            }
            // A symbolic key yields a signature no concrete verifier accepts.
            None => Signature::Ed25519(Vec::new()),
        }
    }
}
