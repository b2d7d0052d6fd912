use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    Address, AsymKeyPair, AsymPrivate, AsymPublic, BackendKind, CryptoBackend, CryptoError,
    Cypher, KeyId, MultiSigBundle, Payload, Scheme, Signature, SigningKey, SymKey, Token, Value,
    VerifyingKey, hash_bytes,
};

/// Perfect-cryptography backend: keys are bare ids and a cypher is the term
/// `enc(key_id, plaintext)`.
pub struct SymbolicBackend {
    rng: ChaCha20Rng,
    next_id: u64,
}

impl SymbolicBackend {
    pub fn new(seed: u64) -> Self {
        SymbolicBackend {
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_id: 1,
        }
    }

    fn fresh_id(&mut self) -> KeyId {
        let id = KeyId(self.next_id);
        self.next_id += 1;
        id
    }

    fn seal(scheme: Scheme, key: KeyId, m: &Value) -> Result<Cypher, CryptoError> {
        if m.is_empty_plaintext() {
            return Err(CryptoError::EmptyPlaintext);
        }
        Ok(Cypher {
            scheme,
            key_hint: Some(key),
            payload: Payload::Term(Box::new(m.clone())),
        })
    }

    fn open(expected: Scheme, key: KeyId, symbolic_key: bool, c: &Cypher) -> Result<Value, CryptoError> {
        if c.scheme != expected {
            return Err(CryptoError::SchemeMismatch(c.scheme));
        }
        match (&c.payload, c.key_hint) {
            (Payload::Term(inner), Some(hint)) if symbolic_key && hint == key => Ok((**inner).clone()),
            _ => Err(CryptoError::KeyMismatch),
        }
    }
}

impl CryptoBackend for SymbolicBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Symbolic
    }

    fn gen_asym_pair(&mut self) -> AsymKeyPair {
        let id = self.fresh_id();
        AsymKeyPair {
            id,
            private: AsymPrivate { id, material: None },
            public: AsymPublic { id, material: None },
        }
    }

    fn gen_sym_key(&mut self) -> SymKey {
        SymKey {
            id: self.fresh_id(),
            material: None,
        }
    }

    fn gen_token(&mut self) -> Token {
        let mut value = [0u8; 32];
        self.rng.fill_bytes(&mut value);
        Token::new(value)
    }

    fn gen_multisig(&mut self) -> MultiSigBundle {
        let u = self.fresh_id();
        let s = self.fresh_id();
        let verify_u = VerifyingKey { id: u, material: None };
        let verify_s = VerifyingKey { id: s, material: None };
        MultiSigBundle {
            sig_u: SigningKey { id: u, material: None },
            sig_s: SigningKey { id: s, material: None },
            address: Address::from_verifying_keys(&verify_u, &verify_s),
            verify_u,
            verify_s,
        }
    }

    fn asym_encrypt(&mut self, key: &AsymPublic, m: &Value) -> Result<Cypher, CryptoError> {
        Self::seal(Scheme::Asymmetric, key.id, m)
    }

    fn asym_decrypt(&self, key: &AsymPrivate, c: &Cypher) -> Result<Value, CryptoError> {
        Self::open(Scheme::Asymmetric, key.id, key.material.is_none(), c)
    }

    fn sym_encrypt(&mut self, key: &SymKey, m: &Value) -> Result<Cypher, CryptoError> {
        Self::seal(Scheme::Symmetric, key.id, m)
    }

    fn sym_decrypt(&self, key: &SymKey, c: &Cypher) -> Result<Value, CryptoError> {
        Self::open(Scheme::Symmetric, key.id, key.material.is_none(), c)
    }

    fn matches(&self, private: &AsymPrivate, public: &AsymPublic) -> bool {
        private.material.is_none() && public.material.is_none() && private.id == public.id
    }

    fn sign(&self, key: &SigningKey, msg: &[u8]) -> Signature {
        Signature::Symbolic {
            key: key.id,
            msg: hash_bytes(msg).unwrap_or(super::Digest([0; 32])),
        }
    }
}
