use crate::crypto::{
    Address, AsymKeyPair, AsymPrivate, AsymPublic, Cypher, Digest, SigningKey, SymKey, Token,
    Value, VerifyingKey,
};
use crate::ledger::Ledger;
use crate::store::{DestructiveStore, Presence, SlotId, SourceCapability};

use super::names::{self, address_label, square_suffix};
use super::procedure::DynamicProcedure;
use super::SquareId;

/// Server half of a square. Fields fill in as the setup procedure runs.
#[derive(Debug)]
pub struct CryptoSquareRecord {
    pub square_id: SquareId,
    pub address: Option<Address>,
    pub sym_key: Option<SymKey>,
    pub owner: String,
    pub owner_pub: Option<AsymPublic>,
    pub owner_cypher_slot: Option<SlotId>,
    /// Variable name of the slot content: `Ea`, `Eb` or `Sig_S`.
    pub slot_label: String,
    pub es_hash: Option<Digest>,
    /// Verification halves recorded at setup. Public, used to check a
    /// decrypted Sig_U before it is re-encrypted.
    pub verify_u: Option<VerifyingKey>,
    pub verify_s: Option<VerifyingKey>,
    pub redeemed: bool,
    pub(crate) source: Option<SourceCapability>,
}

impl CryptoSquareRecord {
    pub(crate) fn new(square_id: SquareId, owner: &str) -> Self {
        CryptoSquareRecord {
            square_id,
            address: None,
            sym_key: None,
            owner: owner.to_string(),
            owner_pub: None,
            owner_cypher_slot: None,
            slot_label: String::new(),
            es_hash: None,
            verify_u: None,
            verify_s: None,
            redeemed: false,
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub user: String,
    pub token: Token,
    /// Empty between creating the token and encrypting it.
    pub et: Option<Cypher>,
    pub reply: Option<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyEntry {
    pub user: String,
    pub public: AsymPublic,
    pub private: Option<AsymPrivate>,
}

#[derive(Debug, Default)]
pub struct ServerState {
    pub squares: Vec<CryptoSquareRecord>,
    /// Public keys in registration order, with any private key received.
    pub keys: Vec<KeyEntry>,
    pub challenges: Vec<Challenge>,
    pub procedures: Vec<DynamicProcedure>,
}

impl ServerState {
    pub fn square(&self, id: SquareId) -> Option<&CryptoSquareRecord> {
        self.squares.iter().find(|s| s.square_id == id)
    }

    pub fn square_mut(&mut self, id: SquareId) -> Option<&mut CryptoSquareRecord> {
        self.squares.iter_mut().find(|s| s.square_id == id)
    }

    pub fn procedure_mut(&mut self, scope: u64) -> Option<&mut DynamicProcedure> {
        self.procedures.iter_mut().find(|p| p.scope_id() == scope)
    }

    pub fn procedure(&self, scope: u64) -> Option<&DynamicProcedure> {
        self.procedures.iter().find(|p| p.scope_id() == scope)
    }

    pub fn end_procedure(&mut self, scope: u64) {
        if let Some(i) = self.procedures.iter().position(|p| p.scope_id() == scope) {
            let mut p = self.procedures.remove(i);
            p.terminate();
        }
    }

    pub fn register_key(&mut self, user: &str, public: AsymPublic) {
        match self.keys.iter_mut().find(|k| k.user == user) {
            Some(k) if k.public == public => {}
            Some(k) => {
                k.public = public;
                k.private = None;
            }
            None => self.keys.push(KeyEntry {
                user: user.to_string(),
                public,
                private: None,
            }),
        }
    }

    pub fn key_of(&self, user: &str) -> Option<&KeyEntry> {
        self.keys.iter().find(|k| k.user == user)
    }

    /// A repeated challenge for the same user replaces the earlier one.
    pub fn put_challenge(&mut self, c: Challenge) {
        match self.challenges.iter_mut().find(|x| x.user == c.user) {
            Some(slot) => *slot = c,
            None => self.challenges.push(c),
        }
    }

    pub fn holdings(&self, store: &DestructiveStore, with_scopes: bool) -> Vec<String> {
        let mut out = Vec::new();
        let marked: Vec<&str> = self.procedures.iter().filter_map(|p| p.stored()).collect();
        if with_scopes {
            out.extend(self.procedures.iter().filter_map(|p| p.render()));
        }
        for (i, sq) in self.squares.iter().enumerate() {
            let Some(slot) = sq.owner_cypher_slot else { continue };
            let label = format!("{}{}", sq.slot_label, square_suffix(i));
            if store.ping(slot).ok() == Some(Presence::Present)
                && !(with_scopes && marked.contains(&label.as_str()))
            {
                out.push(format!("[{label}]"));
            }
        }
        for (i, sq) in self.squares.iter().enumerate() {
            if sq.sym_key.is_some() {
                out.push(format!("{}{}", names::KS, square_suffix(i)));
            }
        }
        for k in self.keys.iter().rev() {
            if k.private.is_some() {
                out.push(names::private_key(&k.user));
            }
            out.push(names::public_key(&k.user));
        }
        for (i, sq) in self.squares.iter().enumerate() {
            if sq.es_hash.is_some() {
                out.push(format!("{}{}", names::HASH, square_suffix(i)));
            }
        }
        for c in &self.challenges {
            out.push(names::token(&c.user));
            if c.et.is_some() {
                out.push(names::token_cypher(&c.user));
            }
            if c.reply.is_some() {
                out.push(names::token_reply(&c.user));
            }
        }
        out
    }

    /// Persistent memory as an attacker would read it. Slots contribute
    /// nothing but presence, which carries no value.
    pub fn snapshot(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for sq in &self.squares {
            out.extend(sq.address.map(Value::Address));
            out.extend(sq.sym_key.clone().map(Value::SymKey));
            out.extend(sq.owner_pub.clone().map(Value::AsymPublic));
            out.extend(sq.es_hash.map(Value::Digest));
            out.extend(sq.verify_u.clone().map(Value::VerifyingKey));
            out.extend(sq.verify_s.clone().map(Value::VerifyingKey));
        }
        for k in &self.keys {
            out.push(Value::AsymPublic(k.public.clone()));
            out.extend(k.private.clone().map(Value::AsymPrivate));
        }
        for c in &self.challenges {
            out.push(Value::Token(c.token.clone()));
            out.extend(c.et.clone().map(Value::Cypher));
            out.extend(c.reply.clone().map(Value::Token));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSquare {
    pub square_id: SquareId,
    pub address: Address,
    pub es: Option<Cypher>,
    /// Plaintext signing keys, held only in the unencrypted baseline.
    pub sig_u: Option<SigningKey>,
    pub sig_s: Option<SigningKey>,
}

#[derive(Debug)]
pub struct UserState {
    pub name: String,
    pub pair: Option<AsymKeyPair>,
    pub squares: Vec<UserSquare>,
    /// Other users' public keys, in the order received.
    pub known_pubs: Vec<(String, AsymPublic)>,
    pub hash: Option<Digest>,
    pub hash2: Option<Digest>,
    pub et: Option<Cypher>,
    pub token_reply: Option<Token>,
    pub procedure: Option<DynamicProcedure>,
}

impl UserState {
    pub fn new(name: &str) -> Self {
        UserState {
            name: name.to_string(),
            pair: None,
            squares: Vec::new(),
            known_pubs: Vec::new(),
            hash: None,
            hash2: None,
            et: None,
            token_reply: None,
            procedure: None,
        }
    }

    pub fn square(&self, id: SquareId) -> Option<&UserSquare> {
        self.squares.iter().find(|s| s.square_id == id)
    }

    /// Replaces any earlier copy of the same square.
    pub fn put_square(&mut self, sq: UserSquare) {
        match self.squares.iter_mut().find(|s| s.square_id == sq.square_id) {
            Some(slot) => *slot = sq,
            None => self.squares.push(sq),
        }
    }

    pub fn learn_pub(&mut self, user: &str, public: AsymPublic) {
        match self.known_pubs.iter_mut().find(|(u, _)| u == user) {
            Some(slot) => slot.1 = public,
            None => self.known_pubs.push((user.to_string(), public)),
        }
    }

    pub fn holdings(&self, ledger: &Ledger, with_scopes: bool) -> Vec<String> {
        let mut out = Vec::new();
        if with_scopes {
            out.extend(self.procedure.as_ref().and_then(|p| p.render()));
        }
        if self.pair.is_some() {
            out.push(names::private_key(&self.name));
        }
        for sq in &self.squares {
            let sfx = square_suffix(sq.square_id.0 as usize);
            if sq.sig_u.is_some() {
                out.push(format!("{}{sfx}", names::SIG_U));
            }
            if sq.sig_s.is_some() {
                out.push(format!("{}{sfx}", names::SIG_S));
            }
            if sq.es.is_some() {
                out.push(format!("{}{sfx}", names::ES));
            }
            let label = address_label(ledger.balance(&sq.address));
            out.push(match label.split_once(' ') {
                Some((add, bal)) => format!("{add}{sfx} {bal}"),
                None => format!("{label}{sfx}"),
            });
        }
        if self.pair.is_some() {
            out.push(names::public_key(&self.name));
        }
        for (u, _) in &self.known_pubs {
            out.push(names::public_key(u));
        }
        if self.hash.is_some() {
            out.push(names::HASH.to_string());
        }
        if self.hash2.is_some() {
            out.push(names::HASH2.to_string());
        }
        if self.et.is_some() {
            out.push(names::token_cypher(&self.name));
        }
        if self.token_reply.is_some() {
            out.push(names::token_reply(&self.name));
        }
        out
    }

    pub fn snapshot(&self) -> Vec<Value> {
        let mut out = Vec::new();
        if let Some(p) = &self.pair {
            out.push(Value::AsymPrivate(p.private.clone()));
            out.push(Value::AsymPublic(p.public.clone()));
        }
        for sq in &self.squares {
            out.push(Value::Address(sq.address));
            out.extend(sq.es.clone().map(Value::Cypher));
            out.extend(sq.sig_u.clone().map(Value::SigningKey));
            out.extend(sq.sig_s.clone().map(Value::SigningKey));
        }
        for (_, k) in &self.known_pubs {
            out.push(Value::AsymPublic(k.clone()));
        }
        out.extend(self.hash.map(Value::Digest));
        out.extend(self.hash2.map(Value::Digest));
        out.extend(self.et.clone().map(Value::Cypher));
        out.extend(self.token_reply.clone().map(Value::Token));
        out
    }
}
