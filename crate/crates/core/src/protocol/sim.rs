use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{
    decode_value, encode_value, new_backend, Address, AsymPrivate, AsymPublic, CryptoBackend,
    Cypher, SigningKey, SymKey, Token, Value, VerifyingKey,
};
use crate::ledger::{ChainTx, Ledger, LedgerError, TxId};
use crate::store::{DestructiveStore, Presence, ReinsertPermit, SlotId};

use super::message::{Message, MessageKind};
use super::names::{self, format_cents, square_suffix};
use super::party::{Challenge, CryptoSquareRecord, ServerState, UserSquare, UserState};
use super::procedure::DynamicProcedure;
use super::trace::{render_trace, StepView, TraceEvent};
use super::transport::{Channel, Network};
use super::{Config, Mode, PartyId, Phase, ProtocolError, SessionId, SquareId};

/// Misbehaviour a user can be scripted to show.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fault {
    /// Answers the server's key request with an unrelated private key.
    WrongKa,
    /// Never answers the server's key request.
    SilentKa,
    /// Hands the receiver a cypher other than the real Es.
    CounterfeitEs,
    /// Answers a token challenge with a previously seen reply.
    ReplayToken,
    /// Never answers a token challenge.
    SilentChallenge,
}

/// Public facts about a square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareInfo {
    pub id: SquareId,
    pub address: Address,
    pub owner: String,
    pub slot: Option<SlotId>,
    pub verify_u: VerifyingKey,
    pub verify_s: VerifyingKey,
    pub redeemed: bool,
}

#[derive(Debug)]
pub struct TransferSession {
    pub id: SessionId,
    pub square: SquareId,
    pub sender: String,
    pub receiver: String,
    pub sender_pub: AsymPublic,
    pub receiver_pub: AsymPublic,
    pub phase: Phase,
    scope: Option<u64>,
    permit: Option<ReinsertPermit>,
    taken: Option<Vec<u8>>,
}

impl TransferSession {
    /// True while the owner cypher is out of its slot.
    pub fn holds_permit(&self) -> bool {
        self.permit.is_some()
    }
}

pub struct Simulation {
    config: Config,
    backend: Box<dyn CryptoBackend>,
    store: DestructiveStore,
    ledger: Ledger,
    ledger_time: u64,
    net: Network,
    server: ServerState,
    users: BTreeMap<String, UserState>,
    /// Users shown in trace tables, in order of first appearance.
    visible: Vec<String>,
    trace: Vec<TraceEvent>,
    faults: BTreeMap<String, BTreeSet<Fault>>,
    sessions: BTreeMap<SessionId, TransferSession>,
    next_session: u64,
    next_scope: u64,
}

fn who(user: &str) -> String {
    format!("User_{user}")
}

fn field<T>(msg: &Message, i: usize, f: impl Fn(&Value) -> Option<T>) -> Result<T, ProtocolError> {
    msg.payload
        .get(i)
        .and_then(f)
        .ok_or_else(|| ProtocolError::UnexpectedMessage(format!("bad payload in {:?}", msg.kind)))
}

fn cypher(v: &Value) -> Option<Cypher> {
    match v {
        Value::Cypher(c) => Some(c.clone()),
        _ => None,
    }
}

fn address(v: &Value) -> Option<Address> {
    match v {
        Value::Address(a) => Some(*a),
        _ => None,
    }
}

fn public(v: &Value) -> Option<AsymPublic> {
    match v {
        Value::AsymPublic(k) => Some(k.clone()),
        _ => None,
    }
}

fn signing(v: &Value) -> Option<SigningKey> {
    match v {
        Value::SigningKey(k) => Some(k.clone()),
        _ => None,
    }
}

impl Simulation {
    pub fn new(config: Config) -> Self {
        Simulation {
            backend: new_backend(config.backend, config.seed),
            ledger: Ledger::with_confirmation_delay(config.confirmation_ticks),
            config,
            store: DestructiveStore::new(),
            ledger_time: 0,
            net: Network::new(),
            server: ServerState::default(),
            users: BTreeMap::new(),
            visible: Vec::new(),
            trace: Vec::new(),
            faults: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            next_scope: 1,
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn backend(&self) -> &dyn CryptoBackend {
        self.backend.as_ref()
    }

    pub fn backend_mut(&mut self) -> &mut dyn CryptoBackend {
        self.backend.as_mut()
    }

    pub fn store(&self) -> &DestructiveStore {
        &self.store
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn user(&self, name: &str) -> Option<&UserState> {
        self.users.get(name)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserState> {
        self.users.values()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn trace_text(&self) -> String {
        render_trace(&self.trace)
    }

    pub fn session(&self, id: SessionId) -> Option<&TransferSession> {
        self.sessions.get(&id)
    }

    pub fn inject(&mut self, user: &str, fault: Fault) {
        self.faults.entry(user.to_string()).or_default().insert(fault);
    }

    pub fn clear_faults(&mut self, user: &str) {
        self.faults.remove(user);
    }

    fn has_fault(&self, user: &str, fault: Fault) -> bool {
        self.faults.get(user).is_some_and(|f| f.contains(&fault))
    }

    pub fn square_info(&self, id: SquareId) -> Option<SquareInfo> {
        let r = self.server.square(id)?;
        Some(SquareInfo {
            id,
            address: r.address?,
            owner: r.owner.clone(),
            slot: r.owner_cypher_slot,
            verify_u: r.verify_u.clone()?,
            verify_s: r.verify_s.clone()?,
            redeemed: r.redeemed,
        })
    }

    pub fn squares(&self) -> Vec<SquareInfo> {
        self.server
            .squares
            .iter()
            .filter_map(|r| self.square_info(r.square_id))
            .collect()
    }

    /// The most recent square the server lists `user` as owner of.
    pub fn owned_square(&self, user: &str) -> Option<SquareId> {
        let u = self.users.get(user)?;
        u.squares.iter().rev().map(|s| s.square_id).find(|id| {
            self.server
                .square(*id)
                .is_some_and(|r| r.owner == user && !r.redeemed)
        })
    }

    /// Persistent holdings of a party, without procedure scopes.
    pub fn holdings(&self, party: &PartyId) -> Vec<String> {
        match party {
            PartyId::Server => self.server.holdings(&self.store, false),
            PartyId::User(u) => self
                .users
                .get(u)
                .map(|s| s.holdings(&self.ledger, false))
                .unwrap_or_default(),
        }
    }

    /// State of `name`, created empty if unknown. Lets a test or an attack
    /// scenario plant a party that never went through setup.
    pub fn ensure_user(&mut self, name: &str) -> &mut UserState {
        self.users
            .entry(name.to_string())
            .or_insert_with(|| UserState::new(name))
    }

    fn user_mut(&mut self, name: &str) -> Result<&mut UserState, ProtocolError> {
        self.users
            .get_mut(name)
            .ok_or_else(|| ProtocolError::UnknownUser(name.to_string()))
    }

    fn introduce(&mut self, user: &str) -> bool {
        self.ensure_user(user);
        if self.visible.iter().any(|u| u == user) {
            return false;
        }
        self.visible.push(user.to_string());
        true
    }

    fn open_scope(&mut self) -> u64 {
        let id = self.next_scope;
        self.next_scope += 1;
        id
    }

    fn server_proc(&mut self, scope: u64) -> &mut DynamicProcedure {
        self.server
            .procedure_mut(scope)
            .expect("procedure is running")
    }

    fn send(&mut self, from: PartyId, to: PartyId, channel: Channel, kind: MessageKind, session: u64, payload: Vec<Value>) {
        let msg = Message::new(kind, session, payload);
        self.net.send(from, to, channel, &msg);
    }

    fn recv(&mut self, to: &PartyId, kind: MessageKind) -> Result<Message, ProtocolError> {
        self.net.recv(to, kind, self.config.timeout_ticks)
    }

    /// Appends a trace table read from live state.
    fn step(&mut self, label: impl Into<String>) {
        let now = self.net.now();
        if now > self.ledger_time {
            self.ledger.advance(now - self.ledger_time);
            self.ledger_time = now;
        }
        let mut columns = Vec::new();
        let user_col = |sim: &Self, u: &str| {
            (
                PartyId::user(u),
                sim.users[u].holdings(&sim.ledger, true),
            )
        };
        if let Some(first) = self.visible.first() {
            columns.push(user_col(self, first));
        }
        columns.push((PartyId::Server, self.server.holdings(&self.store, true)));
        for u in self.visible.iter().skip(1) {
            columns.push(user_col(self, u));
        }
        let view = StepView {
            server: self.server.snapshot(),
            users: self
                .users
                .iter()
                .map(|(n, u)| (n.clone(), u.snapshot()))
                .collect(),
            raid: self.raid(),
            wiretap_len: self.net.wiretap().count(),
        };
        self.trace.push(TraceEvent {
            step: self.trace.len() + 1,
            label: label.into(),
            columns,
            view,
        });
    }

    /// What one take of every full slot would hand an attacker, taken on
    /// a fork so the live store is untouched.
    pub fn raid(&self) -> Vec<Value> {
        let fork = self.store.fork();
        fork.presence()
            .into_iter()
            .filter(|(_, p)| *p == Presence::Present)
            .filter_map(|(slot, _)| fork.take(slot).ok())
            .filter_map(|(bytes, _)| decode_value(&bytes).ok())
            .collect()
    }

    pub fn setup(&mut self, user: &str) -> Result<SquareId, ProtocolError> {
        match self.config.mode {
            Mode::Baseline3 => self.plain_establish(user),
            _ => self.establish_square(user),
        }
    }

    pub fn transfer(&mut self, from: &str, to: &str) -> Result<(), ProtocolError> {
        let square = self
            .owned_square(from)
            .ok_or_else(|| ProtocolError::NoSquare(from.to_string()))?;
        match self.config.mode {
            Mode::Baseline3 => self.plain_transfer(from, to, square),
            Mode::Bare4 => {
                let sid = self.begin_transfer(from, to, square)?;
                self.complete_transfer(sid)
            }
            Mode::CryptoCubic => {
                let sid = self.begin_transfer(from, to, square)?;
                self.authenticate_sender(sid)?;
                self.withdraw(sid)?;
                self.authenticate_receiver(sid)?;
                if !self.verify_es(sid)? {
                    return Err(ProtocolError::CounterfeitEs(to.to_string()));
                }
                self.complete_transfer(sid)
            }
        }
    }

    pub fn fund(&mut self, user: &str, cents: u64) -> Result<(), ProtocolError> {
        let u = self
            .users
            .get(user)
            .ok_or_else(|| ProtocolError::UnknownUser(user.to_string()))?;
        let addr = u
            .squares
            .last()
            .ok_or_else(|| ProtocolError::NoSquare(user.to_string()))?
            .address;
        self.ledger.fund(addr, cents)?;
        self.step(format!("{} funds {} with {}", who(user), names::ADD, format_cents(cents)));
        Ok(())
    }

    pub fn establish_square(&mut self, user: &str) -> Result<SquareId, ProtocolError> {
        if self.config.mode == Mode::Baseline3 {
            return Err(ProtocolError::WrongMode("baseline3"));
        }
        self.introduce(user);
        let (ka, ka_pub) = (names::private_key(user), names::public_key(user));
        if self.users[user].pair.is_none() {
            let pair = self.backend.gen_asym_pair();
            self.user_mut(user)?.pair = Some(pair);
            self.step(format!("{} generates ({ka}, {ka_pub})", who(user)));
        }
        let pub_key = self.users[user].pair.as_ref().expect("generated").public.clone();
        let party = PartyId::user(user);

        self.send(party.clone(), PartyId::Server, Channel::Open, MessageKind::PublicKey, 0, vec![Value::AsymPublic(pub_key)]);
        let msg = self
            .recv(&PartyId::Server, MessageKind::PublicKey)
            .map_err(|e| ProtocolError::TransportFailure(e.to_string()))?;
        let pub_key = field(&msg, 0, public)?;
        self.server.register_key(user, pub_key.clone());
        let square = SquareId(self.server.squares.len() as u64);
        let sfx = square_suffix(square.0 as usize);
        let ks = self.backend.gen_sym_key();
        let mut record = CryptoSquareRecord::new(square, user);
        record.sym_key = Some(ks.clone());
        record.owner_pub = Some(pub_key.clone());
        self.server.squares.push(record);
        self.step(format!("{} sends {ka_pub}; Server_S creates {}", who(user), names::KS));

        let scope = self.open_scope();
        let mut proc = DynamicProcedure::open(scope);
        proc.bind(names::KS, Value::SymKey(ks.clone()));
        proc.bind(ka_pub.clone(), Value::AsymPublic(pub_key.clone()));
        self.server.procedures.push(proc);
        self.step(format!("Server_S opens a dynamic procedure over {} and {ka_pub}", names::KS));

        let bundle = self.backend.gen_multisig();
        let p = self.server_proc(scope);
        p.bind(names::SIG_U, Value::SigningKey(bundle.sig_u.clone()));
        p.bind(names::SIG_S, Value::SigningKey(bundle.sig_s.clone()));
        p.bind(names::ADD, Value::Address(bundle.address));
        self.step(format!("procedure generates {}, {} and {}", names::SIG_U, names::SIG_S, names::ADD));

        let ea = self.backend.asym_encrypt(&pub_key, &Value::SigningKey(bundle.sig_u.clone()))?;
        let es = self.backend.sym_encrypt(&ks, &Value::SigningKey(bundle.sig_s.clone()))?;
        let ea_name = names::owner_cypher(user);
        let p = self.server_proc(scope);
        p.bind(ea_name.clone(), Value::Cypher(ea.clone()));
        p.bind(names::ES, Value::Cypher(es.clone()));
        self.step(format!("procedure encrypts {ea_name} under {ka_pub} and {} under {}", names::ES, names::KS));

        if self.config.mode.authenticated() {
            let h = self.backend.hash_value(&Value::Cypher(es.clone()));
            self.server.square_mut(square).expect("just added").es_hash = Some(h);
            self.step(format!("Server_S stores {} of {}", names::HASH, names::ES));
        }

        self.send(PartyId::Server, party.clone(), Channel::Open, MessageKind::SquareDelivery, 0, vec![Value::Cypher(es), Value::Address(bundle.address)]);
        let delivered = self.recv(&party, MessageKind::SquareDelivery).and_then(|msg| {
            let sq = UserSquare {
                square_id: square,
                address: field(&msg, 1, address)?,
                es: Some(field(&msg, 0, cypher)?),
                sig_u: None,
                sig_s: None,
            };
            self.user_mut(user)?.put_square(sq);
            self.send(party.clone(), PartyId::Server, Channel::Open, MessageKind::Ack, 0, vec![]);
            self.recv(&PartyId::Server, MessageKind::Ack)
        });
        if let Err(e) = delivered {
            self.server.end_procedure(scope);
            self.server.squares.retain(|r| r.square_id != square);
            self.user_mut(user)?.squares.retain(|s| s.square_id != square);
            return Err(ProtocolError::TransportFailure(e.to_string()));
        }
        self.ledger
            .register(bundle.address, &bundle.verify_u, &bundle.verify_s)?;
        let r = self.server.square_mut(square).expect("just added");
        r.address = Some(bundle.address);
        r.verify_u = Some(bundle.verify_u.clone());
        r.verify_s = Some(bundle.verify_s.clone());
        self.step(format!("procedure sends {} and {} to {}", names::ES, names::ADD, who(user)));

        let slot = self.store.next_slot_id();
        let cap = self.store.grant_source([slot])?;
        self.store.insert(&cap, slot, encode_value(&Value::Cypher(ea)))?;
        let r = self.server.square_mut(square).expect("just added");
        r.owner_cypher_slot = Some(slot);
        r.slot_label = ea_name.clone();
        r.source = Some(cap);
        self.server_proc(scope).mark_stored(format!("{ea_name}{sfx}"));
        self.step(format!("procedure stores {ea_name} in the self-destructive database"));

        self.server.end_procedure(scope);
        self.step("procedure terminates; CryptoSquare established");
        Ok(square)
    }

    pub fn plain_establish(&mut self, user: &str) -> Result<SquareId, ProtocolError> {
        if self.config.mode != Mode::Baseline3 {
            return Err(ProtocolError::WrongMode(self.config.mode.name()));
        }
        self.introduce(user);
        let party = PartyId::user(user);
        let square = SquareId(self.server.squares.len() as u64);
        let sfx = square_suffix(square.0 as usize);

        let scope = self.open_scope();
        let bundle = self.backend.gen_multisig();
        let mut proc = DynamicProcedure::open(scope);
        proc.bind(names::SIG_U, Value::SigningKey(bundle.sig_u.clone()));
        proc.bind(names::SIG_S, Value::SigningKey(bundle.sig_s.clone()));
        proc.bind(names::ADD, Value::Address(bundle.address));
        self.server.procedures.push(proc);
        let mut record = CryptoSquareRecord::new(square, user);
        record.address = Some(bundle.address);
        record.verify_u = Some(bundle.verify_u.clone());
        record.verify_s = Some(bundle.verify_s.clone());
        self.server.squares.push(record);
        self.step(format!(
            "Server_S generates {}, {} and {} in a dynamic procedure",
            names::SIG_U,
            names::SIG_S,
            names::ADD
        ));

        self.send(PartyId::Server, party.clone(), Channel::Open, MessageKind::PlainDelivery, 0, vec![Value::SigningKey(bundle.sig_u.clone()), Value::Address(bundle.address)]);
        let delivered = self.recv(&party, MessageKind::PlainDelivery).and_then(|msg| {
            let sq = UserSquare {
                square_id: square,
                address: field(&msg, 1, address)?,
                es: None,
                sig_u: Some(field(&msg, 0, signing)?),
                sig_s: None,
            };
            self.user_mut(user)?.put_square(sq);
            self.send(party.clone(), PartyId::Server, Channel::Open, MessageKind::Ack, 0, vec![]);
            self.recv(&PartyId::Server, MessageKind::Ack)
        });
        if let Err(e) = delivered {
            self.server.end_procedure(scope);
            self.server.squares.retain(|r| r.square_id != square);
            self.user_mut(user)?.squares.retain(|s| s.square_id != square);
            return Err(ProtocolError::TransportFailure(e.to_string()));
        }
        self.ledger
            .register(bundle.address, &bundle.verify_u, &bundle.verify_s)?;
        self.step(format!("Server_S sends {} and {} to {}", names::SIG_U, names::ADD, who(user)));

        let slot = self.store.next_slot_id();
        let cap = self.store.grant_source([slot])?;
        self.store
            .insert(&cap, slot, encode_value(&Value::SigningKey(bundle.sig_s)))?;
        let r = self.server.square_mut(square).expect("just added");
        r.owner_cypher_slot = Some(slot);
        r.slot_label = names::SIG_S.to_string();
        r.source = Some(cap);
        self.server_proc(scope)
            .mark_stored(format!("{}{sfx}", names::SIG_S));
        self.step(format!("procedure stores {} in the self-destructive database", names::SIG_S));

        self.server.end_procedure(scope);
        self.step("procedure terminates");
        Ok(square)
    }

    pub fn plain_transfer(&mut self, from: &str, to: &str, square: SquareId) -> Result<(), ProtocolError> {
        if self.config.mode != Mode::Baseline3 {
            return Err(ProtocolError::WrongMode(self.config.mode.name()));
        }
        let sq = self
            .users
            .get(from)
            .ok_or_else(|| ProtocolError::UnknownUser(from.to_string()))?
            .square(square)
            .cloned()
            .ok_or_else(|| ProtocolError::NotOwner { user: from.to_string(), square })?;
        let sig_u = sq.sig_u.clone().ok_or(ProtocolError::WrongMode("encrypted square"))?;
        if self.introduce(to) {
            self.step(format!("{} encounters {}", who(from), who(to)));
        }
        self.send(PartyId::user(from), PartyId::user(to), Channel::Open, MessageKind::PlainOffer, 0, vec![Value::SigningKey(sig_u), Value::Address(sq.address)]);
        let msg = self.recv(&PartyId::user(to), MessageKind::PlainOffer)?;
        let received = UserSquare {
            square_id: square,
            address: field(&msg, 1, address)?,
            es: None,
            sig_u: Some(field(&msg, 0, signing)?),
            sig_s: None,
        };
        self.user_mut(to)?.put_square(received);
        if let Some(r) = self.server.square_mut(square) {
            r.owner = to.to_string();
        }
        self.step(format!("{} transfers {} and {} to {}", who(from), names::SIG_U, names::ADD, who(to)));
        Ok(())
    }

    pub fn begin_transfer(&mut self, from: &str, to: &str, square: SquareId) -> Result<SessionId, ProtocolError> {
        if self.config.mode == Mode::Baseline3 {
            return Err(ProtocolError::WrongMode("baseline3"));
        }
        if !self.users.contains_key(from) {
            return Err(ProtocolError::UnknownUser(from.to_string()));
        }
        let record = self
            .server
            .square(square)
            .ok_or(ProtocolError::UnknownSquare(square))?;
        let not_owner = || ProtocolError::NotOwner { user: from.to_string(), square };
        if record.owner != from || record.redeemed || from == to {
            return Err(not_owner());
        }
        let sender_pub = record.owner_pub.clone().ok_or_else(not_owner)?;
        let sq = self.users[from].square(square).cloned().ok_or_else(not_owner)?;

        if self.introduce(to) {
            self.step(format!("{} encounters {}", who(from), who(to)));
        }
        let mut es = sq.es.clone().ok_or_else(not_owner)?;
        if self.has_fault(from, Fault::CounterfeitEs) {
            let k = self.backend.gen_sym_key();
            let junk = self.backend.gen_token();
            es = self.backend.sym_encrypt(&k, &Value::Bytes(junk.value.to_vec()))?;
        }
        let (a, b) = (PartyId::user(from), PartyId::user(to));
        self.send(a.clone(), b.clone(), Channel::Open, MessageKind::Offer, 0, vec![Value::Cypher(es), Value::Address(sq.address)]);
        let msg = self.recv(&b, MessageKind::Offer)?;
        let offered = UserSquare {
            square_id: square,
            address: field(&msg, 1, address)?,
            es: Some(field(&msg, 0, cypher)?),
            sig_u: None,
            sig_s: None,
        };
        self.user_mut(to)?.put_square(offered);
        self.step(format!("{} transfers {} and {} to {}", who(from), names::ES, names::ADD, who(to)));

        let (kb, kb_pub) = (names::private_key(to), names::public_key(to));
        if self.users[to].pair.is_none() {
            let pair = self.backend.gen_asym_pair();
            self.user_mut(to)?.pair = Some(pair);
            self.step(format!("{} generates ({kb}, {kb_pub})", who(to)));
        }
        let receiver_pub = self.users[to].pair.as_ref().expect("generated").public.clone();

        if self.config.mode.authenticated() {
            self.send(b.clone(), a.clone(), Channel::Open, MessageKind::PublicKey, 0, vec![Value::AsymPublic(receiver_pub.clone())]);
            let msg = self.recv(&a, MessageKind::PublicKey)?;
            let k = field(&msg, 0, public)?;
            self.user_mut(from)?.learn_pub(to, k.clone());
            self.step(format!("{} sends {kb_pub} to {}", who(to), who(from)));
            self.send(a, PartyId::Server, Channel::Open, MessageKind::PublicKey, 0, vec![Value::AsymPublic(k)]);
            let msg = self.recv(&PartyId::Server, MessageKind::PublicKey)?;
            self.server.register_key(to, field(&msg, 0, public)?);
            self.step(format!("{} forwards {kb_pub} to Server_S", who(from)));
        } else {
            self.send(b, PartyId::Server, Channel::Open, MessageKind::PublicKey, 0, vec![Value::AsymPublic(receiver_pub.clone())]);
            let msg = self.recv(&PartyId::Server, MessageKind::PublicKey)?;
            self.server.register_key(to, field(&msg, 0, public)?);
            self.step(format!("{} sends {kb_pub} to Server_S", who(to)));
        }

        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id,
            TransferSession {
                id,
                square,
                sender: from.to_string(),
                receiver: to.to_string(),
                sender_pub,
                receiver_pub,
                phase: Phase::Initiated,
                scope: None,
                permit: None,
                taken: None,
            },
        );
        Ok(id)
    }

    /// Token challenge: the server encrypts a fresh token under `subject_pub`
    /// and expects it back from `user`. The token is spent either way.
    pub fn authenticate(&mut self, user: &str, subject_pub: &AsymPublic) -> Result<bool, ProtocolError> {
        let party = PartyId::user(user);
        let token = self.backend.gen_token();
        self.server.put_challenge(Challenge {
            user: user.to_string(),
            token: token.clone(),
            et: None,
            reply: None,
        });
        self.step(format!("Server_S creates {}", names::token(user)));
        let et = self
            .backend
            .asym_encrypt(subject_pub, &Value::Token(token.clone()))?;
        if let Some(c) = self.server.challenges.iter_mut().find(|c| c.user == user) {
            c.et = Some(et.clone());
        }
        let key_name = self
            .server
            .keys
            .iter()
            .find(|k| k.public == *subject_pub)
            .map_or_else(|| names::public_key(user), |k| names::public_key(&k.user));
        self.step(format!(
            "Server_S encrypts {} under {key_name} into {}",
            names::token(user),
            names::token_cypher(user)
        ));
        self.send(PartyId::Server, party, Channel::Open, MessageKind::Challenge, 0, vec![Value::Cypher(et)]);
        self.answer_challenge(user)?;

        let reply = match self.recv(&PartyId::Server, MessageKind::ChallengeResponse) {
            Ok(msg) => field(&msg, 0, |v| match v {
                Value::Token(t) => Some(t.clone()),
                _ => None,
            })
            .ok(),
            Err(ProtocolError::Timeout(_)) => None,
            Err(e) => return Err(e),
        };
        let c = self
            .server
            .challenges
            .iter_mut()
            .find(|c| c.user == user)
            .expect("just stored");
        let ok = reply.as_ref().is_some_and(|r| *r == c.token && !c.token.consumed);
        c.token.consumed = true;
        c.reply = reply.clone();
        let (t, t2) = (names::token(user), names::token_reply(user));
        self.step(match (reply.is_some(), ok) {
            (true, true) => format!("{} answers with {t2}; Server_S confirms it equals {t}", who(user)),
            (true, false) => format!("{} answers with {t2}; Server_S rejects it", who(user)),
            _ => format!("{} does not answer; Server_S times out", who(user)),
        });
        Ok(ok)
    }

    fn answer_challenge(&mut self, user: &str) -> Result<(), ProtocolError> {
        let party = PartyId::user(user);
        let msg = match self.recv(&party, MessageKind::Challenge) {
            Ok(m) => m,
            Err(ProtocolError::Timeout(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let et = field(&msg, 0, cypher)?;
        let silent = self.has_fault(user, Fault::SilentChallenge);
        let replay = self.has_fault(user, Fault::ReplayToken);
        let u = self.users.get(user).ok_or_else(|| ProtocolError::UnknownUser(user.to_string()))?;
        let decrypted = u
            .pair
            .as_ref()
            .and_then(|p| self.backend.asym_decrypt(&p.private, &et).ok());
        let previous = u.token_reply.clone();
        let u = self.user_mut(user)?;
        u.et = Some(et);
        if silent {
            return Ok(());
        }
        let answer = if replay {
            previous.unwrap_or_else(|| Token::new([0; 32]))
        } else {
            match decrypted {
                Some(Value::Token(t)) => {
                    u.token_reply = Some(t.clone());
                    t
                }
                // Cannot open the challenge: nothing to say.
                _ => return Ok(()),
            }
        };
        self.send(party, PartyId::Server, Channel::Open, MessageKind::ChallengeResponse, 0, vec![Value::Token(answer)]);
        Ok(())
    }

    fn session_mut(&mut self, id: SessionId) -> Result<&mut TransferSession, ProtocolError> {
        self.sessions.get_mut(&id).ok_or(ProtocolError::UnknownSession(id))
    }

    fn expect_phase(&self, id: SessionId, phase: Phase, name: &'static str) -> Result<(), ProtocolError> {
        let s = self.sessions.get(&id).ok_or(ProtocolError::UnknownSession(id))?;
        if s.phase != phase {
            return Err(ProtocolError::WrongPhase { found: s.phase, expected: name });
        }
        Ok(())
    }

    pub fn authenticate_sender(&mut self, id: SessionId) -> Result<(), ProtocolError> {
        self.expect_phase(id, Phase::Initiated, "initiated")?;
        let (user, key) = {
            let s = &self.sessions[&id];
            (s.sender.clone(), s.sender_pub.clone())
        };
        if !self.authenticate(&user, &key)? {
            self.abort(id);
            return Err(ProtocolError::AuthFailure(user));
        }
        self.session_mut(id)?.phase = Phase::SenderAuthenticated;
        Ok(())
    }

    pub fn authenticate_receiver(&mut self, id: SessionId) -> Result<(), ProtocolError> {
        self.expect_phase(id, Phase::EaWithdrawn, "ea_withdrawn")?;
        let (user, key) = {
            let s = &self.sessions[&id];
            (s.receiver.clone(), s.receiver_pub.clone())
        };
        if !self.authenticate(&user, &key)? {
            self.abort(id);
            return Err(ProtocolError::AuthFailure(user));
        }
        self.session_mut(id)?.phase = Phase::ReceiverAuthenticated;
        Ok(())
    }

    /// The sender's permission, the destructive read of the owner cypher
    /// into a fresh procedure, and the private-key check.
    pub fn withdraw(&mut self, id: SessionId) -> Result<(), ProtocolError> {
        let expected = if self.config.mode.authenticated() {
            Phase::SenderAuthenticated
        } else {
            Phase::Initiated
        };
        self.expect_phase(id, expected, "sender approval pending")?;
        let (sender, square, sender_pub) = {
            let s = &self.sessions[&id];
            (s.sender.clone(), s.square, s.sender_pub.clone())
        };
        let a = PartyId::user(&sender);
        self.send(a.clone(), PartyId::Server, Channel::Open, MessageKind::Approve, id.0, vec![]);
        if let Err(e) = self.recv(&PartyId::Server, MessageKind::Approve) {
            self.abort(id);
            return Err(e);
        }
        let record = self.server.square(square).ok_or(ProtocolError::UnknownSquare(square))?;
        if record.owner != sender || record.owner_pub.as_ref() != Some(&sender_pub) {
            self.abort(id);
            return Err(ProtocolError::NotOwner { user: sender, square });
        }
        let slot = record.owner_cypher_slot.ok_or(ProtocolError::SlotEmpty)?;
        let label = record.slot_label.clone();
        let (bytes, permit) = match self.store.take(slot) {
            Ok(t) => t,
            Err(_) => {
                self.abort(id);
                return Err(ProtocolError::SlotEmpty);
            }
        };
        let value = decode_value(&bytes).map_err(|e| ProtocolError::UnexpectedMessage(e.to_string()))?;
        let scope = self.open_scope();
        let mut proc = DynamicProcedure::open(scope);
        proc.bind(label.clone(), value);
        self.server.procedures.push(proc);
        let s = self.session_mut(id)?;
        s.scope = Some(scope);
        s.permit = Some(permit);
        s.taken = Some(bytes);
        let verb = if self.config.mode.authenticated() {
            "approves"
        } else {
            "grants permission"
        };
        self.step(format!(
            "{} {verb}; Server_S withdraws {label} into a dynamic procedure",
            who(&sender)
        ));

        self.send(PartyId::Server, a.clone(), Channel::Open, MessageKind::KeyRequest, id.0, vec![]);
        self.answer_key_request(&sender)?;
        let ka = match self.recv(&PartyId::Server, MessageKind::PrivateKey) {
            Ok(msg) => field(&msg, 0, |v| match v {
                Value::AsymPrivate(k) => Some(k.clone()),
                _ => None,
            })?,
            Err(e) => {
                self.abort(id);
                return Err(e);
            }
        };
        if !self.backend.matches(&ka, &sender_pub) {
            self.abort(id);
            return Err(ProtocolError::KaMismatch);
        }
        if let Some(k) = self.server.keys.iter_mut().find(|k| k.user == sender) {
            k.private = Some(ka);
        }
        self.session_mut(id)?.phase = Phase::EaWithdrawn;
        self.step(format!(
            "Server_S receives {} from {} and confirms it matches {}",
            names::private_key(&sender),
            who(&sender),
            names::public_key(&sender)
        ));
        Ok(())
    }

    fn answer_key_request(&mut self, user: &str) -> Result<(), ProtocolError> {
        let party = PartyId::user(user);
        if self.recv(&party, MessageKind::KeyRequest).is_err() || self.has_fault(user, Fault::SilentKa) {
            return Ok(());
        }
        let key: AsymPrivate = if self.has_fault(user, Fault::WrongKa) {
            self.backend.gen_asym_pair().private
        } else {
            match self.users.get(user).and_then(|u| u.pair.as_ref()) {
                Some(p) => p.private.clone(),
                None => return Ok(()),
            }
        };
        self.send(party, PartyId::Server, Channel::Confidential, MessageKind::PrivateKey, 0, vec![Value::AsymPrivate(key)]);
        Ok(())
    }

    /// Hash check of the Es the receiver was handed. A mismatch aborts.
    pub fn verify_es(&mut self, id: SessionId) -> Result<bool, ProtocolError> {
        self.expect_phase(id, Phase::ReceiverAuthenticated, "receiver_authenticated")?;
        let (receiver, square) = {
            let s = &self.sessions[&id];
            (s.receiver.clone(), s.square)
        };
        let b = PartyId::user(&receiver);
        let hash = self
            .server
            .square(square)
            .and_then(|r| r.es_hash)
            .ok_or(ProtocolError::UnknownSquare(square))?;
        self.send(PartyId::Server, b.clone(), Channel::Open, MessageKind::HashNotice, id.0, vec![Value::Digest(hash)]);
        let msg = self.recv(&b, MessageKind::HashNotice)?;
        let got = field(&msg, 0, |v| match v {
            Value::Digest(d) => Some(*d),
            _ => None,
        })?;
        self.user_mut(&receiver)?.hash = Some(got);
        self.step(format!("Server_S sends {} to {}", names::HASH, who(&receiver)));

        let es = self.users[&receiver]
            .square(square)
            .and_then(|s| s.es.clone())
            .ok_or(ProtocolError::NoSquare(receiver.clone()))?;
        let h2 = self.backend.hash_value(&Value::Cypher(es));
        self.user_mut(&receiver)?.hash2 = Some(h2);
        self.step(format!("{} computes {} from {}", who(&receiver), names::HASH2, names::ES));

        if got == h2 {
            self.session_mut(id)?.phase = Phase::HashVerified;
            self.step(format!("{} confirms {} equals {}", who(&receiver), names::HASH, names::HASH2));
            Ok(true)
        } else {
            self.step(format!("{} finds {} differs from {}", who(&receiver), names::HASH, names::HASH2));
            self.abort(id);
            Ok(false)
        }
    }

    /// Re-encrypts Sig_U to the receiver. In bare mode this first performs
    /// the withdrawal.
    pub fn complete_transfer(&mut self, id: SessionId) -> Result<(), ProtocolError> {
        if !self.config.mode.authenticated() {
            if self.sessions.get(&id).is_some_and(|s| s.phase == Phase::Initiated) {
                self.withdraw(id)?;
            }
            self.expect_phase(id, Phase::EaWithdrawn, "ea_withdrawn")?;
        } else {
            self.expect_phase(id, Phase::HashVerified, "hash_verified")?;
        }
        let (sender, receiver, square, receiver_pub, scope) = {
            let s = &self.sessions[&id];
            (s.sender.clone(), s.receiver.clone(), s.square, s.receiver_pub.clone(), s.scope.expect("withdrawn"))
        };
        let (ka_name, kb_pub_name) = (names::private_key(&sender), names::public_key(&receiver));
        let ka = self
            .server
            .key_of(&sender)
            .and_then(|k| k.private.clone())
            .ok_or(ProtocolError::KaMismatch)?;
        let (label, verify_u) = {
            let r = self.server.square(square).ok_or(ProtocolError::UnknownSquare(square))?;
            (r.slot_label.clone(), r.verify_u.clone())
        };
        self.server_proc(scope).bind(ka_name.clone(), Value::AsymPrivate(ka.clone()));
        self.step(format!("procedure loads {ka_name}"));

        let ea = self
            .server_proc(scope)
            .get(&label)
            .and_then(|v| v.as_cypher().cloned())
            .ok_or(ProtocolError::SlotEmpty)?;
        let sig_u = match self.backend.asym_decrypt(&ka, &ea) {
            Ok(Value::SigningKey(k)) => k,
            Ok(_) => {
                self.abort(id);
                return Err(ProtocolError::SigUMismatch);
            }
            Err(e) => {
                self.abort(id);
                return Err(e.into());
            }
        };
        // Not in the original flow: refuse to re-encrypt a key that does not
        // belong to this square's address.
        let probe = b"sig_u fingerprint";
        let belongs = verify_u.is_some_and(|vk| self.backend.verify(&vk, probe, &self.backend.sign(&sig_u, probe)));
        if !belongs {
            self.abort(id);
            return Err(ProtocolError::SigUMismatch);
        }
        self.server_proc(scope).bind(names::SIG_U, Value::SigningKey(sig_u.clone()));
        self.step(format!("procedure decrypts {} from {label}", names::SIG_U));

        self.server_proc(scope).bind(kb_pub_name.clone(), Value::AsymPublic(receiver_pub.clone()));
        self.step(format!("procedure loads {kb_pub_name}"));

        let eb = self.backend.asym_encrypt(&receiver_pub, &Value::SigningKey(sig_u))?;
        let eb_name = names::owner_cypher(&receiver);
        self.server_proc(scope).bind(eb_name.clone(), Value::Cypher(eb.clone()));
        self.step(format!("procedure encrypts {eb_name} from {} under {kb_pub_name}", names::SIG_U));

        let slot = self.store.next_slot_id();
        let cap = self.store.grant_source([slot])?;
        self.store.insert(&cap, slot, encode_value(&Value::Cypher(eb)))?;
        let r = self.server.square_mut(square).expect("checked above");
        r.owner_cypher_slot = Some(slot);
        r.slot_label = eb_name.clone();
        r.source = Some(cap);
        r.owner = receiver.clone();
        r.owner_pub = Some(receiver_pub);
        let sfx = square_suffix(square.0 as usize);
        self.server_proc(scope).mark_stored(format!("{eb_name}{sfx}"));
        self.step(format!("procedure stores {eb_name} in the self-destructive database"));

        self.server.end_procedure(scope);
        let s = self.session_mut(id)?;
        s.phase = Phase::Completed;
        s.permit = None;
        s.taken = None;
        s.scope = None;
        for u in [&sender, &receiver] {
            let p = PartyId::user(u);
            self.send(PartyId::Server, p.clone(), Channel::Open, MessageKind::Notify, id.0, vec![]);
            let _ = self.recv(&p, MessageKind::Notify);
        }
        if self.config.wipe_ka_after_transfer {
            if let Some(k) = self.server.keys.iter_mut().find(|k| k.user == sender) {
                k.private = None;
            }
        }
        self.step(format!("procedure terminates; {} and {} notified", who(&sender), who(&receiver)));
        Ok(())
    }

    /// Ends a session. A withdrawn owner cypher goes back into its slot
    /// under the permit issued by the take.
    pub fn abort(&mut self, id: SessionId) {
        let Some(s) = self.sessions.get_mut(&id) else { return };
        if matches!(s.phase, Phase::Completed | Phase::Aborted) {
            return;
        }
        s.phase = Phase::Aborted;
        let scope = s.scope.take();
        let restored = match (s.permit.take(), s.taken.take()) {
            (Some(permit), Some(bytes)) => self.store.reinsert(&permit, bytes).is_ok(),
            _ => false,
        };
        let square = s.square;
        if let Some(scope) = scope {
            self.server.end_procedure(scope);
        }
        if restored {
            let label = self
                .server
                .square(square)
                .map(|r| r.slot_label.clone())
                .unwrap_or_default();
            self.step(format!("transfer aborted; {label} returns to the self-destructive database"));
        } else {
            self.step("transfer aborted");
        }
    }

    /// The current owner's on-chain spend from the square's address to an
    /// external wallet named `dest`.
    pub fn redeem(&mut self, user: &str, dest: &str, amount: u64) -> Result<TxId, ProtocolError> {
        let sq = self
            .users
            .get(user)
            .ok_or_else(|| ProtocolError::UnknownUser(user.to_string()))?
            .squares
            .last()
            .cloned()
            .ok_or_else(|| ProtocolError::NoSquare(user.to_string()))?;
        let record = self
            .server
            .square(sq.square_id)
            .ok_or(ProtocolError::UnknownSquare(sq.square_id))?;
        let slot = record.owner_cypher_slot.ok_or(ProtocolError::SlotEmpty)?;
        let owner_pub = record.owner_pub.clone();
        let ks = record.sym_key.clone();
        let party = PartyId::user(user);

        self.send(party.clone(), PartyId::Server, Channel::Open, MessageKind::RedeemRequest, 0, vec![Value::Address(sq.address)]);
        self.recv(&PartyId::Server, MessageKind::RedeemRequest)?;

        if self.config.mode == Mode::Baseline3 {
            let (bytes, _) = self.store.take(slot).map_err(|_| ProtocolError::SlotEmpty)?;
            self.send(PartyId::Server, party.clone(), Channel::Open, MessageKind::PlainRelease, 0, vec![decode_value(&bytes).map_err(|e| ProtocolError::UnexpectedMessage(e.to_string()))?]);
            let msg = self.recv(&party, MessageKind::PlainRelease)?;
            let sig_s = field(&msg, 0, signing)?;
            let u = self.user_mut(user)?;
            let held = u.squares.iter_mut().find(|s| s.square_id == sq.square_id).expect("held");
            held.sig_s = Some(sig_s.clone());
            let sig_u = held.sig_u.clone().ok_or(ProtocolError::WrongMode("encrypted square"))?;
            self.step(format!("{} requests {}; [{}] is deleted", who(user), names::SIG_S, names::SIG_S));
            let tx = self.spend(sq.address, dest, amount, &sig_u, &sig_s)?;
            if let Some(r) = self.server.square_mut(sq.square_id) {
                r.redeemed = true;
            }
            self.step(format!("{} signs and submits the spend", who(user)));
            return Ok(tx);
        }

        let owner_pub = owner_pub.ok_or(ProtocolError::UnknownSquare(sq.square_id))?;
        if !self.authenticate(user, &owner_pub)? {
            return Err(ProtocolError::AuthFailure(user.to_string()));
        }
        if self.store.ping(slot)? == Presence::Absent {
            return Err(ProtocolError::SlotEmpty);
        }
        let balance = self.ledger.balance(&sq.address);
        if balance < amount {
            return Err(LedgerError::InsufficientFunds { balance, requested: amount }.into());
        }
        let (bytes, _) = self.store.take(slot).map_err(|_| ProtocolError::SlotEmpty)?;
        let cyph = decode_value(&bytes).map_err(|e| ProtocolError::UnexpectedMessage(e.to_string()))?;
        let ks = ks.ok_or(ProtocolError::UnknownSquare(sq.square_id))?;
        self.send(PartyId::Server, party.clone(), Channel::Confidential, MessageKind::Release, 0, vec![cyph, Value::SymKey(ks)]);
        let msg = self.recv(&party, MessageKind::Release)?;
        let (eb, ks) = (
            field(&msg, 0, cypher)?,
            field(&msg, 1, |v| match v {
                Value::SymKey(k) => Some(k.clone()),
                _ => None,
            })?,
        );
        let eb_name = names::owner_cypher(user);
        let scope = self.open_scope();
        let mut proc = DynamicProcedure::open(scope);
        proc.bind(eb_name.clone(), Value::Cypher(eb.clone()));
        proc.bind(names::KS, Value::SymKey(ks.clone()));
        self.user_mut(user)?.procedure = Some(proc);
        self.step(format!(
            "Server_S releases {eb_name} and {} to {}; [{eb_name}] is deleted",
            names::KS,
            who(user)
        ));

        let result = self.open_sig_keys(user, &eb, &ks, sq.es.as_ref());
        let (sig_u, sig_s) = match result {
            Ok(keys) => keys,
            Err(e) => {
                self.user_mut(user)?.procedure = None;
                return Err(e);
            }
        };
        let proc = self.user_mut(user)?.procedure.as_mut().expect("opened");
        proc.bind(names::SIG_U, Value::SigningKey(sig_u.clone()));
        proc.bind(names::SIG_S, Value::SigningKey(sig_s.clone()));
        self.step(format!("{}'s procedure decrypts {} and {}", who(user), names::SIG_U, names::SIG_S));

        let tx = self.spend(sq.address, dest, amount, &sig_u, &sig_s);
        if let Some(mut p) = self.user_mut(user)?.procedure.take() {
            p.terminate();
        }
        let tx = tx?;
        if let Some(r) = self.server.square_mut(sq.square_id) {
            r.redeemed = true;
        }
        self.step(format!("{} signs and submits the spend; procedure terminates", who(user)));
        Ok(tx)
    }

    fn open_sig_keys(&self, user: &str, eb: &Cypher, ks: &SymKey, es: Option<&Cypher>) -> Result<(SigningKey, SigningKey), ProtocolError> {
        let pair = self.users[user].pair.as_ref().ok_or(ProtocolError::AuthFailure(user.to_string()))?;
        let es = es.ok_or_else(|| ProtocolError::NoSquare(user.to_string()))?;
        let sig_u = signing(&self.backend.asym_decrypt(&pair.private, eb)?).ok_or(ProtocolError::SigUMismatch)?;
        let sig_s = signing(&self.backend.sym_decrypt(ks, es)?).ok_or(ProtocolError::SigUMismatch)?;
        Ok((sig_u, sig_s))
    }

    fn spend(&mut self, source: Address, dest: &str, amount: u64, sig_u: &SigningKey, sig_s: &SigningKey) -> Result<TxId, ProtocolError> {
        let tx = ChainTx::unsigned(source, Address::external(dest), amount, self.ledger.next_nonce(&source))
            .sign_with(self.backend.as_ref(), Some(sig_u), Some(sig_s));
        Ok(self.ledger.spend(&tx)?)
    }
}
