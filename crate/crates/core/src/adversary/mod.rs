//! The attacker model: what a coalition sees, what it can derive from that
//! under perfect cryptography, and whether the result spends a square.
//!
//! Knowledge is closed under analysis only (decrypt with a known key, open a
//! tuple). Synthesis (hashing, encrypting, building tuples) would make the
//! set infinite, so it is answered on demand by [`Closure::derivable`]. None
//! of the synthesis rules produces a signing key, so they never change a
//! spend verdict.

mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::crypto::{Address, CryptoBackend, Payload, Scheme, SigningKey, Value, VerifyingKey};
use crate::ledger::{ChainTx, Ledger, LedgerError, TxId};
use crate::protocol::{Message, Network, SquareInfo};

pub use scenario::{
    audit_trace, render_report, run_attack, AttackVerdict, Scenario, StepAudit, ASSUMPTION,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    /// Part of the coalition's input, tagged with where it came from.
    Given(String),
    AsymDecrypt,
    SymDecrypt,
    Untuple,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub rule: Rule,
    pub inputs: Vec<Value>,
    pub output: Value,
}

impl fmt::Display for Derivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            Rule::Given(src) => write!(f, "given from {src}"),
            Rule::AsymDecrypt => f.write_str("asymmetric decrypt"),
            Rule::SymDecrypt => f.write_str("symmetric decrypt"),
            Rule::Untuple => f.write_str("open tuple"),
        }
    }
}

/// Everything an attacker is handed: persistent snapshots, wiretapped
/// payloads and the results of store takes.
#[derive(Debug, Clone, Default)]
pub struct Coalition {
    facts: Vec<(String, Value)>,
}

impl Coalition {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, source: impl Into<String>, values: impl IntoIterator<Item = Value>) -> Self {
        let source = source.into();
        self.facts
            .extend(values.into_iter().map(|v| (source.clone(), v)));
        self
    }

    pub fn with_wiretap(self, net: &Network, prefix: usize) -> Self {
        self.with("wiretap", wiretap_values(net, prefix))
    }

    pub fn facts(&self) -> &[(String, Value)] {
        &self.facts
    }

    pub fn close(&self, backend: &dyn CryptoBackend) -> Closure {
        Closure::compute(backend, self.facts.iter().cloned())
    }
}

/// Payload values of the first `prefix` open-channel messages.
pub fn wiretap_values(net: &Network, prefix: usize) -> Vec<Value> {
    net.wiretap()
        .take(prefix)
        .filter_map(|e| Message::decode(&e.bytes).ok())
        .flat_map(|m| m.payload)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Closure {
    known: BTreeSet<Value>,
    how: BTreeMap<Value, Derivation>,
}

impl Closure {
    /// Least fixed point of the analysis rules over `given`.
    pub fn compute(backend: &dyn CryptoBackend, given: impl IntoIterator<Item = (String, Value)>) -> Self {
        let mut c = Closure::default();
        for (src, v) in given {
            c.add(Derivation {
                rule: Rule::Given(src),
                inputs: vec![],
                output: v,
            });
        }
        let mut opened: BTreeSet<Value> = BTreeSet::new();
        loop {
            let mut fresh = Vec::new();
            let privs: Vec<_> = c
                .known
                .iter()
                .filter_map(|v| match v {
                    Value::AsymPrivate(k) => Some(k.clone()),
                    _ => None,
                })
                .collect();
            let syms: Vec<_> = c
                .known
                .iter()
                .filter_map(|v| match v {
                    Value::SymKey(k) => Some(k.clone()),
                    _ => None,
                })
                .collect();
            for v in &c.known {
                if opened.contains(v) {
                    continue;
                }
                match v {
                    Value::Tuple(items) => {
                        opened.insert(v.clone());
                        fresh.extend(items.iter().map(|i| Derivation {
                            rule: Rule::Untuple,
                            inputs: vec![v.clone()],
                            output: i.clone(),
                        }));
                    }
                    Value::Cypher(cy) => {
                        let hit = match cy.scheme {
                            Scheme::Asymmetric => privs.iter().find_map(|k| {
                                backend.asym_decrypt(k, cy).ok().map(|p| Derivation {
                                    rule: Rule::AsymDecrypt,
                                    inputs: vec![v.clone(), Value::AsymPrivate(k.clone())],
                                    output: p,
                                })
                            }),
                            Scheme::Symmetric => syms.iter().find_map(|k| {
                                backend.sym_decrypt(k, cy).ok().map(|p| Derivation {
                                    rule: Rule::SymDecrypt,
                                    inputs: vec![v.clone(), Value::SymKey(k.clone())],
                                    output: p,
                                })
                            }),
                        };
                        if let Some(d) = hit {
                            opened.insert(v.clone());
                            fresh.push(d);
                        }
                    }
                    _ => {}
                }
            }
            let mut grew = false;
            for d in fresh {
                grew |= c.add(d);
            }
            if !grew {
                return c;
            }
        }
    }

    fn add(&mut self, d: Derivation) -> bool {
        if self.known.insert(d.output.clone()) {
            self.how.insert(d.output.clone(), d);
            true
        } else {
            false
        }
    }

    pub fn contains(&self, v: &Value) -> bool {
        self.known.contains(v)
    }

    pub fn values(&self) -> impl Iterator<Item = &Value> {
        self.known.iter()
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    pub fn into_set(self) -> BTreeSet<Value> {
        self.known
    }

    /// Whether `term` can be built from the closure with the synthesis
    /// rules: tupling, hashing a known value, and symbolic encryption
    /// under a known key. Concrete cyphers carry fresh randomness, so only
    /// ones already seen count.
    pub fn derivable(&self, backend: &dyn CryptoBackend, term: &Value) -> bool {
        if self.known.contains(term) {
            return true;
        }
        match term {
            Value::Tuple(items) => items.iter().all(|i| self.derivable(backend, i)),
            Value::Digest(d) => self.known.iter().any(|v| backend.hash_value(v) == *d),
            Value::Cypher(c) => match (&c.payload, c.key_hint) {
                (Payload::Term(inner), Some(id)) => {
                    let key_known = self.known.iter().any(|v| match (v, c.scheme) {
                        (Value::AsymPublic(k), Scheme::Asymmetric) => k.id == id,
                        (Value::SymKey(k), Scheme::Symmetric) => k.id == id,
                        _ => false,
                    });
                    key_known && self.derivable(backend, inner)
                }
                _ => false,
            },
            _ => false,
        }
    }

    /// Rule applications producing `target`, inputs before outputs.
    pub fn witness(&self, target: &Value) -> Vec<Derivation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        self.collect(target, &mut out, &mut seen);
        out
    }

    fn collect(&self, v: &Value, out: &mut Vec<Derivation>, seen: &mut BTreeSet<Value>) {
        if !seen.insert(v.clone()) {
            return;
        }
        let Some(d) = self.how.get(v) else { return };
        for i in &d.inputs {
            self.collect(i, out, seen);
        }
        out.push(d.clone());
    }
}

/// Closure of a plain value set, for callers that do not need witnesses.
pub fn closure(backend: &dyn CryptoBackend, knowledge: impl IntoIterator<Item = Value>) -> BTreeSet<Value> {
    Closure::compute(backend, knowledge.into_iter().map(|v| ("given".to_string(), v)))
        .into_set()
}

fn find_key<'a>(backend: &dyn CryptoBackend, c: &'a Closure, vk: &VerifyingKey) -> Option<&'a SigningKey> {
    let probe = b"leg probe";
    c.values().find_map(|v| match v {
        Value::SigningKey(k) if backend.verify(vk, probe, &backend.sign(k, probe)) => Some(k),
        _ => None,
    })
}

/// Outcome of checking one coalition against one square.
#[derive(Debug, Clone)]
pub struct SpendCheck {
    pub can_spend: bool,
    pub witness: Vec<Derivation>,
    /// The spend the coalition could sign, with the ledger it applies to.
    pub tx: Option<ChainTx>,
    pub staged: Option<Ledger>,
}

impl SpendCheck {
    /// Applies the witness spend to a copy of the staged ledger.
    pub fn replay(&self) -> Option<Result<(TxId, Ledger), LedgerError>> {
        let (tx, ledger) = (self.tx.as_ref()?, self.staged.as_ref()?);
        let mut l = ledger.clone();
        Some(l.spend(tx).map(|id| (id, l)))
    }
}

/// True iff the closure holds signing keys for both legs of `square` and a
/// spend signed with them is accepted by a copy of `ledger`. An empty
/// address is topped up by one cent on the copy so the check is about keys,
/// not balance.
pub fn can_spend(backend: &dyn CryptoBackend, ledger: &Ledger, closure: &Closure, square: &SquareInfo) -> SpendCheck {
    let no = SpendCheck {
        can_spend: false,
        witness: vec![],
        tx: None,
        staged: None,
    };
    let (Some(u), Some(s)) = (
        find_key(backend, closure, &square.verify_u),
        find_key(backend, closure, &square.verify_s),
    ) else {
        return no;
    };
    let mut staged = ledger.clone();
    if staged.balance(&square.address) == 0 && staged.fund(square.address, 1).is_err() {
        return no;
    }
    let amount = staged.balance(&square.address);
    let tx = ChainTx::unsigned(
        square.address,
        Address::external("attacker"),
        amount,
        staged.next_nonce(&square.address),
    )
    .sign_with(backend, Some(u), Some(s));
    if staged.clone().spend(&tx).is_err() {
        return no;
    }
    let mut witness = closure.witness(&Value::SigningKey(u.clone()));
    for d in closure.witness(&Value::SigningKey(s.clone())) {
        if !witness.contains(&d) {
            witness.push(d);
        }
    }
    SpendCheck {
        can_spend: true,
        witness,
        tx: Some(tx),
        staged: Some(staged),
    }
}

#[cfg(test)]
mod tests;
