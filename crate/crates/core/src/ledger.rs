//! Simulated on-chain ledger: account balances in cents, external funding,
//! and spends that need valid signatures under both multisig legs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::crypto::{verify_signature, Address, CryptoBackend, Signature, SigningKey, VerifyingKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    User,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("address {0} is already registered")]
    DuplicateAddress(Address),
    #[error("address {0} is not registered")]
    UnknownAddress(Address),
    #[error("address is not derived from the supplied verification keys")]
    AddressNotBound,
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("insufficient funds: balance {balance}, requested {requested}")]
    InsufficientFunds { balance: u64, requested: u64 },
    #[error("missing {0:?} signature")]
    MissingSignature(Leg),
    #[error("bad {0:?} signature")]
    BadSignature(Leg),
    #[error("nonce {got} rejected, expected {expected}")]
    Replay { expected: u64, got: u64 },
    #[error("address {0} has no spend rule")]
    NotSpendable(Address),
}

/// Both verification halves must accept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualSigRule {
    pub verify_u: VerifyingKey,
    pub verify_s: VerifyingKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerAccount {
    pub address: Address,
    pub balance: u64,
    /// `None` for external wallets, which can receive but not spend here.
    pub rule: Option<DualSigRule>,
    pub next_nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTx {
    pub source: Address,
    pub destination: Address,
    pub amount: u64,
    pub nonce: u64,
    pub sig_u: Option<Signature>,
    pub sig_s: Option<Signature>,
}

impl ChainTx {
    pub fn unsigned(source: Address, destination: Address, amount: u64, nonce: u64) -> Self {
        ChainTx {
            source,
            destination,
            amount,
            nonce,
            sig_u: None,
            sig_s: None,
        }
    }

    /// The bytes both legs sign.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 32 + 16 + 8);
        out.extend_from_slice(b"cc-spend-v1");
        out.extend_from_slice(&self.source.0);
        out.extend_from_slice(&self.destination.0);
        out.extend_from_slice(&self.amount.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out
    }

    pub fn sign_with(
        mut self,
        backend: &dyn CryptoBackend,
        sig_u: Option<&SigningKey>,
        sig_s: Option<&SigningKey>,
    ) -> Self {
        let msg = self.signing_bytes();
        self.sig_u = sig_u.map(|k| backend.sign(k, &msg));
        self.sig_s = sig_s.map(|k| backend.sign(k, &msg));
        self
    }
}

pub fn sign(backend: &dyn CryptoBackend, key: &SigningKey, tx: &ChainTx) -> Signature {
    backend.sign(key, &tx.signing_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxRecord {
    pub id: TxId,
    pub source: Address,
    pub destination: Address,
    pub amount: u64,
    pub confirmed_at: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    accounts: BTreeMap<Address, LedgerAccount>,
    txs: Vec<TxRecord>,
    /// Ticks between acceptance of a spend and the destination credit.
    confirmation_ticks: u64,
    now: u64,
    /// Confirmed credit already applied per destination.
    credited: BTreeMap<Address, u64>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_confirmation_delay(ticks: u64) -> Self {
        Ledger {
            confirmation_ticks: ticks,
            ..Self::default()
        }
    }

    pub fn register(
        &mut self,
        address: Address,
        verify_u: &VerifyingKey,
        verify_s: &VerifyingKey,
    ) -> Result<(), LedgerError> {
        if Address::from_verifying_keys(verify_u, verify_s) != address {
            return Err(LedgerError::AddressNotBound);
        }
        if self.accounts.contains_key(&address) {
            return Err(LedgerError::DuplicateAddress(address));
        }
        self.accounts.insert(
            address,
            LedgerAccount {
                address,
                balance: 0,
                rule: Some(DualSigRule {
                    verify_u: verify_u.clone(),
                    verify_s: verify_s.clone(),
                }),
                next_nonce: 0,
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, address: &Address) -> bool {
        self.accounts.get(address).is_some_and(|a| a.rule.is_some())
    }

    pub fn account(&self, address: &Address) -> Option<&LedgerAccount> {
        self.accounts.get(address)
    }

    pub fn fund(&mut self, address: Address, amount: u64) -> Result<(), LedgerError> {
        if amount == 0 {
            return Err(LedgerError::NonPositiveAmount);
        }
        let acct = self
            .accounts
            .get_mut(&address)
            .ok_or(LedgerError::UnknownAddress(address))?;
        acct.balance += amount;
        Ok(())
    }

    pub fn balance(&self, address: &Address) -> u64 {
        self.accounts.get(address).map_or(0, |a| a.balance)
    }

    pub fn next_nonce(&self, address: &Address) -> u64 {
        self.accounts.get(address).map_or(0, |a| a.next_nonce)
    }

    pub fn spend(&mut self, tx: &ChainTx) -> Result<TxId, LedgerError> {
        if tx.amount == 0 {
            return Err(LedgerError::NonPositiveAmount);
        }
        let acct = self
            .accounts
            .get(&tx.source)
            .ok_or(LedgerError::UnknownAddress(tx.source))?;
        let rule = acct.rule.as_ref().ok_or(LedgerError::NotSpendable(tx.source))?;
        let msg = tx.signing_bytes();
        let sig_u = tx.sig_u.as_ref().ok_or(LedgerError::MissingSignature(Leg::User))?;
        let sig_s = tx.sig_s.as_ref().ok_or(LedgerError::MissingSignature(Leg::Server))?;
        if !verify_signature(&rule.verify_u, &msg, sig_u) {
            return Err(LedgerError::BadSignature(Leg::User));
        }
        if !verify_signature(&rule.verify_s, &msg, sig_s) {
            return Err(LedgerError::BadSignature(Leg::Server));
        }
        if tx.nonce != acct.next_nonce {
            return Err(LedgerError::Replay {
                expected: acct.next_nonce,
                got: tx.nonce,
            });
        }
        if tx.amount > acct.balance {
            return Err(LedgerError::InsufficientFunds {
                balance: acct.balance,
                requested: tx.amount,
            });
        }

        let acct = self.accounts.get_mut(&tx.source).expect("checked above");
        acct.balance -= tx.amount;
        acct.next_nonce += 1;
        self.accounts
            .entry(tx.destination)
            .or_insert_with(|| LedgerAccount {
                address: tx.destination,
                balance: 0,
                rule: None,
                next_nonce: 0,
            });
        let id = TxId(self.txs.len() as u64 + 1);
        self.txs.push(TxRecord {
            id,
            source: tx.source,
            destination: tx.destination,
            amount: tx.amount,
            confirmed_at: self.now + self.confirmation_ticks,
        });
        self.settle();
        Ok(id)
    }

    pub fn advance(&mut self, ticks: u64) {
        self.now += ticks;
        self.settle();
    }

    fn pending(&self) -> impl Iterator<Item = &TxRecord> {
        self.txs.iter().filter(move |t| t.confirmed_at > self.now)
    }

    fn settle(&mut self) {
        let now = self.now;
        let mut credits: BTreeMap<Address, u64> = BTreeMap::new();
        for t in &self.txs {
            if t.confirmed_at <= now {
                *credits.entry(t.destination).or_default() += t.amount;
            }
        }
        for (addr, confirmed) in credits {
            let credited_before = self.credited.get(&addr).copied().unwrap_or(0);
            if confirmed > credited_before {
                if let Some(acct) = self.accounts.get_mut(&addr) {
                    acct.balance += confirmed - credited_before;
                }
                self.credited.insert(addr, confirmed);
            }
        }
    }

    pub fn transactions(&self) -> &[TxRecord] {
        &self.txs
    }

    /// Sum of all balances plus credits still waiting for confirmation.
    pub fn total(&self) -> u64 {
        let pending: u64 = self.pending().map(|t| t.amount).sum();
        self.accounts.values().map(|a| a.balance).sum::<u64>() + pending
    }

    /// `address amount_cents` per line, sorted by address.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (addr, acct) in &self.accounts {
            writeln!(out, "{} {}", addr.to_hex(), acct.balance).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{new_backend, BackendKind, MultiSigBundle};

    fn setup(kind: BackendKind) -> (Box<dyn CryptoBackend>, Ledger, MultiSigBundle) {
        let mut b = new_backend(kind, 7);
        let bundle = b.gen_multisig();
        let mut ledger = Ledger::new();
        ledger
            .register(bundle.address, &bundle.verify_u, &bundle.verify_s)
            .unwrap();
        (b, ledger, bundle)
    }

    fn both() -> [BackendKind; 2] {
        [BackendKind::Symbolic, BackendKind::Concrete]
    }

    #[test]
    fn register_and_fund() {
        for kind in both() {
            let (_, mut ledger, bundle) = setup(kind);
            assert_eq!(ledger.balance(&bundle.address), 0);
            assert_eq!(
                ledger.register(bundle.address, &bundle.verify_u, &bundle.verify_s),
                Err(LedgerError::DuplicateAddress(bundle.address))
            );
            ledger.fund(bundle.address, 1000).unwrap();
            assert_eq!(ledger.balance(&bundle.address), 1000);
            assert_eq!(ledger.fund(bundle.address, 0), Err(LedgerError::NonPositiveAmount));
            let stranger = Address::external("nobody");
            assert_eq!(ledger.fund(stranger, 5), Err(LedgerError::UnknownAddress(stranger)));
        }
    }

    #[test]
    fn register_rejects_unbound_address() {
        let mut b = new_backend(BackendKind::Symbolic, 1);
        let x = b.gen_multisig();
        let y = b.gen_multisig();
        let mut ledger = Ledger::new();
        assert_eq!(
            ledger.register(x.address, &x.verify_u, &y.verify_s),
            Err(LedgerError::AddressNotBound)
        );
    }

    #[test]
    fn funding_is_additive() {
        let (_, mut ledger, bundle) = setup(BackendKind::Symbolic);
        for k in 1..=250u64 {
            ledger.fund(bundle.address, 1).unwrap();
            assert_eq!(ledger.balance(&bundle.address), k);
        }
    }

    #[test]
    fn dual_signature_spend() {
        for kind in both() {
            let (b, mut ledger, bundle) = setup(kind);
            ledger.fund(bundle.address, 1000).unwrap();
            let dest = Address::external("X");
            let tx = ChainTx::unsigned(bundle.address, dest, 1000, 0).sign_with(
                b.as_ref(),
                Some(&bundle.sig_u),
                Some(&bundle.sig_s),
            );
            let total = ledger.total();
            ledger.spend(&tx).unwrap();
            assert_eq!(ledger.balance(&bundle.address), 0);
            assert_eq!(ledger.balance(&dest), 1000);
            assert_eq!(ledger.total(), total);
            // Replaying the accepted transaction is refused.
            ledger.fund(bundle.address, 1000).unwrap();
            assert_eq!(ledger.spend(&tx), Err(LedgerError::Replay { expected: 1, got: 0 }));
        }
    }

    #[test]
    fn no_single_key_spend() {
        for kind in both() {
            let (b, mut ledger, bundle) = setup(kind);
            ledger.fund(bundle.address, 1000).unwrap();
            let dest = Address::external("X");
            let keys = [None, Some(&bundle.sig_u), Some(&bundle.sig_s)];
            // Every assignment of at most one real key to the two legs, plus
            // both legs signed by the same key.
            let mut attempts = Vec::new();
            for u in keys {
                for s in keys {
                    let real = [u, s].iter().filter(|k| k.is_some()).count();
                    let correct = u == Some(&bundle.sig_u) && s == Some(&bundle.sig_s);
                    if !correct || real < 2 {
                        attempts.push((u, s));
                    }
                }
            }
            attempts.push((Some(&bundle.sig_u), Some(&bundle.sig_u)));
            attempts.push((Some(&bundle.sig_s), Some(&bundle.sig_s)));
            for (u, s) in attempts {
                let tx = ChainTx::unsigned(bundle.address, dest, 1000, 0).sign_with(b.as_ref(), u, s);
                assert!(ledger.spend(&tx).is_err(), "{u:?} {s:?}");
            }
            assert_eq!(ledger.balance(&bundle.address), 1000);

            let only_u = ChainTx::unsigned(bundle.address, dest, 1000, 0).sign_with(
                b.as_ref(),
                Some(&bundle.sig_u),
                None,
            );
            assert_eq!(ledger.spend(&only_u), Err(LedgerError::MissingSignature(Leg::Server)));
        }
    }

    #[test]
    fn overspend_is_refused() {
        let (b, mut ledger, bundle) = setup(BackendKind::Concrete);
        ledger.fund(bundle.address, 1000).unwrap();
        let tx = ChainTx::unsigned(bundle.address, Address::external("X"), 1001, 0).sign_with(
            b.as_ref(),
            Some(&bundle.sig_u),
            Some(&bundle.sig_s),
        );
        assert_eq!(
            ledger.spend(&tx),
            Err(LedgerError::InsufficientFunds {
                balance: 1000,
                requested: 1001
            })
        );
    }

    #[test]
    fn tampered_amount_breaks_signatures() {
        let (b, mut ledger, bundle) = setup(BackendKind::Concrete);
        ledger.fund(bundle.address, 1000).unwrap();
        let mut tx = ChainTx::unsigned(bundle.address, Address::external("X"), 10, 0).sign_with(
            b.as_ref(),
            Some(&bundle.sig_u),
            Some(&bundle.sig_s),
        );
        tx.amount = 1000;
        assert_eq!(ledger.spend(&tx), Err(LedgerError::BadSignature(Leg::User)));
    }

    #[test]
    fn confirmation_delay_holds_credit() {
        let mut b = new_backend(BackendKind::Symbolic, 3);
        let bundle = b.gen_multisig();
        let mut ledger = Ledger::with_confirmation_delay(6);
        ledger.register(bundle.address, &bundle.verify_u, &bundle.verify_s).unwrap();
        ledger.fund(bundle.address, 500).unwrap();
        let dest = Address::external("X");
        let tx = ChainTx::unsigned(bundle.address, dest, 500, 0).sign_with(
            b.as_ref(),
            Some(&bundle.sig_u),
            Some(&bundle.sig_s),
        );
        ledger.spend(&tx).unwrap();
        assert_eq!(ledger.balance(&dest), 0);
        assert_eq!(ledger.total(), 500);
        ledger.advance(5);
        assert_eq!(ledger.balance(&dest), 0);
        ledger.advance(1);
        assert_eq!(ledger.balance(&dest), 500);
        ledger.advance(10);
        assert_eq!(ledger.balance(&dest), 500);
        assert_eq!(ledger.total(), 500);
    }

    #[test]
    fn dump_is_sorted() {
        let (b, mut ledger, bundle) = setup(BackendKind::Symbolic);
        ledger.fund(bundle.address, 1000).unwrap();
        let tx = ChainTx::unsigned(bundle.address, Address::external("X"), 400, 0).sign_with(
            b.as_ref(),
            Some(&bundle.sig_u),
            Some(&bundle.sig_s),
        );
        ledger.spend(&tx).unwrap();
        let dump = ledger.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert!(dump.contains(&format!("{} 600", bundle.address.to_hex())));
        assert!(dump.contains(&format!("{} 400", Address::external("X").to_hex())));
    }
}
