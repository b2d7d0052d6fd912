//! CryptoCubic: encrypted 2-of-2 multisig ownership transfer over a
//! self-destructive store, with a symbolic attacker to check it.

pub mod adversary;
pub mod crypto;
pub mod ledger;
pub mod protocol;
pub mod store;

pub use adversary::{run_attack, AttackVerdict, Scenario};
pub use crypto::{BackendKind, CryptoBackend, Value};
pub use ledger::Ledger;
pub use protocol::{Config, Fault, Mode, PartyId, ProtocolError, Simulation, SquareId};
pub use store::DestructiveStore;
