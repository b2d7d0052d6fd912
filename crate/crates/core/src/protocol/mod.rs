//! Party state machines for square setup, ownership transfer, redemption and
//! the unencrypted baseline.
//!
//! Everything runs on a [`Simulation`]: one server, any number of users, a
//! destructive store, a ledger and a deterministic message queue. Each
//! protocol step appends a [`TraceEvent`] whose holdings are read from live
//! party state.

mod message;
mod names;
pub mod party;
mod procedure;
mod sim;
mod trace;
mod transport;

use thiserror::Error;

use crate::crypto::{BackendKind, CryptoError};
use crate::ledger::LedgerError;
use crate::store::StoreError;

pub use message::{Message, MessageError, MessageKind, WIRE_VERSION};
pub use names::{format_cents, user_column};
pub use party::{Challenge, CryptoSquareRecord, ServerState, UserSquare, UserState};
pub use procedure::{DynamicProcedure, ProcedureState};
pub use sim::{Fault, Simulation, SquareInfo, TransferSession};
pub use trace::{render_table, render_trace, StepView, TraceEvent};
pub use transport::{Action, Channel, Envelope, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SquareId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartyId {
    Server,
    User(String),
}

impl PartyId {
    pub fn user(name: &str) -> Self {
        PartyId::User(name.to_string())
    }

    /// Column header used in trace tables.
    pub fn column(&self) -> String {
        match self {
            PartyId::Server => "SERVER_S".to_string(),
            PartyId::User(u) => user_column(u),
        }
    }
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.column())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Encrypted squares plus token authentication and the Es hash check.
    CryptoCubic,
    /// Plain multisig: the user holds Sig_U in the clear.
    Baseline3,
    /// Encrypted squares without authentication; Kb_Public goes straight
    /// to the server.
    Bare4,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::CryptoCubic => "cryptocubic",
            Mode::Baseline3 => "baseline3",
            Mode::Bare4 => "bare4",
        }
    }

    pub fn authenticated(self) -> bool {
        self == Mode::CryptoCubic
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cryptocubic" => Ok(Mode::CryptoCubic),
            "baseline3" => Ok(Mode::Baseline3),
            "bare4" => Ok(Mode::Bare4),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub mode: Mode,
    pub backend: BackendKind,
    pub seed: u64,
    /// Ticks a party waits for a reply before the session aborts.
    pub timeout_ticks: u64,
    /// Drop the previous owner's private key from server memory once a
    /// transfer completes. Off by default: the server keeps it.
    pub wipe_ka_after_transfer: bool,
    pub confirmation_ticks: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: Mode::CryptoCubic,
            backend: BackendKind::Symbolic,
            seed: 0,
            timeout_ticks: 100,
            wipe_ka_after_transfer: false,
            confirmation_ticks: 0,
        }
    }
}

impl Config {
    pub fn new(mode: Mode, backend: BackendKind, seed: u64) -> Self {
        Config {
            mode,
            backend,
            seed,
            ..Config::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Initiated,
    SenderAuthenticated,
    EaWithdrawn,
    ReceiverAuthenticated,
    HashVerified,
    Completed,
    Aborted,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("unknown square {0:?}")]
    UnknownSquare(SquareId),
    #[error("unknown session {0:?}")]
    UnknownSession(SessionId),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` owns no square")]
    NoSquare(String),
    #[error("user `{user}` does not own square {square:?}")]
    NotOwner { user: String, square: SquareId },
    #[error("received private key does not match the owner's public key")]
    KaMismatch,
    #[error("decrypted signature key does not belong to the square's address")]
    SigUMismatch,
    #[error("owner cypher slot is empty")]
    SlotEmpty,
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("authentication of `{0}` failed")]
    AuthFailure(String),
    #[error("Es received by `{0}` does not hash to the server's Hash")]
    CounterfeitEs(String),
    #[error("session is in phase {found:?}, expected {expected}")]
    WrongPhase { found: Phase, expected: &'static str },
    #[error("operation not available in mode {0}")]
    WrongMode(&'static str),
    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Message(#[from] MessageError),
}
